//! Command-line front end for the fieldnav pipeline.
//!
//! Every subcommand recomputes its inputs deterministically from the
//! configuration and master seed, so each stage's output files depend only on
//! `(config, seed)` — never on what happens to sit in the output directory.
//! Wall-clock timings go to stdout only; files contain deterministic bytes.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fieldnav_core::field::SolverMethod;
use fieldnav_core::io;
use fieldnav_core::pipeline::{
    build_artifacts, config_hash, episode_seed, evaluate_mode, expert_demonstrations,
    initial_trajectory, labeled_records, scenario_seed, train_mode, AblationMode, PipelineConfig,
    ScenarioArtifacts,
};
use fieldnav_core::world::{generate_scenario, rasterize_labels, ScenarioKind};
use fieldnav_core::{flow, FlowModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "fieldnav",
    version,
    about = "Trajectory generation on synthetic occupancy grids: scenario synthesis, \
             success-field solving, corridor priors, flow-matching refinement, and \
             benchmark evaluation."
)]
struct Cli {
    /// Pipeline configuration file (TOML); missing fields take defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed (overrides the configuration file).
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark scenarios (grids, endpoints) and write them out.
    GenScenarios,
    /// Solve the success-probability field for every scenario.
    SolveField(SolveFieldArgs),
    /// Extract the multi-modal corridor prior for every scenario.
    ExtractPriors(ExtractPriorsArgs),
    /// Train the flow-matching refinement model and write its checkpoint.
    TrainFlow(TrainFlowArgs),
    /// Draw one prior sample per scenario and refine it with the model.
    Refine(RefineArgs),
    /// Run the benchmark for one mode; write episode records and a summary.
    Evaluate(EvaluateArgs),
    /// Evaluate one mode across refinement step counts; write an N,SR,coll table.
    SweepSteps(SweepStepsArgs),
    /// Run every ablation arm on paired scenarios; write the combined table.
    Ablate,
}

#[derive(Args)]
struct SolveFieldArgs {
    /// First-order smoothness weight (defaults to the configured value).
    #[arg(long)]
    mu: Option<f64>,
    /// Second-order smoothness weight.
    #[arg(long)]
    nu: Option<f64>,
    /// Linear solver: cg (matrix-free) or direct (dense LU).
    #[arg(long, value_name = "cg|direct")]
    solver: Option<SolverMethod>,
    /// Conjugate-gradient residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct ExtractPriorsArgs {
    /// Number of candidate shortest paths per scenario.
    #[arg(long)]
    k: Option<usize>,
    /// Number of mixture components kept after diversity selection.
    #[arg(long)]
    m: Option<usize>,
    /// Softmax temperature for component weights.
    #[arg(long)]
    temp: Option<f64>,
}

#[derive(Args)]
struct TrainFlowArgs {
    /// Smoothness-penalty weight.
    #[arg(long)]
    rho: Option<f64>,
    /// Safety-barrier weight.
    #[arg(long)]
    kappa: Option<f64>,
    /// Barrier clearance margin in meters.
    #[arg(long)]
    eps: Option<f64>,
    /// Number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Ablation arm whose loss weights to train with.
    #[arg(long, default_value = "full")]
    mode: AblationMode,
}

#[derive(Args)]
struct RefineArgs {
    /// Euler integration steps (defaults to the configured value).
    #[arg(long)]
    n_steps: Option<usize>,
    /// Ablation arm providing the prior and the model weights.
    #[arg(long, default_value = "full")]
    mode: AblationMode,
    /// Load the model from a checkpoint (.bin or .csv) instead of training.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ablation arm to evaluate.
    #[arg(long, default_value = "full")]
    mode: AblationMode,
    /// Load the model from a checkpoint (.bin or .csv) instead of training.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct SweepStepsArgs {
    /// Ablation arm to sweep.
    #[arg(long, default_value = "full")]
    mode: AblationMode,
    /// Load the model from a checkpoint (.bin or .csv) instead of training.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let started = Instant::now();
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating output directory {}", cli.out_dir.display()))?;

    match cli.command {
        Command::GenScenarios => gen_scenarios(&cfg, &cli.out_dir)?,
        Command::SolveField(args) => solve_field_cmd(cfg, args, &cli.out_dir)?,
        Command::ExtractPriors(args) => extract_priors_cmd(cfg, args, &cli.out_dir)?,
        Command::TrainFlow(args) => train_flow_cmd(cfg, args, &cli.out_dir)?,
        Command::Refine(args) => refine_cmd(&cfg, args, &cli.out_dir)?,
        Command::Evaluate(args) => evaluate_cmd(&cfg, args, &cli.out_dir)?,
        Command::SweepSteps(args) => sweep_steps_cmd(&cfg, args, &cli.out_dir)?,
        Command::Ablate => ablate_cmd(&cfg, &cli.out_dir)?,
    }

    println!("total wall clock {:.2}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let cfg = PipelineConfig::from_toml(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            Ok(cfg)
        }
        None => Ok(PipelineConfig::default()),
    }
}

/// `(kind, scenario seed, file stem)` for every benchmark scenario, in the
/// deterministic benchmark order.
fn scenario_files(cfg: &PipelineConfig) -> Vec<(ScenarioKind, u64, String)> {
    cfg.scenario_kinds
        .iter()
        .flat_map(|&kind| {
            (0..cfg.seeds_per_kind).map(move |i| {
                (
                    kind,
                    scenario_seed(cfg, kind, i),
                    format!("{}-{i:03}", kind.as_str()),
                )
            })
        })
        .collect()
}

fn subdir(out_dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let dir = out_dir.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn announce(cfg: &PipelineConfig, stage: &str) {
    println!(
        "{stage}: config {} seed {} ({} scenarios)",
        config_hash(cfg),
        cfg.master_seed,
        cfg.scenario_kinds.len() * cfg.seeds_per_kind
    );
}

fn gen_scenarios(cfg: &PipelineConfig, out_dir: &Path) -> anyhow::Result<()> {
    cfg.validate()?;
    announce(cfg, "gen-scenarios");
    let t = Instant::now();
    let dir = subdir(out_dir, "scenarios")?;
    let files = scenario_files(cfg);
    for (kind, seed, stem) in &files {
        let scenario = generate_scenario(*kind, *seed, cfg.width, cfg.height)?;
        io::write_scenario_toml(&dir.join(format!("{stem}.toml")), &scenario)?;
        io::write_grid_pgm(&dir.join(format!("{stem}.pgm")), &scenario.grid, true)?;
        io::write_grid_csv(&dir.join(format!("{stem}.grid.csv")), &scenario.grid)?;
    }
    println!(
        "wrote {} scenarios to {} in {:.2}s",
        files.len(),
        dir.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn solve_field_cmd(
    mut cfg: PipelineConfig,
    args: SolveFieldArgs,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if let Some(mu) = args.mu {
        cfg.mu = mu;
    }
    if let Some(nu) = args.nu {
        cfg.nu = nu;
    }
    if let Some(solver) = args.solver {
        cfg.solver = solver;
    }
    if let Some(tol) = args.tol {
        cfg.solver_tol = tol;
    }
    cfg.validate()?;
    announce(&cfg, "solve-field");
    let t = Instant::now();
    let dir = subdir(out_dir, "fields")?;
    let files = scenario_files(&cfg);
    for (kind, seed, stem) in &files {
        let scenario = generate_scenario(*kind, *seed, cfg.width, cfg.height)?;
        let demos = expert_demonstrations(&scenario, cfg.demos_per_scenario, cfg.demo_noise)?;
        let labels = rasterize_labels(&scenario, &demos);
        let field = fieldnav_core::field::solve_field(
            &scenario.grid,
            &labels,
            cfg.mu,
            cfg.nu,
            fieldnav_core::field::SolveOptions {
                method: cfg.solver,
                tol: cfg.solver_tol,
                max_iter: None,
            },
        )?;
        io::write_field_csv(&dir.join(format!("{stem}.field.csv")), &field)?;
        io::write_field_pgm(&dir.join(format!("{stem}.field.pgm")), &field)?;
    }
    println!(
        "solved {} fields (mu {}, nu {}) into {} in {:.2}s",
        files.len(),
        cfg.mu,
        cfg.nu,
        dir.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn extract_priors_cmd(
    mut cfg: PipelineConfig,
    args: ExtractPriorsArgs,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if let Some(k) = args.k {
        cfg.prior.k_paths = k;
    }
    if let Some(m) = args.m {
        cfg.prior.m_components = m;
    }
    if let Some(temp) = args.temp {
        cfg.prior.temperature = temp;
    }
    cfg.validate()?;
    announce(&cfg, "extract-priors");
    let t = Instant::now();
    let dir = subdir(out_dir, "priors")?;
    let artifacts = build_artifacts(&cfg)?;
    for (art, (_, _, stem)) in artifacts.iter().zip(scenario_files(&cfg)) {
        io::write_mixture_csv(&dir.join(format!("{stem}.mixture.csv")), &art.prior)?;
    }
    println!(
        "extracted {} priors (K {}, M {}, T {}) into {} in {:.2}s",
        artifacts.len(),
        cfg.prior.k_paths,
        cfg.prior.m_components,
        cfg.prior.temperature,
        dir.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn write_loss_trace(path: &Path, trace: &[f64]) -> anyhow::Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, loss) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{loss}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn train_flow_cmd(
    mut cfg: PipelineConfig,
    args: TrainFlowArgs,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if let Some(rho) = args.rho {
        cfg.train.rho = rho;
    }
    if let Some(kappa) = args.kappa {
        cfg.train.kappa = kappa;
    }
    if let Some(eps) = args.eps {
        cfg.train.epsilon = eps;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    announce(&cfg, "train-flow");
    let t = Instant::now();
    let dir = subdir(out_dir, "model")?;
    let artifacts = build_artifacts(&cfg)?;
    println!(
        "artifacts ready in {:.2}s; training mode {} for {} steps",
        t.elapsed().as_secs_f64(),
        args.mode,
        args.mode.train_config(&cfg.train).steps
    );
    let t_train = Instant::now();
    let (model, trace) = train_mode(&cfg, args.mode, &artifacts)?;
    let label = args.mode.label();
    io::write_model_binary(&dir.join(format!("flow-model-{label}.bin")), &model)?;
    io::write_model_text(&dir.join(format!("flow-model-{label}.csv")), &model)?;
    write_loss_trace(&dir.join(format!("loss-trace-{label}.csv")), &trace)?;
    println!(
        "trained in {:.2}s (final loss {:.6}); checkpoints in {}",
        t_train.elapsed().as_secs_f64(),
        trace.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

/// Loads a checkpoint when a path is given (text `.csv` or binary otherwise),
/// and trains the arm's model from the configuration when it is not.
fn obtain_model(
    cfg: &PipelineConfig,
    mode: AblationMode,
    artifacts: &[ScenarioArtifacts],
    path: Option<&Path>,
) -> anyhow::Result<FlowModel> {
    match path {
        Some(p) => {
            let model = if p.extension().is_some_and(|e| e == "csv" || e == "txt") {
                io::read_model_text(p)?
            } else {
                io::read_model_binary(p)?
            };
            println!("loaded model checkpoint {}", p.display());
            Ok(model)
        }
        None => {
            let t = Instant::now();
            let (model, _) = train_mode(cfg, mode, artifacts)?;
            println!(
                "trained mode {} in {:.2}s",
                mode,
                t.elapsed().as_secs_f64()
            );
            Ok(model)
        }
    }
}

fn refine_cmd(cfg: &PipelineConfig, args: RefineArgs, out_dir: &Path) -> anyhow::Result<()> {
    cfg.validate()?;
    let n_steps = args.n_steps.unwrap_or(cfg.refine_steps);
    if n_steps == 0 {
        bail!("refine: --n-steps must be at least 1");
    }
    announce(cfg, "refine");
    let t = Instant::now();
    let dir = subdir(out_dir, "refined")?;
    let artifacts = build_artifacts(cfg)?;
    let model = obtain_model(cfg, args.mode, &artifacts, args.model.as_deref())?;
    for (art, (_, _, stem)) in artifacts.iter().zip(scenario_files(cfg)) {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg, args.mode, &art.scenario));
        let tau0 = initial_trajectory(args.mode, cfg, art, &mut rng)?;
        let refined = flow::refine(&model, &tau0, &art.context, n_steps)?;
        io::write_trajectory_csv(&dir.join(format!("{stem}.initial.csv")), &tau0)?;
        io::write_trajectory_csv(&dir.join(format!("{stem}.refined.csv")), &refined)?;
    }
    println!(
        "refined {} trajectories (N {}) into {} in {:.2}s",
        artifacts.len(),
        n_steps,
        dir.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn print_summary_rows(rows: &[io::SummaryRow]) {
    println!(
        "{:<16} {:>8} {:>7} {:>7} {:>7} {:>9}",
        "mode", "episodes", "SR", "SPL", "Coll.", "MS"
    );
    for r in rows {
        println!(
            "{:<16} {:>8} {:>7.1} {:>7.3} {:>7.1} {:>9.4}",
            r.label, r.episodes, r.sr, r.spl, r.coll, r.ms
        );
    }
}

fn evaluate_cmd(cfg: &PipelineConfig, args: EvaluateArgs, out_dir: &Path) -> anyhow::Result<()> {
    cfg.validate()?;
    announce(cfg, "evaluate");
    let t = Instant::now();
    let artifacts = build_artifacts(cfg)?;
    let model = obtain_model(cfg, args.mode, &artifacts, args.model.as_deref())?;
    let report = evaluate_mode(cfg, args.mode, &model, &artifacts, cfg.refine_steps)?;
    let label = args.mode.label();
    let records = labeled_records(args.mode, &artifacts, &report);
    io::write_jsonl(&out_dir.join(format!("episodes-{label}.jsonl")), &records)?;
    let rows = vec![io::SummaryRow::from_report(label, &report)];
    io::write_summary_csv(
        &out_dir.join(format!("summary-{label}.csv")),
        &config_hash(cfg),
        cfg.master_seed,
        &rows,
    )?;
    print_summary_rows(&rows);
    println!(
        "evaluated {} episodes in {:.2}s; records in {}",
        report.episodes,
        t.elapsed().as_secs_f64(),
        out_dir.display()
    );
    Ok(())
}

fn sweep_steps_cmd(
    cfg: &PipelineConfig,
    args: SweepStepsArgs,
    out_dir: &Path,
) -> anyhow::Result<()> {
    cfg.validate()?;
    if cfg.sweep_steps.is_empty() {
        bail!("sweep-steps: the configured step list is empty");
    }
    announce(cfg, "sweep-steps");
    let artifacts = build_artifacts(cfg)?;
    let model = obtain_model(cfg, args.mode, &artifacts, args.model.as_deref())?;
    let mut rows = Vec::with_capacity(cfg.sweep_steps.len());
    println!("{:>4} {:>7} {:>7}   per-refine latency", "N", "SR", "coll");
    for &n in &cfg.sweep_steps {
        let t = Instant::now();
        let report = evaluate_mode(cfg, args.mode, &model, &artifacts, n)?;
        let dt = t.elapsed().as_secs_f64();
        println!(
            "{n:>4} {:>7.1} {:>7.1}   {:.1} ms/episode over {} episodes",
            report.sr,
            report.collision_rate,
            1e3 * dt / report.episodes.max(1) as f64,
            report.episodes,
        );
        rows.push((n, report.sr, report.collision_rate));
    }
    let path = out_dir.join(format!("sweep-{}.csv", args.mode.label()));
    io::write_sweep_csv(&path, &config_hash(cfg), cfg.master_seed, &rows)?;
    println!("sweep table written to {}", path.display());
    Ok(())
}

fn ablate_cmd(cfg: &PipelineConfig, out_dir: &Path) -> anyhow::Result<()> {
    cfg.validate()?;
    announce(cfg, "ablate");
    let artifacts = build_artifacts(cfg)?;
    let mut rows = Vec::with_capacity(AblationMode::ALL.len());
    for mode in AblationMode::ALL {
        let t = Instant::now();
        let (model, _) = train_mode(cfg, mode, &artifacts)?;
        let report = evaluate_mode(cfg, mode, &model, &artifacts, cfg.refine_steps)?;
        let label = mode.label();
        let records = labeled_records(mode, &artifacts, &report);
        io::write_jsonl(&out_dir.join(format!("episodes-{label}.jsonl")), &records)?;
        println!(
            "{label}: SR {:.1} SPL {:.3} Coll. {:.1} MS {:.4} in {:.2}s",
            report.sr,
            report.spl,
            report.collision_rate,
            report.ms,
            t.elapsed().as_secs_f64()
        );
        rows.push(io::SummaryRow::from_report(label, &report));
    }
    let path = out_dir.join("ablation-summary.csv");
    io::write_summary_csv(&path, &config_hash(cfg), cfg.master_seed, &rows)?;
    println!();
    print_summary_rows(&rows);
    println!("combined table written to {}", path.display());
    Ok(())
}
