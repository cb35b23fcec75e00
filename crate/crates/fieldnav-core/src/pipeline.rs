//! End-to-end orchestration: world generation, feature conditioning, field
//! solving, prior extraction, flow training, refinement, and evaluation, plus
//! the ablation suite and the refinement-steps sweep.
//!
//! Determinism: every random stream derives from the master seed via
//! [`mix_seed`], artifacts are built in a fixed (kind, seed) order (work may
//! run in parallel, results are gathered in input order), and training is
//! single-threaded.  Ablation modes that share a prior type also share their
//! initial-trajectory streams and training seed, so paired comparisons isolate
//! the intended effect.

use crate::error::{Error, Result, StageContext};
use crate::features::{self, FeatureSequence};
use crate::field::{solve_field, SolveOptions, SolverMethod, SuccessField, DEFAULT_MU, DEFAULT_NU};
use crate::flow::{self, FlowModel, TrainConfig, TrainExample};
use crate::metrics::{aggregate, evaluate_episode, EpisodeResult, MetricsReport};
use crate::mix_seed;
use crate::prior::{extract_prior, gaussian_prior, peaks_prior, PriorConfig};
use crate::trajectory::{hausdorff_distance, resample_polyline, Point2, Trajectory};
use crate::world::{
    astar_path, demonstrations, distance_transform, generate_scenario, interior_obstacle_bbox,
    rasterize_labels, DistanceField, OccupancyGrid, Scenario, ScenarioKind,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

/// Salt values separating the pipeline's derived random streams.
const SALT_SCENARIO: u64 = 0x5343454e;
const SALT_TRAIN_SET: u64 = 0x54524149;
const SALT_TRAIN_SEED: u64 = 0x464c4f57;
const SALT_EVAL: u64 = 0x4556414c;

/// Which distance field feeds the safety barrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceSource {
    /// Euclidean distance transform of the occupancy grid (default).
    #[default]
    DistanceTransform,
    /// Pseudo-distance `1 - F`: an ablation flag that follows the field
    /// instead of true obstacle clearance (it penalizes high-success regions;
    /// kept for comparison, not recommended).
    OneMinusField,
}

/// Ablation arms: the full system, the two prior replacements, and the three
/// regularizer removals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Full,
    GaussianPrior,
    PeaksPrior,
    NoSmooth,
    NoSafe,
    NoRegularizers,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::GaussianPrior,
        AblationMode::PeaksPrior,
        AblationMode::NoSmooth,
        AblationMode::NoSafe,
        AblationMode::NoRegularizers,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::GaussianPrior => "gaussian-prior",
            AblationMode::PeaksPrior => "peaks-prior",
            AblationMode::NoSmooth => "no-smooth",
            AblationMode::NoSafe => "no-safe",
            AblationMode::NoRegularizers => "no-regularizers",
        }
    }

    /// Loss weights for this arm on top of the configured baseline.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationMode::NoSmooth => cfg.rho = 0.0,
            AblationMode::NoSafe => cfg.kappa = 0.0,
            AblationMode::NoRegularizers => {
                cfg.rho = 0.0;
                cfg.kappa = 0.0;
            }
            _ => {}
        }
        cfg
    }

    /// Identifier of the initial-trajectory distribution.  Modes sharing a
    /// prior type share their sampling streams, keeping comparisons paired.
    fn prior_salt(self) -> u64 {
        match self {
            AblationMode::GaussianPrior => 1,
            AblationMode::PeaksPrior => 2,
            _ => 0,
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown ablation mode {s:?}; expected one of: {}",
                    AblationMode::ALL.map(|m| m.label()).join(", ")
                ))
            })
    }
}

/// Full pipeline configuration; loads from TOML with every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Root seed every derived stream mixes in.
    pub master_seed: u64,
    /// Scenario families in the benchmark.
    pub scenario_kinds: Vec<ScenarioKind>,
    /// Scenarios per family (paired across ablation arms).
    pub seeds_per_kind: usize,
    /// Grid width in cells.
    pub width: usize,
    /// Grid height in cells.
    pub height: usize,
    /// Expert demonstrations per scenario.
    pub demos_per_scenario: usize,
    /// Via-point jitter (meters) for demonstration synthesis.
    pub demo_noise: f64,
    /// Frames in the synthetic conditioning sequence.
    pub feature_frames: usize,
    /// Feature dimension (also the flow context width).
    pub feature_dim: usize,
    /// Gradient-penalty weight of the field solve.
    pub mu: f64,
    /// Biharmonic-penalty weight of the field solve.
    pub nu: f64,
    /// Field solver selection.
    pub solver: SolverMethod,
    /// Field solver residual tolerance.
    pub solver_tol: f64,
    /// Corridor-prior extraction parameters.
    pub prior: PriorConfig,
    /// Flow-matching training parameters.
    pub train: TrainConfig,
    /// Prior samples per scenario in the training set.
    pub pairs_per_scenario: usize,
    /// Euler steps used at evaluation time.
    pub refine_steps: usize,
    /// Interior noise of the Gaussian baseline prior (meters).
    pub gaussian_sigma: f64,
    /// Distance field driving the safety term.
    pub distance_source: DistanceSource,
    /// Average the snap metric over successful episodes only.
    pub ms_successes_only: bool,
    /// Euler step counts covered by the sweep stage.
    pub sweep_steps: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            scenario_kinds: vec![
                ScenarioKind::TJunction,
                ScenarioKind::Corridor,
                ScenarioKind::Clutter,
            ],
            seeds_per_kind: 40,
            width: 48,
            height: 48,
            demos_per_scenario: 6,
            demo_noise: 0.5,
            feature_frames: 8,
            feature_dim: 8,
            mu: DEFAULT_MU,
            nu: DEFAULT_NU,
            solver: SolverMethod::Cg,
            solver_tol: crate::field::DEFAULT_TOL,
            prior: PriorConfig::default(),
            train: TrainConfig::default(),
            pairs_per_scenario: 12,
            refine_steps: 5,
            gaussian_sigma: 0.5,
            distance_source: DistanceSource::default(),
            ms_successes_only: false,
            sweep_steps: vec![1, 2, 5, 10],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenario_kinds.is_empty() {
            return Err(Error::invalid("at least one scenario kind is required"));
        }
        if self.seeds_per_kind == 0 {
            return Err(Error::invalid("seeds_per_kind must be positive"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid("benchmark grids must be at least 8x8"));
        }
        if self.demos_per_scenario == 0 {
            return Err(Error::invalid("demos_per_scenario must be positive"));
        }
        if self.feature_frames < 2 || self.feature_dim == 0 {
            return Err(Error::invalid("feature sequence needs >= 2 frames and >= 1 dim"));
        }
        if !(self.mu >= 0.0 && self.nu >= 0.0) {
            return Err(Error::invalid("mu and nu must be non-negative"));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::invalid("solver tolerance must be positive"));
        }
        if self.pairs_per_scenario == 0 {
            return Err(Error::invalid("pairs_per_scenario must be positive"));
        }
        if self.refine_steps == 0 {
            return Err(Error::invalid("refine_steps must be positive"));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::invalid("gaussian_sigma must be non-negative"));
        }
        if self.sweep_steps.is_empty() || self.sweep_steps.contains(&0) {
            return Err(Error::invalid("sweep_steps must be positive step counts"));
        }
        self.train.validate()?;
        if self.prior.k_waypoints < 5 {
            // The snap metric needs five waypoints; priors always use K_w.
            return Err(Error::invalid("prior.k_waypoints must be at least 5"));
        }
        Ok(())
    }

    /// Loads a TOML configuration; missing fields take defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::parse("pipeline config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Short hex digest identifying the exact configuration; stamped on every
/// summary table next to the master seed.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Per-scenario artifacts
// ---------------------------------------------------------------------------

/// Everything derived from one scenario, shared read-only across all ablation
/// arms so comparisons stay paired.
#[derive(Debug, Clone)]
pub struct ScenarioArtifacts {
    pub scenario: Scenario,
    /// Expert demonstrations (waypoint polylines from start to goal).
    pub demos: Vec<Vec<Point2>>,
    pub field: SuccessField,
    /// Distance field for the safety term, per the configured source.
    pub distances: Arc<DistanceField>,
    /// Motion-context vector conditioning the flow model.
    pub context: Vec<f64>,
    /// Corridor mixture prior.
    pub prior: crate::prior::MixturePrior,
}

/// Expert demonstrations for a scenario.  Two-corridor worlds emit mirror
/// pairs — each left-arm demonstration together with its exact reflection
/// through the obstacle axis — so the rasterized label mass stays
/// side-symmetric and the junction's route choice remains ambiguous; other
/// worlds use jittered via-point search.
pub fn expert_demonstrations(
    scenario: &Scenario,
    n_demos: usize,
    noise: f64,
) -> Result<Vec<Vec<Point2>>> {
    if scenario.kind != ScenarioKind::TJunction {
        return demonstrations(scenario, n_demos, noise);
    }
    let grid = &scenario.grid;
    let Some((x0, x1, y0, y1)) = interior_obstacle_bbox(grid) else {
        return demonstrations(scenario, n_demos, noise);
    };
    if n_demos == 0 {
        return Err(Error::invalid("n_demos must be positive"));
    }
    let my = (y0 + y1) / 2;
    let axis = x0 + x1; // mirror: ix -> axis - ix maps the block onto itself
    let (sc, gc) = (scenario.start_cell(), scenario.goal_cell());
    // Plan on the clearance-preserving grid so demonstrations round the block
    // corners instead of hugging them; fall back to the raw grid if the
    // inflated corridor pinches shut.
    let plan = crate::world::planning_grid(scenario);
    let to_points = |cells: &[(usize, usize)]| -> Vec<Point2> {
        let mut pts: Vec<Point2> = cells
            .iter()
            .map(|&(ix, iy)| grid.cell_center(ix, iy))
            .collect();
        *pts.first_mut().expect("nonempty path") = scenario.start;
        *pts.last_mut().expect("nonempty path") = scenario.goal;
        pts
    };
    let left_demo_on = |g: &OccupancyGrid, pair: usize| -> Result<Vec<(usize, usize)>> {
        // Successive pairs shift their via row so the corridor is traced more
        // than once.
        let shift = (pair as i64) % 3 - 1;
        let via_y = (my as i64 + shift).clamp(1, g.height() as i64 - 2) as usize;
        let via = crate::world::nearest_free_cell(g, g.cell_center(x0 / 2, via_y))
            .ok_or_else(|| Error::invalid("no free cell near corridor via point"))?;
        let first = astar_path(g, sc, via).ok_or(Error::NoPath(sc.0, sc.1, via.0, via.1))?;
        let second = astar_path(g, via, gc).ok_or(Error::NoPath(via.0, via.1, gc.0, gc.1))?;
        let mut cells = first;
        cells.extend_from_slice(&second[1..]);
        Ok(cells)
    };
    let left_demo =
        |pair: usize| left_demo_on(&plan, pair).or_else(|_| left_demo_on(grid, pair));
    let mirror = |cells: &[(usize, usize)]| -> Option<Vec<(usize, usize)>> {
        cells
            .iter()
            .map(|&(ix, iy)| {
                let mx = axis.checked_sub(ix)?;
                (mx < grid.width() && grid.is_free(mx, iy)).then_some((mx, iy))
            })
            .collect()
    };
    let mut out = Vec::with_capacity(n_demos + 1);
    for pair in 0..n_demos / 2 {
        let cells = left_demo(pair)?;
        let Some(mirrored) = mirror(&cells) else {
            // Hand-made asymmetric junction: fall back to via-point search.
            return demonstrations(scenario, n_demos, noise);
        };
        out.push(to_points(&cells));
        out.push(to_points(&mirrored));
    }
    if out.len() < n_demos {
        // Odd count: repeat an existing demonstration.  A duplicate adds no
        // new label cells, so the side symmetry of the labels is preserved.
        let extra = match out.first() {
            Some(first) => first.clone(),
            None => to_points(&left_demo(0)?),
        };
        out.push(extra);
    }
    Ok(out)
}

/// Pseudo-distance field `d = 1 - clamp(F, 0, 1)` (see
/// [`DistanceSource::OneMinusField`]); zero on occupied cells.
pub fn field_pseudo_distances(field: &SuccessField) -> DistanceField {
    let (w, h) = (field.width(), field.height());
    let values: Vec<f64> = (0..h)
        .flat_map(|iy| (0..w).map(move |ix| (ix, iy)))
        .map(|(ix, iy)| {
            if field.is_occupied(ix, iy) {
                0.0
            } else {
                1.0 - field.value_at_cell(ix, iy).clamp(0.0, 1.0)
            }
        })
        .collect();
    DistanceField::from_values(w, h, field.resolution(), values).expect("matching dimensions")
}

/// Synthesizes the conditioning feature sequence from scenario geometry:
/// frames sample the start→goal chord; columns encode normalized position,
/// goal offset, obstacle clearance on the chord and at lateral probes either
/// side of it, and progress.  The lateral probes are what lets a shared model
/// tell scenarios apart — they reveal which side of the direct route is
/// blocked.  Columns beyond the eight base channels repeat them with a
/// frame-dependent harmonic so any requested dimension stays full-rank and
/// finite.
pub fn synthesize_features(
    scenario: &Scenario,
    distances: &DistanceField,
    frames: usize,
    dim: usize,
) -> Result<FeatureSequence> {
    if frames < 2 || dim == 0 {
        return Err(Error::invalid("need >= 2 frames and >= 1 feature dim"));
    }
    let grid = &scenario.grid;
    let extent = Point2::new(
        grid.width() as f64 * grid.resolution(),
        grid.height() as f64 * grid.resolution(),
    );
    let chord = resample_polyline(&[scenario.start, scenario.goal], frames);
    let heading = (scenario.goal - scenario.start).normalize();
    // Left normal of the chord; probes sit a few cells to each side.
    let normal = Point2::new(-heading.y, heading.x);
    let probe = 4.0 * grid.resolution();
    let mut data = DMatrix::zeros(frames, dim);
    for (t, p) in chord.iter().enumerate() {
        let base = [
            p.x / extent.x,
            p.y / extent.y,
            (scenario.goal.x - p.x) / extent.x,
            (scenario.goal.y - p.y) / extent.y,
            distances.query_clamped(*p),
            distances.query_clamped(*p + normal * probe),
            distances.query_clamped(*p - normal * probe),
            t as f64 / (frames - 1) as f64,
        ];
        for d in 0..dim {
            let v = base[d % base.len()];
            data[(t, d)] = if d < base.len() {
                v
            } else {
                (v * (1 + d / base.len()) as f64).sin()
            };
        }
    }
    FeatureSequence::new(data)
}

/// Builds all artifacts for one scenario.
pub fn scenario_artifacts(
    cfg: &PipelineConfig,
    kind: ScenarioKind,
    seed: u64,
) -> Result<ScenarioArtifacts> {
    let scenario = generate_scenario(kind, seed, cfg.width, cfg.height).stage("gen-scenarios")?;
    let demos = expert_demonstrations(&scenario, cfg.demos_per_scenario, cfg.demo_noise)
        .stage("gen-scenarios")?;
    let labels = rasterize_labels(&scenario, &demos);
    let field = solve_field(
        &scenario.grid,
        &labels,
        cfg.mu,
        cfg.nu,
        SolveOptions {
            method: cfg.solver,
            tol: cfg.solver_tol,
            max_iter: None,
        },
    )
    .stage("solve-field")?;
    let distances = Arc::new(match cfg.distance_source {
        DistanceSource::DistanceTransform => distance_transform(&scenario.grid),
        DistanceSource::OneMinusField => field_pseudo_distances(&field),
    });
    let sequence = synthesize_features(&scenario, &distances, cfg.feature_frames, cfg.feature_dim)
        .stage("features")?;
    let refined = features::refine(&sequence).stage("features")?;
    let context: Vec<f64> = refined.context.iter().copied().collect();
    let prior = extract_prior(&scenario, &field, &cfg.prior).stage("extract-priors")?;
    Ok(ScenarioArtifacts {
        scenario,
        demos,
        field,
        distances,
        context,
        prior,
    })
}

/// Scenario seed for benchmark index `i` (deterministic in the master seed).
pub fn scenario_seed(cfg: &PipelineConfig, kind: ScenarioKind, index: usize) -> u64 {
    mix_seed(&[cfg.master_seed, SALT_SCENARIO, kind_id(kind), index as u64])
}

fn kind_id(kind: ScenarioKind) -> u64 {
    match kind {
        ScenarioKind::Open => 0,
        ScenarioKind::TJunction => 1,
        ScenarioKind::Corridor => 2,
        ScenarioKind::Clutter => 3,
    }
}

/// Builds artifacts for the whole benchmark in (kind, index) order.  Work runs
/// in parallel; results are gathered in input order.
pub fn build_artifacts(cfg: &PipelineConfig) -> Result<Vec<ScenarioArtifacts>> {
    cfg.validate()?;
    let jobs: Vec<(ScenarioKind, usize)> = cfg
        .scenario_kinds
        .iter()
        .flat_map(|&kind| (0..cfg.seeds_per_kind).map(move |i| (kind, i)))
        .collect();
    jobs.par_iter()
        .map(|&(kind, index)| scenario_artifacts(cfg, kind, scenario_seed(cfg, kind, index)))
        .collect()
}

// ---------------------------------------------------------------------------
// Training sets and per-mode training
// ---------------------------------------------------------------------------

/// Draws the initial trajectory for one episode according to the mode's prior.
pub fn initial_trajectory(
    mode: AblationMode,
    cfg: &PipelineConfig,
    art: &ScenarioArtifacts,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    match mode {
        AblationMode::GaussianPrior => gaussian_prior(
            &art.scenario,
            cfg.prior.k_waypoints,
            cfg.gaussian_sigma,
            rng,
        ),
        AblationMode::PeaksPrior => {
            // Deterministic construction; consume one draw so downstream
            // streams stay aligned with the other arms.
            let _ = rng.gen::<u64>();
            peaks_prior(&art.scenario, &art.field, cfg.prior.k_waypoints)
        }
        _ => Ok(art.prior.sample(rng)),
    }
}

/// Builds the flow-matching training set: per scenario, `pairs_per_scenario`
/// prior samples, each paired with the nearest expert demonstration by
/// Hausdorff distance (resampled to the prior's waypoint count).
pub fn build_training_set(
    cfg: &PipelineConfig,
    mode: AblationMode,
    artifacts: &[ScenarioArtifacts],
) -> Result<Vec<TrainExample>> {
    let kw = cfg.prior.k_waypoints;
    let mut out = Vec::with_capacity(artifacts.len() * cfg.pairs_per_scenario);
    for art in artifacts {
        let experts: Vec<Trajectory> = art
            .demos
            .iter()
            .map(|demo| Trajectory::new(resample_polyline(demo, kw)))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            cfg.master_seed,
            SALT_TRAIN_SET,
            mode.prior_salt(),
            kind_id(art.scenario.kind),
            art.scenario.seed,
        ]));
        for _ in 0..cfg.pairs_per_scenario {
            let tau0 = initial_trajectory(mode, cfg, art, &mut rng)?;
            let tau1 = experts
                .iter()
                .min_by(|a, b| {
                    hausdorff_distance(tau0.points(), a.points())
                        .total_cmp(&hausdorff_distance(tau0.points(), b.points()))
                })
                .expect("at least one demonstration")
                .clone();
            out.push(TrainExample {
                tau0,
                tau1,
                context: art.context.clone(),
                distances: art.distances.clone(),
            });
        }
    }
    Ok(out)
}

/// Trains the flow model for one ablation arm.  All arms share the same
/// training seed; arms sharing a prior type also share their datasets, so
/// weight-only arms differ purely in the loss.
pub fn train_mode(
    cfg: &PipelineConfig,
    mode: AblationMode,
    artifacts: &[ScenarioArtifacts],
) -> Result<(FlowModel, Vec<f64>)> {
    let dataset = build_training_set(cfg, mode, artifacts).stage("train-flow")?;
    let mut train_cfg = mode.train_config(&cfg.train);
    train_cfg.seed = mix_seed(&[cfg.master_seed, SALT_TRAIN_SEED]);
    flow::train(&dataset, &train_cfg).stage("train-flow")
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Seed of the per-episode evaluation stream for one scenario and arm.  Arms
/// sharing a prior type draw identical initial trajectories from it.
pub fn episode_seed(cfg: &PipelineConfig, mode: AblationMode, scenario: &Scenario) -> u64 {
    mix_seed(&[
        cfg.master_seed,
        SALT_EVAL,
        mode.prior_salt(),
        kind_id(scenario.kind),
        scenario.seed,
    ])
}

/// One benchmark episode outcome with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub mode: AblationMode,
    pub kind: ScenarioKind,
    pub scenario_seed: u64,
    pub result: EpisodeResult,
}

/// Evaluates one arm over all artifacts at the given Euler step count.
/// Episodes run in parallel; records keep artifact order.
pub fn evaluate_mode(
    cfg: &PipelineConfig,
    mode: AblationMode,
    model: &FlowModel,
    artifacts: &[ScenarioArtifacts],
    refine_steps: usize,
) -> Result<MetricsReport> {
    if refine_steps == 0 {
        return Err(Error::invalid("refine_steps must be positive").in_stage("refine"));
    }
    let episodes: Result<Vec<EpisodeResult>> = artifacts
        .par_iter()
        .map(|art| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg, mode, &art.scenario));
            let tau0 = initial_trajectory(mode, cfg, art, &mut rng)?;
            let refined =
                flow::refine(model, &tau0, &art.context, refine_steps).stage("refine")?;
            evaluate_episode(&art.scenario, &refined).stage("evaluate")
        })
        .collect();
    aggregate(episodes?, cfg.ms_successes_only).stage("evaluate")
}

/// Labels a report's per-episode records with their provenance.
pub fn labeled_records(
    mode: AblationMode,
    artifacts: &[ScenarioArtifacts],
    report: &MetricsReport,
) -> Vec<EpisodeRecord> {
    artifacts
        .iter()
        .zip(&report.records)
        .map(|(art, result)| EpisodeRecord {
            mode,
            kind: art.scenario.kind,
            scenario_seed: art.scenario.seed,
            result: result.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// Outcome of one ablation arm.
#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub mode: AblationMode,
    pub model: FlowModel,
    pub loss_trace: Vec<f64>,
    pub report: MetricsReport,
}

/// Outcome of a full benchmark run.
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub outcomes: Vec<ModeOutcome>,
}

impl BenchmarkReport {
    pub fn outcome(&self, mode: AblationMode) -> Option<&ModeOutcome> {
        self.outcomes.iter().find(|o| o.mode == mode)
    }
}

/// Runs the requested ablation arms over a shared artifact set.
pub fn ablation_suite(cfg: &PipelineConfig, modes: &[AblationMode]) -> Result<BenchmarkReport> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::invalid("at least one ablation mode is required"));
    }
    let artifacts = build_artifacts(cfg)?;
    let mut outcomes = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (model, loss_trace) = train_mode(cfg, mode, &artifacts)?;
        let report = evaluate_mode(cfg, mode, &model, &artifacts, cfg.refine_steps)?;
        outcomes.push(ModeOutcome {
            mode,
            model,
            loss_trace,
            report,
        });
    }
    Ok(BenchmarkReport {
        config_hash: config_hash(cfg),
        master_seed: cfg.master_seed,
        outcomes,
    })
}

/// Trains one arm and evaluates it end to end.
pub fn run_pipeline(cfg: &PipelineConfig, mode: AblationMode) -> Result<BenchmarkReport> {
    ablation_suite(cfg, &[mode])
}

/// Sweeps the Euler step count for a trained arm, returning `(N, SR, Coll.)`
/// rows in the order given.
pub fn steps_sweep(
    cfg: &PipelineConfig,
    mode: AblationMode,
    model: &FlowModel,
    artifacts: &[ScenarioArtifacts],
    steps: &[usize],
) -> Result<Vec<(usize, f64, f64)>> {
    if steps.is_empty() {
        return Err(Error::invalid("sweep needs at least one step count").in_stage("sweep-steps"));
    }
    let mut rows = Vec::with_capacity(steps.len());
    for &n in steps {
        if n == 0 {
            return Err(Error::invalid("Euler refinement needs N >= 1").in_stage("sweep-steps"));
        }
        let report = evaluate_mode(cfg, mode, model, artifacts, n).stage("sweep-steps")?;
        rows.push((n, report.sr, report.collision_rate));
    }
    Ok(rows)
}
