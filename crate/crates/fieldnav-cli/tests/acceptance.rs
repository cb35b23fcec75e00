//! Acceptance gate: nine end-to-end criteria, each with an independent
//! oracle (closed forms, gradient descent, exhaustive enumeration, finite
//! differences, quadrature, or byte comparison), each printing a `[PASS]`
//! line with its runtime (visible under `--nocapture`).
//!
//! The criteria run serialized through a mutex so the stated runtime bounds
//! are measured without interference.

use fieldnav_core::features::{self, FeatureSequence};
use fieldnav_core::field::{solve_field, SolveOptions, SolverMethod};
use fieldnav_core::flow::{
    self, BatchItem, FlowModel, FnFlow, TrainConfig, TrainExample,
};
use fieldnav_core::metrics::{self, EpisodeResult};
use fieldnav_core::pipeline::{
    build_artifacts, evaluate_mode, train_mode, AblationMode, PipelineConfig,
};
use fieldnav_core::prior::{
    build_energy_graph, k_shortest_paths, mixture_from_components, GraphPath,
};
use fieldnav_core::world::{
    distance_transform, generate_scenario, rasterize_labels, route_side, LabelField,
    OccupancyGrid, ScenarioKind, Side,
};
use fieldnav_core::{Point2, SuccessField, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poison| poison.into_inner())
}

fn pass(number: usize, name: &str, started: Instant, budget_secs: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < budget_secs,
        "criterion {number} took {elapsed:.2}s, budget {budget_secs}s"
    );
    println!("[PASS] criterion {number} — {name} ({elapsed:.2}s)");
}

fn pt(x: f64, y: f64) -> Point2 {
    Point2::new(x, y)
}

// ---------------------------------------------------------------------------
// Criterion 1: temporal feature projection closed form
// ---------------------------------------------------------------------------

/// Path-graph Laplacian: interior rows [-1, 2, -1], one-sided ends, L·1 = 0.
fn oracle_laplacian(t: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(t, t);
    for i in 0..t {
        let mut degree = 0.0;
        if i > 0 {
            l[(i, i - 1)] = -1.0;
            degree += 1.0;
        }
        if i + 1 < t {
            l[(i, i + 1)] = -1.0;
            degree += 1.0;
        }
        l[(i, i)] = degree;
    }
    l
}

/// Context weights: softmax of per-frame feature-velocity norms (first frame
/// has velocity zero), and the weighted frame average.
fn oracle_context(z: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let t = z.nrows();
    let mut v = DVector::zeros(t);
    for i in 1..t {
        v[i] = (z.row(i) - z.row(i - 1)).norm();
    }
    let max = v.max();
    let exps = v.map(|x| (x - max).exp());
    let w = &exps / exps.sum();
    let mut zc = DVector::zeros(z.ncols());
    for i in 0..t {
        zc += z.row(i).transpose() * w[i];
    }
    (zc, w)
}

fn oracle_objective(
    w: &DMatrix<f64>,
    z: &DMatrix<f64>,
    l: &DMatrix<f64>,
    zc: &DVector<f64>,
) -> f64 {
    let ones = DVector::from_element(z.nrows(), 1.0);
    (w - z).norm_squared() + (l * w).norm_squared() + (w - &ones * zc.transpose()).norm_squared()
}

#[test]
fn criterion_1_feature_projection_closed_form() {
    let _g = gate();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    for instance in 0..20 {
        let t = rng.gen_range(1..=8usize);
        let d = rng.gen_range(1..=4usize);
        let z = DMatrix::from_fn(t, d, |_, _| rng.gen_range(-2.0..2.0));
        let refined = features::refine(&FeatureSequence::new(z.clone()).unwrap()).unwrap();

        // Residual of the normal equations, with the Laplacian and context
        // built independently here.
        let l = oracle_laplacian(t);
        let (zc, _) = oracle_context(&z);
        let ones = DVector::from_element(t, 1.0);
        let system = DMatrix::identity(t, t) * 2.0 + l.transpose() * &l;
        let rhs = &z + &ones * zc.transpose();
        let residual = (&system * &refined.data - rhs).norm();
        assert!(
            residual <= 1e-10,
            "instance {instance}: residual {residual:.3e}"
        );

        // Independent gradient-descent minimizer of the variational objective.
        let mut w = z.clone();
        for _ in 0..1500 {
            let grad = (&w - &z) * 2.0
                + l.transpose() * (&l * &w) * 2.0
                + (&w - &ones * zc.transpose()) * 2.0;
            w -= grad * 0.05;
        }
        let gap = (&w - &refined.data).norm();
        assert!(gap <= 1e-6, "instance {instance}: GD gap {gap:.3e}");
        assert!(
            oracle_objective(&refined.data, &z, &l, &zc)
                <= oracle_objective(&w, &z, &l, &zc) + 1e-12,
            "instance {instance}: closed form is not the minimizer"
        );
    }

    // Fixed points, exact to double precision.
    let constant = DMatrix::from_fn(5, 3, |_, c| c as f64 - 1.0);
    let refined = features::refine(&FeatureSequence::new(constant.clone()).unwrap()).unwrap();
    assert!((refined.data - constant).norm() <= 1e-12, "constant sequence moved");
    let single = DMatrix::from_row_slice(1, 3, &[1.5, -2.0, 0.25]);
    let refined = features::refine(&FeatureSequence::new(single.clone()).unwrap()).unwrap();
    assert!((refined.data - single).norm() <= 1e-12, "single frame moved");

    pass(1, "feature projection closed form", started, 1.0);
}

// ---------------------------------------------------------------------------
// Criterion 2: success-field solver
// ---------------------------------------------------------------------------

/// Dense grid operator built from the documented stencil: degree counts all
/// in-grid 4-neighbors (Neumann at the outer boundary), occupied neighbors
/// read as zero (Dirichlet pins).  Returns (A, free-cell indices) with
/// A = I + mu L + nu L^2 over free cells.
fn oracle_dense_system(grid: &OccupancyGrid, mu: f64, nu: f64) -> (DMatrix<f64>, Vec<usize>) {
    let (w, h) = (grid.width(), grid.height());
    let mut free = Vec::new();
    let mut ord = vec![usize::MAX; w * h];
    for iy in 0..h {
        for ix in 0..w {
            if grid.is_free(ix, iy) {
                ord[iy * w + ix] = free.len();
                free.push(iy * w + ix);
            }
        }
    }
    let n = free.len();
    let mut lap = DMatrix::zeros(n, n);
    for (i, &cell) in free.iter().enumerate() {
        let (ix, iy) = ((cell % w) as i64, (cell / w) as i64);
        let mut degree = 0.0;
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (ix + dx, iy + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            degree += 1.0;
            let j = ord[ny as usize * w + nx as usize];
            if j != usize::MAX {
                lap[(i, j)] = -1.0;
            }
        }
        lap[(i, i)] = degree;
    }
    let a = DMatrix::identity(n, n) + &lap * mu + (&lap * &lap) * nu;
    (a, free)
}

fn random_grid(width: usize, height: usize, p_occupied: f64, rng: &mut impl Rng) -> OccupancyGrid {
    loop {
        let cells: Vec<u8> = (0..width * height)
            .map(|_| u8::from(rng.gen_bool(p_occupied)))
            .collect();
        if cells.iter().any(|&c| c == 0) {
            return OccupancyGrid::from_cells(width, height, 0.1, cells).unwrap();
        }
    }
}

fn random_labels(grid: &OccupancyGrid, rng: &mut impl Rng) -> LabelField {
    let (w, h) = (grid.width(), grid.height());
    let values = (0..w * h)
        .map(|i| {
            if grid.is_free(i % w, i / w) {
                rng.gen_range(0.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    LabelField {
        width: w,
        height: h,
        values,
    }
}

fn labels_vector(labels: &LabelField, free: &[usize]) -> DVector<f64> {
    DVector::from_iterator(free.len(), free.iter().map(|&c| labels.values[c]))
}

fn field_vector(field: &SuccessField, free: &[usize]) -> DVector<f64> {
    let w = field.width();
    DVector::from_iterator(
        free.len(),
        free.iter().map(|&c| field.value_at_cell(c % w, c / w)),
    )
}

#[test]
fn criterion_2_field_solver() {
    let _g = gate();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mu, nu) = (1.0, 0.05);
    let cg = SolveOptions {
        method: SolverMethod::Cg,
        tol: 1e-12,
        max_iter: None,
    };
    let direct = SolveOptions {
        method: SolverMethod::Direct,
        ..cg
    };

    // Dense oracle vs both solvers on 16x16 grids (random and generated).
    let mut grids: Vec<OccupancyGrid> = (0..3).map(|_| random_grid(16, 16, 0.18, &mut rng)).collect();
    for (kind, seed) in [(ScenarioKind::Clutter, 5), (ScenarioKind::TJunction, 9)] {
        grids.push(generate_scenario(kind, seed, 16, 16).unwrap().grid);
    }
    for (i, grid) in grids.iter().enumerate() {
        let labels = random_labels(grid, &mut rng);
        let (a, free) = oracle_dense_system(grid, mu, nu);
        let y = labels_vector(&labels, &free);
        let oracle = a.clone().lu().solve(&y).expect("oracle solve");
        for (name, opts) in [("cg", cg), ("direct", direct)] {
            let f = solve_field(grid, &labels, mu, nu, opts).unwrap();
            let gap = (field_vector(&f, &free) - &oracle).amax();
            assert!(gap <= 1e-6, "grid {i} {name}: max deviation {gap:.3e}");
        }
    }

    // Uniform positive labels on an all-free grid solve to exactly one.
    let open = OccupancyGrid::from_cells(16, 16, 0.1, vec![0u8; 256]).unwrap();
    let ones = LabelField {
        width: 16,
        height: 16,
        values: vec![1.0; 256],
    };
    let f = solve_field(&open, &ones, mu, nu, direct).unwrap();
    let worst = f
        .raw_values()
        .iter()
        .fold(0.0f64, |acc, v| acc.max((v - 1.0).abs()));
    assert!(worst <= 1e-10, "uniform labels deviate by {worst:.3e}");

    // Zero penalties reproduce the labels.
    let grid = random_grid(16, 16, 0.2, &mut rng);
    let labels = random_labels(&grid, &mut rng);
    let f = solve_field(&grid, &labels, 0.0, 0.0, cg).unwrap();
    for iy in 0..16 {
        for ix in 0..16 {
            let want = if grid.is_free(ix, iy) {
                labels.value(ix, iy)
            } else {
                0.0
            };
            assert!(
                (f.value_at_cell(ix, iy) - want).abs() <= 1e-12,
                "mu=nu=0 must reproduce labels at ({ix},{iy})"
            );
        }
    }

    // The solution minimizes the quadratic energy: random perturbations never
    // decrease it (10 random 12x12 instances).
    for instance in 0..10 {
        let grid = random_grid(12, 12, 0.15, &mut rng);
        let labels = random_labels(&grid, &mut rng);
        let (a, free) = oracle_dense_system(&grid, mu, nu);
        let y = labels_vector(&labels, &free);
        let f = solve_field(&grid, &labels, mu, nu, direct).unwrap();
        let fv = field_vector(&f, &free);
        let energy = |x: &DVector<f64>| (x.transpose() * &a * x)[(0, 0)] - 2.0 * y.dot(x);
        let base = energy(&fv);
        for _ in 0..30 {
            let delta = DVector::from_fn(free.len(), |_, _| rng.gen_range(-0.01..0.01));
            let perturbed = energy(&(&fv + &delta));
            assert!(
                perturbed + 1e-9 >= base,
                "instance {instance}: perturbation lowered the energy by {:.3e}",
                base - perturbed
            );
        }
    }

    pass(2, "success-field solver", started, 10.0);
}

// ---------------------------------------------------------------------------
// Criterion 3: K-shortest corridor candidates
// ---------------------------------------------------------------------------

/// Depth-first enumeration of every simple path, ordered by (cost, node
/// sequence) exactly like the spur-based search under test.
fn all_simple_paths(adj: &[Vec<(usize, f64)>], source: usize, target: usize) -> Vec<GraphPath> {
    fn walk(
        adj: &[Vec<(usize, f64)>],
        target: usize,
        node: usize,
        cost: f64,
        path: &mut Vec<usize>,
        seen: &mut Vec<bool>,
        out: &mut Vec<GraphPath>,
    ) {
        if node == target {
            out.push(GraphPath {
                nodes: path.clone(),
                cost,
            });
            return;
        }
        for &(next, w) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                path.push(next);
                walk(adj, target, next, cost + w, path, seen, out);
                path.pop();
                seen[next] = false;
            }
        }
    }
    let mut out = Vec::new();
    let mut seen = vec![false; adj.len()];
    seen[source] = true;
    walk(adj, target, source, 0.0, &mut vec![source], &mut seen, &mut out);
    out.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.nodes.cmp(&b.nodes)));
    out
}

fn random_graph(rng: &mut impl Rng) -> Vec<Vec<(usize, f64)>> {
    let n = rng.gen_range(4..=10usize);
    let mut adj = vec![Vec::new(); n];
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(0.45) {
                let w = rng.gen_range(0.05..2.0);
                adj[a].push((b, w));
                adj[b].push((a, w));
            }
        }
    }
    adj
}

#[test]
fn criterion_3_k_shortest_paths() {
    let _g = gate();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    // Exhaustive enumeration oracle on 50 random graphs.
    for instance in 0..50 {
        let adj = random_graph(&mut rng);
        let target = adj.len() - 1;
        let oracle = all_simple_paths(&adj, 0, target);
        let got = k_shortest_paths(&adj, 0, target, 8);
        assert_eq!(
            got.len(),
            oracle.len().min(8),
            "instance {instance}: path count"
        );
        for (rank, (g, o)) in got.iter().zip(&oracle).enumerate() {
            assert_eq!(
                g.nodes, o.nodes,
                "instance {instance} rank {rank}: node sequence"
            );
            assert!(
                (g.cost - o.cost).abs() <= 1e-9 * (1.0 + o.cost.abs()),
                "instance {instance} rank {rank}: cost {} vs {}",
                g.cost,
                o.cost
            );
        }
    }

    // On T-junction worlds the eight cheapest corridor candidates must cover
    // both route classes for at least 38 of 40 seeds.
    let mut covered = 0;
    for seed in 0..40u64 {
        let scenario = generate_scenario(ScenarioKind::TJunction, seed, 48, 48).unwrap();
        let demos =
            fieldnav_core::pipeline::expert_demonstrations(&scenario, 6, 0.5).unwrap();
        let labels = rasterize_labels(&scenario, &demos);
        let field = solve_field(
            &scenario.grid,
            &labels,
            1.0,
            0.05,
            SolveOptions::default(),
        )
        .unwrap();
        let graph = build_energy_graph(&field, 1e-3).unwrap();
        let (sx, sy) = scenario.start_cell();
        let (gx, gy) = scenario.goal_cell();
        let source = graph.node_of_cell(sx, sy).unwrap();
        let target = graph.node_of_cell(gx, gy).unwrap();
        let paths = k_shortest_paths(graph.adjacency(), source, target, 8);
        assert!(!paths.is_empty(), "seed {seed}: no corridor candidates");
        let mut left = false;
        let mut right = false;
        for p in &paths {
            match route_side(&scenario.grid, &graph.polyline(&p.nodes)) {
                Some(Side::Left) => left = true,
                Some(Side::Right) => right = true,
                None => {}
            }
        }
        covered += usize::from(left && right);
    }
    assert!(
        covered >= 38,
        "both corridor classes found on only {covered}/40 T-junction seeds"
    );

    pass(3, "K-shortest corridor candidates", started, 30.0);
}

// ---------------------------------------------------------------------------
// Criterion 4: mixture weights
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_mixture_weights() {
    let _g = gate();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // Five arbitrary corridor candidates inside a uniform field.
    let field = SuccessField::uniform(20, 20, 0.1, 0.6).unwrap();
    let components: Vec<Trajectory> = (0..5)
        .map(|i| {
            let lift = 0.25 + 0.3 * i as f64;
            Trajectory::new(vec![
                pt(0.2, 0.2),
                pt(0.6, lift),
                pt(1.1, 0.2 + 0.1 * i as f64),
                pt(1.6, lift * 0.7),
                pt(1.8, 1.8),
            ])
            .unwrap()
        })
        .collect();
    let temperature = 0.5;
    let prior =
        mixture_from_components(components.clone(), &field, temperature, Default::default())
            .unwrap();

    // Ratio identity between the stored scores and weights.
    let sum: f64 = prior.weights.iter().sum();
    assert!((sum - 1.0).abs() <= 1e-12, "weights sum to {sum}");
    for i in 0..prior.weights.len() {
        for j in 0..prior.weights.len() {
            let want = ((prior.scores[i] - prior.scores[j]) / temperature).exp();
            let got = prior.weights[i] / prior.weights[j];
            assert!(
                (got - want).abs() <= 1e-12 * want.max(1.0),
                "ratio ({i},{j}): {got} vs {want}"
            );
        }
    }

    // Shift invariance: raising the uniform field value shifts every score by
    // the same alpha * dF, which must leave the weights untouched.
    let shifted_field = SuccessField::uniform(20, 20, 0.1, 0.9).unwrap();
    let shifted =
        mixture_from_components(components, &shifted_field, temperature, Default::default())
            .unwrap();
    for (a, b) in prior.weights.iter().zip(&shifted.weights) {
        assert!(
            (a - b).abs() <= 1e-12,
            "weights moved under a uniform score shift: {a} vs {b}"
        );
    }
    let score_shift = shifted.scores[0] - prior.scores[0];
    assert!(
        score_shift.abs() > 1e-3,
        "field lift failed to shift the scores"
    );
    for (a, b) in prior.scores.iter().zip(&shifted.scores) {
        assert!(
            ((b - a) - score_shift).abs() <= 1e-12,
            "scores did not shift uniformly"
        );
    }

    // Sampling frequencies match the weights within +/-0.01 at 1e5 draws.
    let draws = 100_000;
    let mut counts = vec![0usize; prior.weights.len()];
    for _ in 0..draws {
        counts[prior.sample_index(&mut rng)] += 1;
    }
    for (i, (&count, &w)) in counts.iter().zip(&prior.weights).enumerate() {
        let freq = count as f64 / draws as f64;
        assert!(
            (freq - w).abs() <= 0.01,
            "component {i}: frequency {freq:.4} vs weight {w:.4}"
        );
    }

    pass(4, "mixture weights", started, 30.0);
}

// ---------------------------------------------------------------------------
// Criterion 5: loss gradients
// ---------------------------------------------------------------------------

fn perturbed(model: &FlowModel, index: usize, delta: f64) -> FlowModel {
    let mut layers = model.network().layers().to_vec();
    let mut remaining = index;
    for layer in &mut layers {
        let wn = layer.weight.len();
        if remaining < wn {
            layer.weight[remaining] += delta;
            break;
        }
        remaining -= wn;
        if remaining < layer.bias.len() {
            layer.bias[remaining] += delta;
            break;
        }
        remaining -= layer.bias.len();
    }
    FlowModel::from_parts(
        model.k_waypoints(),
        model.context_dim(),
        model.time_frequencies(),
        model.pos_scale(),
        layers,
    )
    .unwrap()
}

fn random_trajectory(k: usize, rng: &mut impl Rng) -> Trajectory {
    Trajectory::new(
        (0..k)
            .map(|i| {
                pt(
                    0.15 + 0.1 * i as f64 + rng.gen_range(-0.03..0.03),
                    0.2 + rng.gen_range(-0.08..0.08),
                )
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_5_loss_gradients() {
    let _g = gate();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    let grid = generate_scenario(ScenarioKind::Clutter, 3, 12, 12).unwrap().grid;
    let distances = Arc::new(distance_transform(&grid));
    let k = 5;

    for (model_idx, regularizer_eval) in [
        flow::RegularizerEval::Prediction,
        flow::RegularizerEval::Interpolant,
        flow::RegularizerEval::Prediction,
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = TrainConfig {
            rho: 0.3,
            kappa: 0.05,
            epsilon: 0.1,
            hidden_width: 8,
            hidden_layers: 1,
            time_frequencies: 2,
            regularizer_eval,
            ..TrainConfig::default()
        };
        let mut model_rng = ChaCha8Rng::seed_from_u64(900 + model_idx as u64);
        let model = FlowModel::new(k, 3, &cfg, &mut model_rng).unwrap();
        let examples: Vec<TrainExample> = (0..2)
            .map(|_| TrainExample {
                tau0: random_trajectory(k, &mut rng),
                tau1: random_trajectory(k, &mut rng),
                context: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                distances: distances.clone(),
            })
            .collect();
        let batch: Vec<BatchItem<'_>> = examples
            .iter()
            .zip([0.3, 0.7])
            .map(|(e, t)| BatchItem {
                tau0: &e.tau0,
                tau1: &e.tau1,
                t,
                context: &e.context,
                distances: &e.distances,
            })
            .collect();

        let (breakdown, grads) = flow::regcfm_term_gradients(&model, &batch, &cfg).unwrap();

        // Decomposition identity, cross-checked against the fused training
        // path (single backward pass).
        let (fused, _) = flow::regcfm_gradients(&model, &batch, &cfg).unwrap();
        assert!(
            (breakdown.total
                - (breakdown.fm + cfg.rho * breakdown.smooth + cfg.kappa * breakdown.safe))
                .abs()
                <= 1e-12,
            "model {model_idx}: decomposition identity broken"
        );
        for (a, b) in [
            (breakdown.fm, fused.fm),
            (breakdown.smooth, fused.smooth),
            (breakdown.safe, fused.safe),
            (breakdown.total, fused.total),
        ] {
            assert!(
                (a - b).abs() <= 1e-12,
                "model {model_idx}: loss paths disagree ({a} vs {b})"
            );
        }

        // Central finite differences on every parameter, term by term.
        let h = 1e-5;
        let n_params = model.network().param_count();
        for p in 0..n_params {
            let plus = flow::regcfm_loss_breakdown(&perturbed(&model, p, h), &batch, &cfg).unwrap();
            let minus =
                flow::regcfm_loss_breakdown(&perturbed(&model, p, -h), &batch, &cfg).unwrap();
            for (term, analytic, lo, hi) in [
                ("fm", model.network().grad_entry(&grads.fm, p), minus.fm, plus.fm),
                (
                    "smooth",
                    model.network().grad_entry(&grads.smooth, p),
                    minus.smooth,
                    plus.smooth,
                ),
                (
                    "safe",
                    model.network().grad_entry(&grads.safe, p),
                    minus.safe,
                    plus.safe,
                ),
            ] {
                let fd = (hi - lo) / (2.0 * h);
                let scale = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / scale <= 1e-4,
                    "model {model_idx} param {p} term {term}: fd {fd:.9e} vs analytic {analytic:.9e}"
                );
            }
        }
    }

    pass(5, "loss gradients", started, 30.0);
}

// ---------------------------------------------------------------------------
// Criterion 6: Euler integrator convergence
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_euler_convergence() {
    let _g = gate();
    let started = Instant::now();

    // v = -tau decays every movable waypoint toward the origin with exact
    // solution x e^{-1} at t=1; frozen waypoints are detected by a probe run.
    let decay = FnFlow(|state: &[f64], _t: f64, _ctx: &[f64]| state.iter().map(|x| -x).collect());
    let tau0 = Trajectory::new(
        (0..8)
            .map(|i| pt(1.0 + 0.35 * i as f64, 2.0 - 0.2 * i as f64))
            .collect(),
    )
    .unwrap();
    let probe = flow::refine(&decay, &tau0, &[], 1).unwrap();
    let moved: Vec<bool> = probe
        .points()
        .iter()
        .zip(tau0.points())
        .map(|(a, b)| (a - b).norm() > 0.0)
        .collect();
    assert!(
        moved.iter().any(|&m| m) && moved.iter().any(|&m| !m),
        "expected both pinned and movable waypoints"
    );

    let error_at = |n: usize| -> f64 {
        let refined = flow::refine(&decay, &tau0, &[], n).unwrap();
        refined
            .points()
            .iter()
            .zip(tau0.points())
            .zip(&moved)
            .map(|((got, start), &m)| {
                let want = if m { start * (-1.0f64).exp() } else { *start };
                (got - want).norm()
            })
            .fold(0.0, f64::max)
    };

    let errors: Vec<f64> = [4usize, 8, 16, 32].iter().map(|&n| error_at(n)).collect();
    for (i, pair) in errors.windows(2).enumerate() {
        let ratio = pair[0] / pair[1];
        assert!(
            (1.6..=2.4).contains(&ratio),
            "halving the step changed the error by x{ratio:.3} at stage {i} (errors {errors:?})"
        );
    }

    pass(6, "Euler integrator convergence", started, 10.0);
}

// ---------------------------------------------------------------------------
// Criterion 7: metrics formulas
// ---------------------------------------------------------------------------

fn episode(success: bool, shortest: f64, executed: f64) -> EpisodeResult {
    let spl = if success {
        shortest / shortest.max(executed)
    } else {
        0.0
    };
    EpisodeResult {
        success,
        executed_length: executed,
        shortest_length: shortest,
        collided: false,
        steps_taken: 1,
        terminal_distance: 0.0,
        spl,
        minimum_snap: 0.0,
        trajectory: Trajectory::new(vec![pt(0.0, 0.0), pt(1.0, 0.0)]).unwrap(),
    }
}

#[test]
fn criterion_7_metrics_formulas() {
    let _g = gate();
    let started = Instant::now();

    // SPL hand cases are exact.
    assert_eq!(metrics::spl(&[episode(true, 8.0, 10.0)]).unwrap(), 0.8);
    assert_eq!(metrics::spl(&[episode(false, 8.0, 10.0)]).unwrap(), 0.0);
    assert_eq!(metrics::spl(&[episode(true, 10.0, 10.0)]).unwrap(), 1.0);
    // Executed below the lower bound L clamps to max(P, L) = L.
    assert_eq!(metrics::spl(&[episode(true, 10.0, 6.0)]).unwrap(), 1.0);
    let mixed = metrics::spl(&[
        episode(true, 8.0, 10.0),
        episode(false, 8.0, 10.0),
        episode(true, 10.0, 10.0),
        episode(true, 5.0, 20.0),
    ])
    .unwrap();
    assert!((mixed - (0.8 + 0.0 + 1.0 + 0.25) / 4.0).abs() <= 1e-15);

    // Snap of a cubic vanishes.
    let n = 33;
    let dt = 1.0 / (n as f64 - 1.0);
    let cubic = Trajectory::new(
        (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                pt(t * t * t - 2.0 * t * t + 3.0 * t, 2.0 * t * t * t + 0.5 * t)
            })
            .collect(),
    )
    .unwrap();
    let ms = metrics::minimum_snap(&cubic, dt).unwrap();
    assert!(ms <= 1e-9, "cubic snap {ms:.3e}");

    // x(t) = t^4 on [0, 1] has constant snap 24, so the metric integrates to
    // 24^2 = 576 over unit duration.
    let quartic = Trajectory::new(
        (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                pt(t * t * t * t, 0.0)
            })
            .collect(),
    )
    .unwrap();
    let ms = metrics::minimum_snap(&quartic, dt).unwrap();
    assert!(
        (ms - 576.0).abs() <= 5.76,
        "quartic snap {ms} is not within 1% of 576"
    );

    pass(7, "metrics formulas", started, 10.0);
}

// ---------------------------------------------------------------------------
// Criterion 8: benchmark trend directions
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_benchmark_trends() {
    let _g = gate();
    let started = Instant::now();
    let cfg = PipelineConfig::default();
    assert_eq!(cfg.scenario_kinds.len() * cfg.seeds_per_kind, 120);

    let artifacts = build_artifacts(&cfg).unwrap();
    let report = |mode: AblationMode, steps: usize| {
        let (model, _) = train_mode(&cfg, mode, &artifacts).unwrap();
        (
            model.clone(),
            evaluate_mode(&cfg, mode, &model, &artifacts, steps).unwrap(),
        )
    };

    let (full_model, full) = report(AblationMode::Full, cfg.refine_steps);
    let (gauss_model, gauss) = report(AblationMode::GaussianPrior, cfg.refine_steps);
    let (_, peaks) = report(AblationMode::PeaksPrior, cfg.refine_steps);
    let (_, no_smooth) = report(AblationMode::NoSmooth, cfg.refine_steps);
    let (_, no_safe) = report(AblationMode::NoSafe, cfg.refine_steps);
    println!(
        "  full SR {:.1} SPL {:.3} coll {:.1} MS {:.4} | gaussian SR {:.1} | peaks SR {:.1} | \
         no-smooth MS {:.4} | no-safe coll {:.1}",
        full.sr,
        full.spl,
        full.collision_rate,
        full.ms,
        gauss.sr,
        peaks.sr,
        no_smooth.ms,
        no_safe.collision_rate
    );

    assert!(
        full.sr >= gauss.sr + 10.0,
        "full SR {:.1} does not exceed gaussian-prior SR {:.1} by 10 points",
        full.sr,
        gauss.sr
    );
    assert!(
        full.sr > peaks.sr,
        "full SR {:.1} does not exceed peaks-prior SR {:.1}",
        full.sr,
        peaks.sr
    );
    assert!(
        full.ms < no_smooth.ms,
        "full MS {:.4} is not below no-smooth MS {:.4}",
        full.ms,
        no_smooth.ms
    );
    assert!(
        full.collision_rate <= no_safe.collision_rate,
        "full collisions {:.1} exceed no-safe collisions {:.1}",
        full.collision_rate,
        no_safe.collision_rate
    );

    // Refinement-step sweeps: the learned flow converges within five steps;
    // the noise prior does not converge by two.
    let full_at = |n: usize| {
        evaluate_mode(&cfg, AblationMode::Full, &full_model, &artifacts, n)
            .unwrap()
            .sr
    };
    let gauss_at = |n: usize| {
        evaluate_mode(&cfg, AblationMode::GaussianPrior, &gauss_model, &artifacts, n)
            .unwrap()
            .sr
    };
    let (sr5, sr10) = (full_at(5), full_at(10));
    println!("  full SR(5) {sr5:.1} SR(10) {sr10:.1}");
    assert!(
        (sr5 - sr10).abs() <= 2.0,
        "full SR at five steps ({sr5:.1}) is not within 2 points of ten ({sr10:.1})"
    );
    let (g2, g10) = (gauss_at(2), gauss_at(10));
    println!("  gaussian SR(2) {g2:.1} SR(10) {g10:.1}");
    assert!(
        g2 < g10,
        "gaussian-prior SR at two steps ({g2:.1}) is not below ten ({g10:.1})"
    );

    // Single-step refinement of the noise prior on clutter: strictly more
    // collisions than the full pipeline, paired over 100 episodes.
    let clutter_cfg = PipelineConfig {
        scenario_kinds: vec![ScenarioKind::Clutter],
        seeds_per_kind: 100,
        ..cfg.clone()
    };
    let clutter_artifacts = build_artifacts(&clutter_cfg).unwrap();
    let (model_full, _) = train_mode(&clutter_cfg, AblationMode::Full, &clutter_artifacts).unwrap();
    let (model_gauss, _) =
        train_mode(&clutter_cfg, AblationMode::GaussianPrior, &clutter_artifacts).unwrap();
    let full_coll = evaluate_mode(
        &clutter_cfg,
        AblationMode::Full,
        &model_full,
        &clutter_artifacts,
        clutter_cfg.refine_steps,
    )
    .unwrap()
    .collision_rate;
    let gauss_coll = evaluate_mode(
        &clutter_cfg,
        AblationMode::GaussianPrior,
        &model_gauss,
        &clutter_artifacts,
        1,
    )
    .unwrap()
    .collision_rate;
    println!("  clutter collisions: full {full_coll:.1} vs gaussian N=1 {gauss_coll:.1}");
    assert!(
        gauss_coll > full_coll,
        "gaussian N=1 collisions {gauss_coll:.1} are not above full {full_coll:.1}"
    );

    pass(8, "benchmark trend directions", started, 600.0);
}

// ---------------------------------------------------------------------------
// Criterion 9: CLI determinism
// ---------------------------------------------------------------------------

fn run_cli(config: &std::path::Path, out_dir: &std::path::Path, args: &[&str]) {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_fieldnav"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("spawn CLI");
    assert!(status.success(), "fieldnav {args:?} failed");
}

fn file_tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn criterion_9_cli_determinism() {
    let _g = gate();
    let started = Instant::now();

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.toml");
    std::fs::write(
        &config,
        r#"
master_seed = 9
scenario_kinds = ["t-junction", "clutter"]
seeds_per_kind = 2
width = 20
height = 20
demos_per_scenario = 4
pairs_per_scenario = 2
refine_steps = 5
sweep_steps = [1, 2]

[prior]
k_paths = 6
m_components = 2

[train]
steps = 200
batch_size = 8
hidden_width = 16
hidden_layers = 2
"#,
    )
    .unwrap();

    let stages: &[&[&str]] = &[
        &["gen-scenarios"],
        &["solve-field"],
        &["extract-priors"],
        &["train-flow"],
        &["refine"],
        &["evaluate"],
        &["sweep-steps"],
        &["ablate"],
    ];
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        for stage in stages {
            run_cli(&config, out, stage);
        }
    }

    let (tree_a, tree_b) = (file_tree(&out_a), file_tree(&out_b));
    assert!(
        tree_a.len() > 20,
        "expected a full artifact tree, found {} files",
        tree_a.len()
    );
    assert_eq!(
        tree_a.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        tree_b.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "the two runs produced different file sets"
    );
    for ((name, bytes_a), (_, bytes_b)) in tree_a.iter().zip(&tree_b) {
        assert!(
            bytes_a == bytes_b,
            "{name} differs between identical invocations"
        );
    }

    pass(9, "CLI determinism", started, 300.0);
}

// ---------------------------------------------------------------------------
// CLI error behavior (not a numbered criterion)
// ---------------------------------------------------------------------------

#[test]
fn cli_rejects_invalid_input_with_nonzero_exit() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();

    let missing = std::process::Command::new(env!("CARGO_BIN_EXE_fieldnav"))
        .args(["--config", "/nonexistent/config.toml", "gen-scenarios"])
        .current_dir(dir.path())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(!missing.success(), "missing config must fail");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "width = 4\n").unwrap();
    let invalid = std::process::Command::new(env!("CARGO_BIN_EXE_fieldnav"))
        .arg("--config")
        .arg(&bad)
        .arg("gen-scenarios")
        .current_dir(dir.path())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(!invalid.success(), "invalid config must fail");

    let zero_steps = std::process::Command::new(env!("CARGO_BIN_EXE_fieldnav"))
        .args(["refine", "--n-steps", "0"])
        .current_dir(dir.path())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(!zero_steps.success(), "zero refinement steps must fail");
}
