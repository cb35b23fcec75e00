//! Velocity-field refinement of prior trajectories.
//!
//! A small dense network `v(tau, t, z)` is trained so that, along the linear
//! interpolant between a prior sample `tau0` and an expert target `tau1`, its
//! output matches the constant displacement `tau1 - tau0`. The regression
//! loss is augmented with a third-difference jerk penalty and a log-barrier
//! clearance penalty, both evaluated by default at the one-step endpoint
//! prediction `tau_t + (1 - t) v` so that their gradients reach the network
//! (evaluating them at the interpolant itself is available behind
//! [`RegularizerEval::Interpolant`]; there they are constants with respect to
//! the parameters and only rescale the reported loss). Inference integrates
//! the learned field with explicit Euler steps, re-pinning the endpoints
//! after every step.

mod net;
mod train;

pub use net::{Dense, ForwardCache, Gradients, Mlp};
pub use train::{train, Optimizer};

use crate::error::{Error, Result};
use crate::trajectory::{Point2, Trajectory};
use crate::world::DistanceField;
use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Clamp floor for the barrier argument: terms with `d - epsilon` at or
/// below this contribute the constant `-ln(D_FLOOR)` and a zero gradient.
pub const D_FLOOR: f64 = 1e-4;

/// Where the jerk and clearance regularizers are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerEval {
    /// At the endpoint prediction `tau_t + (1 - t) v` (endpoints re-pinned),
    /// so the regularizers steer the parameters.
    #[default]
    Prediction,
    /// At the interpolant `tau_t` itself; parameter-independent.
    Interpolant,
}

/// Training hyperparameters and network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Jerk-penalty weight.
    pub rho: f64,
    /// Barrier-penalty weight.
    pub kappa: f64,
    /// Clearance margin in meters.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub regularizer_eval: RegularizerEval,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Sinusoidal time features: `sin/cos(2^i * pi * t)` for `i < count`.
    pub time_frequencies: usize,
    /// Positions are divided by this before entering the network.
    pub pos_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            kappa: 0.01,
            epsilon: 0.15,
            learning_rate: 2e-3,
            batch_size: 32,
            steps: 12000,
            seed: 0,
            optimizer: Optimizer::Adam,
            regularizer_eval: RegularizerEval::Prediction,
            hidden_width: 64,
            hidden_layers: 3,
            time_frequencies: 4,
            pos_scale: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            (self.rho, "rho"),
            (self.kappa, "kappa"),
            (self.epsilon, "epsilon"),
        ];
        for (v, name) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::invalid("batch size and steps must be positive"));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::invalid("network needs at least one hidden unit"));
        }
        if !(self.pos_scale.is_finite() && self.pos_scale > 0.0) {
            return Err(Error::invalid("pos_scale must be positive"));
        }
        Ok(())
    }
}

/// Anything that maps (flattened waypoints, time, context) to a velocity of
/// the same dimension as the waypoints.
pub trait FlowField {
    fn velocity(&self, state: &[f64], t: f64, context: &[f64]) -> Vec<f64>;
}

/// Adapter so tests can use closures as flow fields.
pub struct FnFlow<F: Fn(&[f64], f64, &[f64]) -> Vec<f64>>(pub F);

impl<F: Fn(&[f64], f64, &[f64]) -> Vec<f64>> FlowField for FnFlow<F> {
    fn velocity(&self, state: &[f64], t: f64, context: &[f64]) -> Vec<f64> {
        (self.0)(state, t, context)
    }
}

/// The trained velocity network together with its input conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub(crate) net: Mlp,
    k_waypoints: usize,
    context_dim: usize,
    time_frequencies: usize,
    pos_scale: f64,
}

impl FlowModel {
    pub fn new(
        k_waypoints: usize,
        context_dim: usize,
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if k_waypoints < 2 {
            return Err(Error::invalid("flow model needs at least 2 waypoints"));
        }
        let input = 2 * k_waypoints + 2 * cfg.time_frequencies + context_dim;
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(cfg.hidden_width).take(cfg.hidden_layers));
        dims.push(2 * k_waypoints);
        Ok(Self {
            net: Mlp::new(&dims, rng)?,
            k_waypoints,
            context_dim,
            time_frequencies: cfg.time_frequencies,
            pos_scale: cfg.pos_scale,
        })
    }

    /// Rebuilds a model from checkpoint parts, validating the layer chain
    /// against the declared input conventions.
    pub fn from_parts(
        k_waypoints: usize,
        context_dim: usize,
        time_frequencies: usize,
        pos_scale: f64,
        layers: Vec<Dense>,
    ) -> Result<Self> {
        if k_waypoints < 2 {
            return Err(Error::invalid("flow model needs at least 2 waypoints"));
        }
        if !(pos_scale.is_finite() && pos_scale > 0.0) {
            return Err(Error::invalid("pos_scale must be positive"));
        }
        let net = Mlp::from_layers(layers)?;
        let expect_in = 2 * k_waypoints + 2 * time_frequencies + context_dim;
        if net.input_dim() != expect_in || net.output_dim() != 2 * k_waypoints {
            return Err(Error::invalid("checkpoint layer dims do not match header"));
        }
        Ok(Self {
            net,
            k_waypoints,
            context_dim,
            time_frequencies,
            pos_scale,
        })
    }

    pub fn k_waypoints(&self) -> usize {
        self.k_waypoints
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn time_frequencies(&self) -> usize {
        self.time_frequencies
    }

    pub fn pos_scale(&self) -> f64 {
        self.pos_scale
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    fn embed(&self, state: &[f64], t: f64, context: &[f64]) -> DVector<f64> {
        assert_eq!(state.len(), 2 * self.k_waypoints, "state dimension");
        assert_eq!(context.len(), self.context_dim, "context dimension");
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend(state.iter().map(|v| v / self.pos_scale));
        for i in 0..self.time_frequencies {
            let w = std::f64::consts::PI * (1u64 << i) as f64;
            input.push((w * t).sin());
            input.push((w * t).cos());
        }
        input.extend_from_slice(context);
        DVector::from_vec(input)
    }
}

impl FlowField for FlowModel {
    fn velocity(&self, state: &[f64], t: f64, context: &[f64]) -> Vec<f64> {
        self.net
            .forward(&self.embed(state, t, context))
            .as_slice()
            .to_vec()
    }
}

/// One scenario-derived training pair; `tau0` is a draw from the prior,
/// `tau1` the expert target it is coupled with.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tau0: Trajectory,
    pub tau1: Trajectory,
    pub context: Vec<f64>,
    pub distances: Arc<DistanceField>,
}

/// One loss-evaluation element (an example with its interpolation time).
pub struct BatchItem<'a> {
    pub tau0: &'a Trajectory,
    pub tau1: &'a Trajectory,
    pub t: f64,
    pub context: &'a [f64],
    pub distances: &'a DistanceField,
}

/// `x_k` flattened to `[x0, y0, x1, y1, ...]`.
pub fn flatten_waypoints(tau: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * tau.len());
    for p in tau.points() {
        out.push(p.x);
        out.push(p.y);
    }
    out
}

/// Linear interpolant at `t`: position `(1-t) tau0 + t tau1` and the constant
/// target velocity `tau1 - tau0` per waypoint.
pub fn interpolant(
    tau0: &Trajectory,
    tau1: &Trajectory,
    t: f64,
) -> Result<(Trajectory, Vec<Point2>)> {
    if tau0.len() != tau1.len() {
        return Err(Error::invalid("interpolant endpoints differ in waypoints"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("interpolation time must lie in [0, 1]"));
    }
    let pts = tau0
        .points()
        .iter()
        .zip(tau1.points())
        .map(|(a, b)| a * (1.0 - t) + b * t)
        .collect();
    let u = tau1
        .points()
        .iter()
        .zip(tau0.points())
        .map(|(b, a)| b - a)
        .collect();
    Ok((Trajectory::new(pts)?, u))
}

/// Jerk proxy: sum over third-difference stencils of
/// `||x_{k+3} - 3 x_{k+2} + 3 x_{k+1} - x_k||^2`.
pub fn smooth_loss(tau: &Trajectory) -> Result<f64> {
    let pts = tau.points();
    if pts.len() < 4 {
        return Err(Error::invalid("jerk penalty needs at least 4 waypoints"));
    }
    let mut acc = 0.0;
    for k in 0..pts.len() - 3 {
        let d = pts[k + 3] - pts[k + 2] * 3.0 + pts[k + 1] * 3.0 - pts[k];
        acc += d.norm_squared();
    }
    Ok(acc)
}

fn smooth_gradient(pts: &[Point2]) -> Vec<Point2> {
    let mut g = vec![Point2::zeros(); pts.len()];
    for k in 0..pts.len() - 3 {
        let d = pts[k + 3] - pts[k + 2] * 3.0 + pts[k + 1] * 3.0 - pts[k];
        g[k] -= d * 2.0;
        g[k + 1] += d * 6.0;
        g[k + 2] -= d * 6.0;
        g[k + 3] += d * 2.0;
    }
    g
}

/// Log-barrier clearance penalty `-sum_k ln(max(d(x_k) - epsilon, D_FLOOR))`
/// over all waypoints; always finite thanks to the floor.
pub fn safe_loss(tau: &Trajectory, distances: &DistanceField, epsilon: f64) -> f64 {
    tau.points()
        .iter()
        .map(|p| -((distances.query_clamped(*p) - epsilon).max(D_FLOOR)).ln())
        .sum()
}

fn safe_gradient(pts: &[Point2], distances: &DistanceField, epsilon: f64) -> Vec<Point2> {
    pts.iter()
        .map(|p| {
            let margin = distances.query_clamped(*p) - epsilon;
            if margin > D_FLOOR {
                -distances.gradient_clamped(*p) / margin
            } else {
                // Inside the clamp region the term is the constant
                // -ln(D_FLOOR); its gradient is zero.
                Point2::zeros()
            }
        })
        .collect()
}

/// The three loss terms and the weighted total
/// `fm + rho * smooth + kappa * safe` (each a batch mean).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub fm: f64,
    pub smooth: f64,
    pub safe: f64,
    pub total: f64,
}

/// Per-term parameter gradients (unweighted by rho/kappa).
pub struct TermGradients {
    pub fm: Gradients,
    pub smooth: Gradients,
    pub safe: Gradients,
}

struct ItemEval {
    fm: f64,
    smooth: f64,
    safe: f64,
    /// dL/d(network output) per term, when gradients were requested.
    dv: Option<(DVector<f64>, DVector<f64>, DVector<f64>)>,
    cache: Option<ForwardCache>,
}

fn eval_item(
    model: &FlowModel,
    item: &BatchItem<'_>,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<ItemEval> {
    let (tau_t, u) = interpolant(item.tau0, item.tau1, item.t)?;
    let state = flatten_waypoints(&tau_t);
    let embedded = model.embed(&state, item.t, item.context);
    let cache = model.net.forward_cached(&embedded);
    let v = cache.output();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("flow velocity"));
    }
    let k = tau_t.len();

    // Flow-matching residual over interior waypoints only; endpoints are
    // pinned by construction and excluded from the regression target.
    let mut fm = 0.0;
    for wp in 1..k - 1 {
        let dx = v[2 * wp] - u[wp].x;
        let dy = v[2 * wp + 1] - u[wp].y;
        fm += dx * dx + dy * dy;
    }

    // Regularizer evaluation point.
    let coef = match cfg.regularizer_eval {
        RegularizerEval::Prediction => 1.0 - item.t,
        RegularizerEval::Interpolant => 0.0,
    };
    let mut xpts: Vec<Point2> = tau_t.points().to_vec();
    for wp in 1..k - 1 {
        xpts[wp].x += coef * v[2 * wp];
        xpts[wp].y += coef * v[2 * wp + 1];
    }
    if xpts.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::NonFinite("regularizer evaluation point"));
    }
    let xtraj = Trajectory::new(xpts.clone())?;
    let smooth = smooth_loss(&xtraj)?;
    let safe = safe_loss(&xtraj, item.distances, cfg.epsilon);

    let dv = if with_grads {
        let n = 2 * k;
        let mut dfm = DVector::zeros(n);
        for wp in 1..k - 1 {
            dfm[2 * wp] = 2.0 * (v[2 * wp] - u[wp].x);
            dfm[2 * wp + 1] = 2.0 * (v[2 * wp + 1] - u[wp].y);
        }
        let gs = smooth_gradient(&xpts);
        let gb = safe_gradient(&xpts, item.distances, cfg.epsilon);
        let mut dsmooth = DVector::zeros(n);
        let mut dsafe = DVector::zeros(n);
        for wp in 1..k - 1 {
            dsmooth[2 * wp] = coef * gs[wp].x;
            dsmooth[2 * wp + 1] = coef * gs[wp].y;
            dsafe[2 * wp] = coef * gb[wp].x;
            dsafe[2 * wp + 1] = coef * gb[wp].y;
        }
        Some((dfm, dsmooth, dsafe))
    } else {
        None
    };
    Ok(ItemEval {
        fm,
        smooth,
        safe,
        dv,
        cache: with_grads.then_some(cache),
    })
}

fn breakdown_from_sums(sums: (f64, f64, f64), n: f64, cfg: &TrainConfig) -> LossBreakdown {
    let (fm, smooth, safe) = (sums.0 / n, sums.1 / n, sums.2 / n);
    LossBreakdown {
        fm,
        smooth,
        safe,
        total: fm + cfg.rho * smooth + cfg.kappa * safe,
    }
}

/// Mean loss terms over a batch.
pub fn regcfm_loss_breakdown(
    model: &FlowModel,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    let mut sums = (0.0, 0.0, 0.0);
    for item in batch {
        let e = eval_item(model, item, cfg, false)?;
        sums.0 += e.fm;
        sums.1 += e.smooth;
        sums.2 += e.safe;
    }
    Ok(breakdown_from_sums(sums, batch.len() as f64, cfg))
}

/// Total regularized flow-matching loss (the quantity minimized in training).
pub fn regcfm_loss(
    model: &FlowModel,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
) -> Result<f64> {
    regcfm_loss_breakdown(model, batch, cfg).map(|b| b.total)
}

/// Per-term parameter gradients (each term's own gradient, before weighting
/// by rho/kappa), used by the finite-difference checks.
pub fn regcfm_term_gradients(
    model: &FlowModel,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, TermGradients)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    let n = batch.len() as f64;
    let mut grads = TermGradients {
        fm: model.net.zero_gradients(),
        smooth: model.net.zero_gradients(),
        safe: model.net.zero_gradients(),
    };
    let mut sums = (0.0, 0.0, 0.0);
    for item in batch {
        let e = eval_item(model, item, cfg, true)?;
        sums.0 += e.fm;
        sums.1 += e.smooth;
        sums.2 += e.safe;
        let (dfm, dsmooth, dsafe) = e.dv.unwrap();
        let cache = e.cache.unwrap();
        model.net.backward(&cache, &(dfm / n), &mut grads.fm);
        model.net.backward(&cache, &(dsmooth / n), &mut grads.smooth);
        model.net.backward(&cache, &(dsafe / n), &mut grads.safe);
    }
    Ok((breakdown_from_sums(sums, n, cfg), grads))
}

/// Gradient of the weighted total loss in a single backward pass per item
/// (the training hot path).
pub fn regcfm_gradients(
    model: &FlowModel,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    let n = batch.len() as f64;
    let mut grads = model.net.zero_gradients();
    let mut sums = (0.0, 0.0, 0.0);
    for item in batch {
        let e = eval_item(model, item, cfg, true)?;
        sums.0 += e.fm;
        sums.1 += e.smooth;
        sums.2 += e.safe;
        let (dfm, dsmooth, dsafe) = e.dv.unwrap();
        let combined = (dfm + dsmooth * cfg.rho + dsafe * cfg.kappa) / n;
        model.net.backward(&e.cache.unwrap(), &combined, &mut grads);
    }
    Ok((breakdown_from_sums(sums, n, cfg), grads))
}

/// Integrates the flow with `n_steps` explicit Euler steps of size
/// `1/n_steps` from `tau0`, updating interior waypoints only so the endpoints
/// stay pinned throughout.
pub fn refine(
    field: &impl FlowField,
    tau0: &Trajectory,
    context: &[f64],
    n_steps: usize,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::invalid("refinement needs at least one step"));
    }
    let mut state = flatten_waypoints(tau0);
    let dt = 1.0 / n_steps as f64;
    for step in 0..n_steps {
        let t = step as f64 * dt;
        let v = field.velocity(&state, t, context);
        if v.len() != state.len() {
            return Err(Error::invalid("flow velocity dimension mismatch"));
        }
        for i in 2..state.len() - 2 {
            state[i] += dt * v[i];
            if !state[i].is_finite() {
                return Err(Error::NonFinite("refined trajectory"));
            }
        }
    }
    Trajectory::new(
        state
            .chunks_exact(2)
            .map(|c| Point2::new(c[0], c[1]))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn line(a: Point2, b: Point2, k: usize) -> Trajectory {
        let pts = (0..k)
            .map(|i| a + (b - a) * (i as f64 / (k - 1) as f64))
            .collect();
        Trajectory::new(pts).unwrap()
    }

    /// Distance field sampling a globally bilinear function, so the
    /// interpolated clearance (and its gradient) is smooth everywhere —
    /// finite-difference checks then probe only the backprop chain, not the
    /// interpolation kinks at cell boundaries.
    fn smooth_distance_field() -> DistanceField {
        let (w, h, res) = (32, 32, 0.1);
        let mut values = Vec::with_capacity(w * h);
        for iy in 0..h {
            for ix in 0..w {
                let x = (ix as f64 + 0.5) * res;
                let y = (iy as f64 + 0.5) * res;
                values.push(0.8 + 0.05 * x + 0.08 * y + 0.02 * x * y);
            }
        }
        DistanceField::from_values(w, h, res, values).unwrap()
    }

    fn tiny_model(k: usize, d: usize, seed: u64) -> (FlowModel, TrainConfig) {
        let cfg = TrainConfig {
            hidden_width: 8,
            hidden_layers: 2,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (FlowModel::new(k, d, &cfg, &mut rng).unwrap(), cfg)
    }

    fn random_traj(k: usize, rng: &mut ChaCha8Rng) -> Trajectory {
        let pts = (0..k)
            .map(|_| pt(rng.gen_range(0.8..2.4), rng.gen_range(0.8..2.4)))
            .collect();
        Trajectory::new(pts).unwrap()
    }

    #[test]
    fn interpolant_hits_both_endpoints() {
        let a = line(pt(0.0, 0.0), pt(1.0, 0.0), 5);
        let b = line(pt(0.0, 1.0), pt(1.0, 1.0), 5);
        let (t0, u0) = interpolant(&a, &b, 0.0).unwrap();
        assert_eq!(t0, a);
        for (u, (pa, pb)) in u0.iter().zip(a.points().iter().zip(b.points())) {
            assert_relative_eq!((u - (pb - pa)).norm(), 0.0);
        }
        let (t1, _) = interpolant(&a, &b, 1.0).unwrap();
        assert_eq!(t1, b);
    }

    #[test]
    fn interpolant_of_identical_endpoints_is_constant() {
        let a = line(pt(0.0, 0.0), pt(1.0, 1.0), 6);
        for t in [0.0, 0.3, 0.77, 1.0] {
            let (tau_t, u) = interpolant(&a, &a, t).unwrap();
            for (got, want) in tau_t.points().iter().zip(a.points().iter()) {
                assert!((got - want).norm() <= 1e-15, "t={t}: {got:?} vs {want:?}");
            }
            assert!(u.iter().all(|v| v.norm() == 0.0));
        }
    }

    #[test]
    fn interpolant_rejects_mismatched_and_out_of_range() {
        let a = line(pt(0.0, 0.0), pt(1.0, 0.0), 5);
        let b = line(pt(0.0, 1.0), pt(1.0, 1.0), 6);
        assert!(interpolant(&a, &b, 0.5).is_err());
        assert!(interpolant(&a, &a, 1.5).is_err());
        assert!(interpolant(&a, &a, -0.1).is_err());
    }

    #[test]
    fn smooth_loss_vanishes_on_affine_waypoints() {
        let tau = line(pt(0.2, 0.1), pt(3.0, 2.2), 16);
        assert!(smooth_loss(&tau).unwrap() <= 1e-24);
    }

    #[test]
    fn smooth_loss_of_cubic_single_stencil_is_36() {
        // x_k = k^3 on one axis: third difference = 3! = 6, squared = 36.
        let tau = Trajectory::new(vec![pt(0.0, 0.0), pt(1.0, 0.0), pt(8.0, 0.0), pt(27.0, 0.0)])
            .unwrap();
        assert_relative_eq!(smooth_loss(&tau).unwrap(), 36.0, epsilon = 1e-12);
    }

    #[test]
    fn smooth_loss_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tau = random_traj(16, &mut rng);
        let pts = tau.points();
        // Independent summation: per stencil, per axis, recompute from
        // scalars rather than vectors.
        let mut oracle = 0.0;
        for k in 0..pts.len() - 3 {
            for axis in 0..2 {
                let c = |i: usize| if axis == 0 { pts[i].x } else { pts[i].y };
                let d = c(k + 3) - 3.0 * c(k + 2) + 3.0 * c(k + 1) - c(k);
                oracle += d * d;
            }
        }
        assert_relative_eq!(smooth_loss(&tau).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn smooth_loss_needs_four_waypoints() {
        let tau = Trajectory::new(vec![pt(0.0, 0.0), pt(1.0, 0.0), pt(2.0, 0.0)]).unwrap();
        assert!(smooth_loss(&tau).is_err());
    }

    #[test]
    fn safe_loss_is_zero_at_unit_margin() {
        // Constant d = 1 + epsilon -> every term ln(1) = 0.
        let eps = 0.15;
        let d = DistanceField::from_values(8, 8, 0.1, vec![1.0 + eps; 64]).unwrap();
        let tau = line(pt(0.1, 0.1), pt(0.7, 0.7), 7);
        assert_relative_eq!(safe_loss(&tau, &d, eps), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn safe_loss_clamps_at_the_margin() {
        // d == epsilon everywhere: every waypoint sits exactly at the margin,
        // contributing the clamp value -ln(D_FLOOR).
        let eps = 0.15;
        let d = DistanceField::from_values(8, 8, 0.1, vec![eps; 64]).unwrap();
        let tau = line(pt(0.1, 0.1), pt(0.7, 0.7), 5);
        assert_relative_eq!(
            safe_loss(&tau, &d, eps),
            5.0 * -(D_FLOOR.ln()),
            epsilon = 1e-9
        );
    }

    #[test]
    fn safe_loss_decreases_with_clearance() {
        // d grows linearly along x; slide a single-segment trajectory to the
        // right and the barrier must strictly decrease once past the clamp.
        let (w, h, res) = (64, 4, 0.1);
        let mut values = Vec::new();
        for _ in 0..h {
            for ix in 0..w {
                values.push((ix as f64 + 0.5) * res);
            }
        }
        let d = DistanceField::from_values(w, h, res, values).unwrap();
        let eps = 0.15;
        let mut last = f64::INFINITY;
        for i in 0..40 {
            let x = 0.3 + 0.1 * i as f64;
            let tau = Trajectory::new(vec![pt(x, 0.2), pt(x, 0.3)]).unwrap();
            let loss = safe_loss(&tau, &d, eps);
            assert!(loss < last, "loss must fall as clearance grows (step {i})");
            last = loss;
        }
    }

    #[test]
    fn loss_is_zero_for_exact_flow_with_no_regularizers() {
        // tau0 = tau1 makes the target velocity zero; zeroing the output
        // layer makes the model output exactly zero: perfect match.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut model, mut cfg) = tiny_model(6, 3, 11);
        model.net.zero_output_layer();
        cfg.rho = 0.0;
        cfg.kappa = 0.0;
        let d = smooth_distance_field();
        let tau = random_traj(6, &mut rng);
        let ctx = vec![0.1, -0.2, 0.4];
        let batch = [BatchItem {
            tau0: &tau,
            tau1: &tau,
            t: 0.37,
            context: &ctx,
            distances: &d,
        }];
        assert_eq!(regcfm_loss(&model, &batch, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn loss_decomposes_into_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (model, mut cfg) = tiny_model(6, 3, 12);
        cfg.rho = 0.37;
        cfg.kappa = 0.021;
        let d = smooth_distance_field();
        let tau0s: Vec<Trajectory> = (0..3).map(|_| random_traj(6, &mut rng)).collect();
        let tau1s: Vec<Trajectory> = (0..3).map(|_| random_traj(6, &mut rng)).collect();
        let ctx = vec![0.3, 0.2, -0.5];
        let batch: Vec<BatchItem> = tau0s
            .iter()
            .zip(&tau1s)
            .enumerate()
            .map(|(i, (a, b))| BatchItem {
                tau0: a,
                tau1: b,
                t: 0.2 + 0.25 * i as f64,
                context: &ctx,
                distances: &d,
            })
            .collect();
        let b = regcfm_loss_breakdown(&model, &batch, &cfg).unwrap();
        assert!((b.total - (b.fm + cfg.rho * b.smooth + cfg.kappa * b.safe)).abs() <= 1e-12);
        // rho = kappa = 0 reduces to the bare flow-matching term.
        let bare = TrainConfig {
            rho: 0.0,
            kappa: 0.0,
            ..cfg.clone()
        };
        assert_eq!(regcfm_loss(&model, &batch, &bare).unwrap(), b.fm);
    }

    #[test]
    fn term_gradients_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut model, cfg) = tiny_model(6, 3, 13);
        // Shrink the output layer so prediction-point shifts stay well inside
        // the smooth test field.
        for idx in 0..model.net.param_count() {
            *model.net.param_mut(idx) *= 0.2;
        }
        let d = smooth_distance_field();
        let tau0s: Vec<Trajectory> = (0..3).map(|_| random_traj(6, &mut rng)).collect();
        let tau1s: Vec<Trajectory> = (0..3).map(|_| random_traj(6, &mut rng)).collect();
        let ctx = vec![0.3, 0.2, -0.5];
        let ts = [0.25, 0.5, 0.75];
        let eval = |model: &FlowModel| -> LossBreakdown {
            let batch: Vec<BatchItem> = tau0s
                .iter()
                .zip(&tau1s)
                .zip(ts)
                .map(|((a, b), t)| BatchItem {
                    tau0: a,
                    tau1: b,
                    t,
                    context: &ctx,
                    distances: &d,
                })
                .collect();
            regcfm_loss_breakdown(model, &batch, &cfg).unwrap()
        };
        let batch: Vec<BatchItem> = tau0s
            .iter()
            .zip(&tau1s)
            .zip(ts)
            .map(|((a, b), t)| BatchItem {
                tau0: a,
                tau1: b,
                t,
                context: &ctx,
                distances: &d,
            })
            .collect();
        let (_, grads) = regcfm_term_gradients(&model, &batch, &cfg).unwrap();
        let h = 1e-5;
        for idx in 0..model.net.param_count() {
            let orig = model.net.param(idx);
            *model.net.param_mut(idx) = orig + h;
            let plus = eval(&model);
            *model.net.param_mut(idx) = orig - h;
            let minus = eval(&model);
            *model.net.param_mut(idx) = orig;
            let fd = [
                (plus.fm - minus.fm) / (2.0 * h),
                (plus.smooth - minus.smooth) / (2.0 * h),
                (plus.safe - minus.safe) / (2.0 * h),
            ];
            let an = [
                model.net.grad_entry(&grads.fm, idx),
                model.net.grad_entry(&grads.smooth, idx),
                model.net.grad_entry(&grads.safe, idx),
            ];
            for (term, (f, a)) in fd.iter().zip(&an).enumerate() {
                // Relative check with a small absolute slack absorbing
                // central-difference roundoff near zero gradients.
                let tol = 1e-4 * f.abs().max(a.abs()) + 1e-9;
                assert!(
                    (f - a).abs() <= tol,
                    "param {idx} term {term}: fd {f} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn combined_gradient_is_the_weighted_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (model, mut cfg) = tiny_model(6, 2, 14);
        cfg.rho = 0.3;
        cfg.kappa = 0.05;
        let d = smooth_distance_field();
        let a = random_traj(6, &mut rng);
        let b = random_traj(6, &mut rng);
        let ctx = vec![0.0, 1.0];
        let batch = [BatchItem {
            tau0: &a,
            tau1: &b,
            t: 0.4,
            context: &ctx,
            distances: &d,
        }];
        let (_, combined) = regcfm_gradients(&model, &batch, &cfg).unwrap();
        let (_, terms) = regcfm_term_gradients(&model, &batch, &cfg).unwrap();
        for idx in 0..model.net.param_count() {
            let want = model.net.grad_entry(&terms.fm, idx)
                + cfg.rho * model.net.grad_entry(&terms.smooth, idx)
                + cfg.kappa * model.net.grad_entry(&terms.safe, idx);
            let got = model.net.grad_entry(&combined, idx);
            assert!((want - got).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn interpolant_mode_regularizer_gradients_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (model, mut cfg) = tiny_model(6, 2, 15);
        cfg.regularizer_eval = RegularizerEval::Interpolant;
        let d = smooth_distance_field();
        let a = random_traj(6, &mut rng);
        let b = random_traj(6, &mut rng);
        let ctx = vec![0.5, -0.5];
        let batch = [BatchItem {
            tau0: &a,
            tau1: &b,
            t: 0.4,
            context: &ctx,
            distances: &d,
        }];
        let (breakdown, terms) = regcfm_term_gradients(&model, &batch, &cfg).unwrap();
        assert!(breakdown.smooth > 0.0);
        for idx in 0..model.net.param_count() {
            assert_eq!(model.net.grad_entry(&terms.smooth, idx), 0.0);
            assert_eq!(model.net.grad_entry(&terms.safe, idx), 0.0);
        }
    }

    #[test]
    fn refine_with_zero_model_returns_the_input() {
        let (mut model, _) = tiny_model(8, 2, 16);
        model.net.zero_output_layer();
        let tau = line(pt(0.3, 0.3), pt(2.0, 1.1), 8);
        let out = refine(&model, &tau, &[0.0, 0.0], 7).unwrap();
        assert_eq!(out, tau);
    }

    #[test]
    fn refine_with_constant_flow_shifts_interior_by_exactly_c() {
        let c = pt(0.25, -0.5);
        let flow = FnFlow(|state: &[f64], _t: f64, _z: &[f64]| {
            let mut v = vec![0.0; state.len()];
            for ch in v.chunks_exact_mut(2) {
                ch[0] = c.x;
                ch[1] = c.y;
            }
            v
        });
        let tau = line(pt(0.5, 0.5), pt(3.0, 0.5), 6);
        for n in [1, 4, 9] {
            let out = refine(&flow, &tau, &[], n).unwrap();
            assert_eq!(out.start(), tau.start());
            assert_eq!(out.end(), tau.end());
            for (k, (a, b)) in out.points().iter().zip(tau.points()).enumerate() {
                if k == 0 || k == 5 {
                    continue;
                }
                assert_relative_eq!((a - b - c).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn refine_rejects_zero_steps_and_nonfinite_states() {
        let tau = line(pt(0.5, 0.5), pt(3.0, 0.5), 6);
        let flow = FnFlow(|state: &[f64], _t: f64, _z: &[f64]| vec![0.0; state.len()]);
        assert!(refine(&flow, &tau, &[], 0).is_err());
        let bad = FnFlow(|state: &[f64], _t: f64, _z: &[f64]| vec![f64::NAN; state.len()]);
        assert!(refine(&bad, &tau, &[], 3).is_err());
    }

    #[test]
    fn euler_steps_converge_first_order_on_linear_decay() {
        // v = -tau integrates to tau0 * e^-1 at t = 1; explicit Euler gives
        // (1 - 1/N)^N, whose error halves as N doubles.
        let flow = FnFlow(|state: &[f64], _t: f64, _z: &[f64]| {
            state.iter().map(|v| -v).collect()
        });
        let tau = Trajectory::new(vec![
            pt(1.0, -2.0),
            pt(0.7, 0.4),
            pt(-1.3, 2.0),
            pt(2.0, 1.0),
        ])
        .unwrap();
        let exact = (-1.0_f64).exp();
        let error_at = |n: usize| -> f64 {
            let out = refine(&flow, &tau, &[], n).unwrap();
            let mut err = 0.0_f64;
            for k in 1..3 {
                let want = tau.points()[k] * exact;
                err = err.max((out.points()[k] - want).norm());
            }
            err
        };
        let errs: Vec<f64> = [4, 8, 16, 32].iter().map(|&n| error_at(n)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (1.6..=2.4).contains(&ratio),
                "error ratio {ratio} outside first-order band"
            );
        }
    }
}
