//! Structured multi-modal trajectory priors.
//!
//! The success field induces a path energy
//!
//! ```text
//!   E(tau) = integral -log(F(tau(t)) + delta) |tau'(t)| dt
//! ```
//!
//! discretized by the trapezoid rule over waypoints. Low-energy corridors are
//! enumerated as K-shortest loopless paths through an 8-connected graph over
//! free cells, thinned to a diverse subset by greedy max-min Hausdorff
//! selection, scored by field support, length, and squared turning rate, and
//! normalized into a softmax mixture that can be sampled with an explicit RNG.

use crate::error::{Error, Result};
use crate::field::SuccessField;
use crate::trajectory::{hausdorff_distance, resample_polyline, Point2, Trajectory};
use crate::world::{neighbors, Scenario};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};

/// Default energy floor added to the field before the logarithm.
pub const DEFAULT_DELTA: f64 = 1e-3;
/// Default number of K-shortest candidate paths.
pub const DEFAULT_K_PATHS: usize = 8;
/// Default mixture size.
pub const DEFAULT_M_COMPONENTS: usize = 3;
/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
/// Default waypoint count for resampled components.
pub const DEFAULT_K_WAYPOINTS: usize = 16;
/// Field threshold above which a cell may be a peak (peaks baseline prior).
pub const PEAK_THRESHOLD: f64 = 0.8;
/// Fixed resampling size used for Hausdorff comparisons during selection.
const HAUSDORFF_POINTS: usize = 16;

/// Weights of the candidate score `alpha * mean F - beta * length -
/// gamma * sum kappa^2` (turning angle per unit length, squared).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.05,
        }
    }
}

/// Parameters for [`extract_prior`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub k_paths: usize,
    pub m_components: usize,
    pub temperature: f64,
    pub delta: f64,
    pub k_waypoints: usize,
    pub score: ScoreWeights,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            k_paths: DEFAULT_K_PATHS,
            m_components: DEFAULT_M_COMPONENTS,
            temperature: DEFAULT_TEMPERATURE,
            delta: DEFAULT_DELTA,
            k_waypoints: DEFAULT_K_WAYPOINTS,
            score: ScoreWeights::default(),
        }
    }
}

/// Energy integrand `-log(min(F + delta, 1))`.
///
/// The inner clamp keeps the integrand non-negative even where the clamped
/// field reaches 1 (there `F + delta` would exceed 1 and flip the sign).
fn integrand(f_value: f64, delta: f64) -> f64 {
    -(f_value + delta).min(1.0).ln()
}

/// Trapezoid-rule discretization of the path energy. Errors if any waypoint
/// leaves the grid.
pub fn path_energy(tau: &Trajectory, field: &SuccessField, delta: f64) -> Result<f64> {
    let pts = tau.points();
    let mut acc = 0.0;
    let mut prev = integrand(field.query(pts[0])?, delta);
    for w in pts.windows(2) {
        let next = integrand(field.query(w[1])?, delta);
        acc += 0.5 * (prev + next) * (w[1] - w[0]).norm();
        prev = next;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Energy graph
// ---------------------------------------------------------------------------

/// Weighted 8-connected graph over free cells. Edge weights are the
/// trapezoid energy of the straight segment between the two cell centers:
/// `0.5 (c(F_a) + c(F_b)) * dist(a, b)` with distances in meters. Weights are
/// non-negative, and strictly positive wherever the field stays below
/// `1 - delta`.
#[derive(Debug, Clone)]
pub struct EnergyGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
    node_cells: Vec<(usize, usize)>,
    node_of_cell: Vec<usize>,
    positions: Vec<Point2>,
    width: usize,
}

impl EnergyGraph {
    pub fn node_count(&self) -> usize {
        self.node_cells.len()
    }

    /// Adjacency lists, `(neighbor node, weight)` sorted by neighbor index.
    pub fn adjacency(&self) -> &[Vec<(usize, f64)>] {
        &self.adjacency
    }

    /// Node for the (free) cell, if any.
    pub fn node_of_cell(&self, ix: usize, iy: usize) -> Option<usize> {
        let n = self.node_of_cell[iy * self.width + ix];
        (n != usize::MAX).then_some(n)
    }

    pub fn cell_of_node(&self, node: usize) -> (usize, usize) {
        self.node_cells[node]
    }

    /// Cell-center position of a node in world meters.
    pub fn position(&self, node: usize) -> Point2 {
        self.positions[node]
    }

    /// World-space polyline of a node path.
    pub fn polyline(&self, nodes: &[usize]) -> Vec<Point2> {
        nodes.iter().map(|&n| self.positions[n]).collect()
    }
}

/// Builds the energy graph from a solved field. Grid geometry and the free
/// mask are taken from the field itself.
pub fn build_energy_graph(field: &SuccessField, delta: f64) -> Result<EnergyGraph> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let (w, h, res) = (field.width(), field.height(), field.resolution());
    // Reconstruct an occupancy view so the shared neighbor rule applies.
    let cells: Vec<u8> = (0..w * h)
        .map(|c| field.is_occupied(c % w, c / w) as u8)
        .collect();
    let grid = crate::world::OccupancyGrid::from_cells(w, h, res, cells)?;

    let mut node_of_cell = vec![usize::MAX; w * h];
    let mut node_cells = Vec::new();
    let mut positions = Vec::new();
    for iy in 0..h {
        for ix in 0..w {
            if grid.is_free(ix, iy) {
                node_of_cell[iy * w + ix] = node_cells.len();
                node_cells.push((ix, iy));
                positions.push(grid.cell_center(ix, iy));
            }
        }
    }
    let mut adjacency = vec![Vec::new(); node_cells.len()];
    for (node, &(ix, iy)) in node_cells.iter().enumerate() {
        let ci = integrand(field.value_at_cell(ix, iy), delta);
        let mut edges: Vec<(usize, f64)> = neighbors(&grid, ix, iy)
            .map(|(nx, ny, step)| {
                let cj = integrand(field.value_at_cell(nx, ny), delta);
                let weight = 0.5 * (ci + cj) * step * res;
                (node_of_cell[ny * w + nx], weight)
            })
            .collect();
        edges.sort_by_key(|&(n, _)| n);
        adjacency[node] = edges;
    }
    Ok(EnergyGraph {
        adjacency,
        node_cells,
        node_of_cell,
        positions,
        width: w,
    })
}

// ---------------------------------------------------------------------------
// Shortest paths
// ---------------------------------------------------------------------------

/// A node path with its cost (left-to-right sum of edge weights).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPath {
    pub nodes: Vec<usize>,
    pub cost: f64,
}

fn edge_weight(adj: &[Vec<(usize, f64)>], a: usize, b: usize) -> Option<f64> {
    adj[a]
        .iter()
        .find_map(|&(n, w)| (n == b).then_some(w))
}

/// Sequential left-to-right cost of a node path; deterministic association so
/// costs compare exactly against independent enumerations.
fn path_cost(adj: &[Vec<(usize, f64)>], nodes: &[usize]) -> f64 {
    let mut acc = 0.0;
    for w in nodes.windows(2) {
        acc += edge_weight(adj, w[0], w[1]).expect("edge exists");
    }
    acc
}

/// Dijkstra over an adjacency list with optional removed nodes/edges,
/// breaking cost ties toward the lexicographically smallest node sequence.
fn dijkstra(
    adj: &[Vec<(usize, f64)>],
    source: usize,
    target: usize,
    removed_nodes: &[bool],
    removed_edges: &HashSet<(usize, usize)>,
) -> Option<GraphPath> {
    #[derive(PartialEq)]
    struct Entry {
        dist: f64,
        node: usize,
    }
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other
                .dist
                .total_cmp(&self.dist)
                .then(other.node.cmp(&self.node))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let n = adj.len();
    if source >= n || target >= n || removed_nodes[source] || removed_nodes[target] {
        return None;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut settled = vec![false; n];
    let mut heap = std::collections::BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry {
        dist: 0.0,
        node: source,
    });

    // Reconstructs the current path to a node via parents (source first).
    let build = |parent: &[usize], mut node: usize| -> Vec<usize> {
        let mut path = vec![node];
        while parent[node] != usize::MAX {
            node = parent[node];
            path.push(node);
        }
        path.reverse();
        path
    };

    while let Some(Entry { node, .. }) = heap.pop() {
        if settled[node] {
            continue;
        }
        settled[node] = true;
        if node == target {
            break;
        }
        for &(next, weight) in &adj[node] {
            if removed_nodes[next] || settled[next] || removed_edges.contains(&(node, next)) {
                continue;
            }
            let cand = dist[node] + weight;
            if cand < dist[next] {
                dist[next] = cand;
                parent[next] = node;
                heap.push(Entry {
                    dist: cand,
                    node: next,
                });
            } else if cand == dist[next] && parent[next] != node {
                // Exact cost tie: keep the lexicographically smaller path.
                let via_new = build(&parent, node);
                let via_old = build(&parent, parent[next]);
                if via_new < via_old {
                    parent[next] = node;
                }
            }
        }
    }
    if dist[target].is_infinite() {
        return None;
    }
    let nodes = build(&parent, target);
    Some(GraphPath {
        cost: path_cost(adj, &nodes),
        nodes,
    })
}

/// Shortest path between two nodes (no removals).
pub fn shortest_path(
    adj: &[Vec<(usize, f64)>],
    source: usize,
    target: usize,
) -> Option<GraphPath> {
    dijkstra(
        adj,
        source,
        target,
        &vec![false; adj.len()],
        &HashSet::new(),
    )
}

/// Total order on candidate paths: cost ascending, then lexicographic node
/// sequence. `f64::total_cmp` makes the wrapper `Ord`-safe (costs are finite).
#[derive(PartialEq, Eq)]
struct Candidate {
    cost_bits: CostKey,
    nodes: Vec<usize>,
}

struct CostKey(f64);

impl PartialEq for CostKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0).is_eq()
    }
}
impl Eq for CostKey {}
impl Ord for CostKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl PartialOrd for CostKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.cost_bits
            .cmp(&other.cost_bits)
            .then_with(|| self.nodes.cmp(&other.nodes))
    }
}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// K-shortest loopless paths by spur enumeration, in nondecreasing cost with
/// ties broken by lexicographic node order. Returns fewer than `k` paths when
/// the graph is exhausted, and an empty vector when the endpoints are
/// disconnected.
pub fn k_shortest_paths(
    adj: &[Vec<(usize, f64)>],
    source: usize,
    target: usize,
    k: usize,
) -> Vec<GraphPath> {
    if k == 0 {
        return Vec::new();
    }
    let Some(first) = shortest_path(adj, source, target) else {
        return Vec::new();
    };
    let mut accepted: Vec<GraphPath> = vec![first];
    let mut candidates: BTreeSet<Candidate> = BTreeSet::new();
    let mut removed_nodes = vec![false; adj.len()];

    while accepted.len() < k {
        let prev = accepted.last().unwrap().nodes.clone();
        for spur_idx in 0..prev.len() - 1 {
            let root = &prev[..=spur_idx];
            let spur_node = prev[spur_idx];
            // Remove edges used by accepted paths sharing this root, and the
            // root's interior nodes, so every spur is loopless and new.
            let mut removed_edges = HashSet::new();
            for p in &accepted {
                if p.nodes.len() > spur_idx + 1 && p.nodes[..=spur_idx] == *root {
                    removed_edges.insert((p.nodes[spur_idx], p.nodes[spur_idx + 1]));
                }
            }
            for &n in &root[..spur_idx] {
                removed_nodes[n] = true;
            }
            if let Some(spur) = dijkstra(adj, spur_node, target, &removed_nodes, &removed_edges) {
                let mut nodes = root[..spur_idx].to_vec();
                nodes.extend_from_slice(&spur.nodes);
                if !accepted.iter().any(|p| p.nodes == nodes) {
                    candidates.insert(Candidate {
                        cost_bits: CostKey(path_cost(adj, &nodes)),
                        nodes,
                    });
                }
            }
            for &n in &root[..spur_idx] {
                removed_nodes[n] = false;
            }
        }
        let Some(best) = candidates.pop_first() else {
            break;
        };
        accepted.push(GraphPath {
            cost: best.cost_bits.0,
            nodes: best.nodes,
        });
    }
    accepted
}

// ---------------------------------------------------------------------------
// Diversity selection, scoring, mixture
// ---------------------------------------------------------------------------

/// Greedy max-min Hausdorff selection over candidate polylines (assumed
/// sorted by ascending energy; the first is always selected). Comparisons use
/// a fixed 16-point arc-length resampling. Candidates at zero Hausdorff
/// distance from the selected set (duplicates) are skipped, so the result may
/// be shorter than `m`. Returns indices in selection order.
pub fn select_diverse(candidates: &[Vec<Point2>], m: usize) -> Vec<usize> {
    if candidates.is_empty() || m == 0 {
        return Vec::new();
    }
    let resampled: Vec<Vec<Point2>> = candidates
        .iter()
        .map(|c| resample_polyline(c, HAUSDORFF_POINTS))
        .collect();
    let mut selected = vec![0usize];
    // Min distance from each candidate to the selected set.
    let mut min_dist: Vec<f64> = resampled
        .iter()
        .map(|r| hausdorff_distance(r, &resampled[0]))
        .collect();
    while selected.len() < m {
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if selected.contains(&i) || d <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bd)) => d > bd,
            };
            if better {
                best = Some((i, d));
            }
        }
        let Some((pick, _)) = best else {
            break;
        };
        selected.push(pick);
        for (i, d) in min_dist.iter_mut().enumerate() {
            *d = d.min(hausdorff_distance(&resampled[i], &resampled[pick]));
        }
    }
    selected
}

/// Candidate score `alpha * mean_k F(x_k) - beta * length(tau) - gamma *
/// sum_k kappa_k^2`, with `kappa_k` the turning angle at interior waypoint `k`
/// divided by the mean of its two adjacent segment lengths.
pub fn score_candidate(
    tau: &Trajectory,
    field: &SuccessField,
    weights: ScoreWeights,
) -> Result<f64> {
    let pts = tau.points();
    let mut mean_f = 0.0;
    for p in pts {
        mean_f += field.query(*p)?;
    }
    mean_f /= pts.len() as f64;
    let angles = tau.turning_angles();
    let mut curvature = 0.0;
    for (k, theta) in angles.iter().enumerate() {
        let s = 0.5 * ((pts[k + 1] - pts[k]).norm() + (pts[k + 2] - pts[k + 1]).norm());
        if s > 1e-12 {
            let kappa = theta / s;
            curvature += kappa * kappa;
        }
    }
    Ok(weights.alpha * mean_f - weights.beta * tau.length() - weights.gamma * curvature)
}

/// A categorical mixture over trajectory components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    pub components: Vec<Trajectory>,
    /// Softmax weights, positive, summing to one.
    pub weights: Vec<f64>,
    /// Raw scores the weights were derived from.
    pub scores: Vec<f64>,
    pub temperature: f64,
}

impl MixturePrior {
    /// Draws a component index from the categorical distribution.
    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Draws a component and returns a copy of it.
    pub fn sample(&self, rng: &mut impl Rng) -> Trajectory {
        self.components[self.sample_index(rng)].clone()
    }

    /// Highest-weight component (ties to the lower index).
    pub fn mode(&self) -> &Trajectory {
        let mut best = 0;
        for i in 1..self.weights.len() {
            if self.weights[i] > self.weights[best] {
                best = i;
            }
        }
        &self.components[best]
    }
}

/// Builds the full mixture from raw candidate polylines (assumed sorted by
/// ascending energy): selects a diverse subset of up to `m`, resamples each
/// survivor to `k_waypoints` by arc length, scores, and softmax-normalizes.
pub fn build_mixture(
    paths: &[Vec<Point2>],
    field: &SuccessField,
    temperature: f64,
    m: usize,
    k_waypoints: usize,
    score: ScoreWeights,
) -> Result<MixturePrior> {
    if paths.is_empty() {
        return Err(Error::invalid("mixture needs at least one candidate path"));
    }
    if k_waypoints < 2 {
        return Err(Error::invalid("k_waypoints must be at least 2"));
    }
    let picked = select_diverse(paths, m);
    let components = picked
        .iter()
        .map(|&i| Trajectory::new(resample_polyline(&paths[i], k_waypoints)))
        .collect::<Result<Vec<_>>>()?;
    mixture_from_components(components, field, temperature, score)
}

/// Scores ready-made components and normalizes softmax weights at
/// `temperature`; the final step of [`build_mixture`].
pub fn mixture_from_components(
    candidates: Vec<Trajectory>,
    field: &SuccessField,
    temperature: f64,
    weights: ScoreWeights,
) -> Result<MixturePrior> {
    if candidates.is_empty() {
        return Err(Error::invalid("mixture needs at least one candidate"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| score_candidate(c, field, weights))
        .collect::<Result<_>>()?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(MixturePrior {
        components: candidates,
        weights: exps.into_iter().map(|e| e / sum).collect(),
        scores,
        temperature,
    })
}

/// Draws a component from the mixture with the caller's RNG (copy returned,
/// so mutating the draw cannot corrupt the prior).
pub fn sample_prior(prior: &MixturePrior, rng: &mut impl Rng) -> Trajectory {
    prior.sample(rng)
}

/// Full prior construction for a scenario: energy graph, K-shortest paths
/// between the start and goal cells, endpoint pinning to the exact start and
/// goal, then [`build_mixture`] (diversity selection, arc-length resampling,
/// scoring, softmax normalization).
pub fn extract_prior(
    scenario: &Scenario,
    field: &SuccessField,
    cfg: &PriorConfig,
) -> Result<MixturePrior> {
    if cfg.k_paths == 0 || cfg.m_components == 0 {
        return Err(Error::invalid("k_paths and m_components must be positive"));
    }
    if cfg.k_waypoints < 4 {
        return Err(Error::invalid("k_waypoints must be at least 4"));
    }
    let graph = build_energy_graph(field, cfg.delta)?;
    let (sx, sy) = scenario.start_cell();
    let (gx, gy) = scenario.goal_cell();
    let source = graph
        .node_of_cell(sx, sy)
        .ok_or_else(|| Error::invalid("start cell is occupied"))?;
    let target = graph
        .node_of_cell(gx, gy)
        .ok_or_else(|| Error::invalid("goal cell is occupied"))?;
    let raw = k_shortest_paths(graph.adjacency(), source, target, cfg.k_paths);
    if raw.is_empty() {
        return Err(Error::NoPath(sx, sy, gx, gy));
    }
    // Pin endpoints before scoring so stored scores match final geometry
    // exactly (the cell centers of the start/goal cells are within half a
    // cell of the true endpoints).
    let polylines: Vec<Vec<Point2>> = raw
        .iter()
        .map(|p| {
            let mut line = graph.polyline(&p.nodes);
            *line.first_mut().unwrap() = scenario.start;
            *line.last_mut().unwrap() = scenario.goal;
            line
        })
        .collect();
    build_mixture(
        &polylines,
        field,
        cfg.temperature,
        cfg.m_components,
        cfg.k_waypoints,
        cfg.score,
    )
}

// ---------------------------------------------------------------------------
// Baseline priors
// ---------------------------------------------------------------------------

/// Straight start-goal line with i.i.d. Gaussian noise (std `sigma` meters)
/// on interior waypoints; endpoints pinned.
pub fn gaussian_prior(
    scenario: &Scenario,
    k_waypoints: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    if k_waypoints < 2 {
        return Err(Error::invalid("k_waypoints must be at least 2"));
    }
    let mut pts = Vec::with_capacity(k_waypoints);
    for i in 0..k_waypoints {
        let t = i as f64 / (k_waypoints - 1) as f64;
        let mut p = scenario.start + (scenario.goal - scenario.start) * t;
        if i > 0 && i + 1 < k_waypoints && sigma > 0.0 {
            let normal = rand_distr::Normal::new(0.0, sigma).expect("valid sigma");
            p.x += rand_distr::Distribution::sample(&normal, rng);
            p.y += rand_distr::Distribution::sample(&normal, rng);
        }
        pts.push(p);
    }
    Trajectory::new(pts)
}

/// Unimodal baseline: strict local maxima of the clamped field above
/// [`PEAK_THRESHOLD`], deduplicated within a 3-cell radius, ordered by their
/// projection onto the start-goal axis and joined by straight segments (the
/// straight line itself when no peak qualifies), then resampled.
pub fn peaks_prior(
    scenario: &Scenario,
    field: &SuccessField,
    k_waypoints: usize,
) -> Result<Trajectory> {
    let grid = &scenario.grid;
    let (w, h) = (grid.width(), grid.height());
    let mut peaks: Vec<(usize, usize, f64)> = Vec::new();
    for iy in 1..h.saturating_sub(1) {
        for ix in 1..w.saturating_sub(1) {
            if grid.is_occupied(ix, iy) {
                continue;
            }
            let v = field.value_at_cell(ix, iy);
            if v <= PEAK_THRESHOLD {
                continue;
            }
            let mut is_peak = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = ((ix as i64 + dx) as usize, (iy as i64 + dy) as usize);
                    let nv = field.value_at_cell(nx, ny);
                    // Strict inequality against earlier cells breaks plateaus
                    // deterministically toward the smaller index.
                    let earlier = (ny, nx) < (iy, ix);
                    if nv > v || (nv == v && earlier) {
                        is_peak = false;
                        break;
                    }
                }
                if !is_peak {
                    break;
                }
            }
            if is_peak {
                peaks.push((ix, iy, v));
            }
        }
    }
    // Deduplicate clusters: keep the strongest peak within Chebyshev radius 3.
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for &(ix, iy, _) in &peaks {
        if kept
            .iter()
            .all(|&(kx, ky)| kx.abs_diff(ix).max(ky.abs_diff(iy)) > 3)
        {
            kept.push((ix, iy));
        }
    }
    // Order by projection onto the start-goal axis, keeping only peaks that
    // lie strictly between the endpoints.
    let axis = scenario.goal - scenario.start;
    let len = axis.norm();
    let mut ordered: Vec<(f64, Point2)> = kept
        .iter()
        .map(|&(ix, iy)| {
            let p = grid.cell_center(ix, iy);
            ((p - scenario.start).dot(&axis) / len.max(1e-12), p)
        })
        .filter(|&(proj, _)| proj > 0.0 && proj < len)
        .collect();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut pts = vec![scenario.start];
    pts.extend(ordered.into_iter().map(|(_, p)| p));
    pts.push(scenario.goal);
    let mut tau = Trajectory::new(resample_polyline(&pts, k_waypoints.max(2)))?;
    tau.pin_endpoints(scenario.start, scenario.goal);
    Ok(tau)
}
