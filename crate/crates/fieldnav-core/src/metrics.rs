//! Episode execution and benchmark metrics.
//!
//! A planned trajectory is handed to a point follower that marches along the
//! polyline in fixed-length steps, checking every swept segment against the
//! occupancy grid with an exact cell traversal (no subsampling).  The episode
//! outcome feeds path-quality metrics: success rate, success weighted by path
//! length (SPL), collision rate, and a discrete minimum-snap score.

use crate::error::{Error, Result};
use crate::trajectory::{Point2, Trajectory};
use crate::world::{astar_path, cell_path_length, segment_cells, OccupancyGrid, Scenario};
use serde::{Deserialize, Serialize};

/// Follower step length in meters.
pub const FOLLOWER_STEP: f64 = 0.05;
/// Step budget per episode; execution halts once it is exhausted.
pub const MAX_STEPS: usize = 500;
/// Terminal distance (meters) below which an episode counts as reaching the goal.
pub const GOAL_TOLERANCE: f64 = 0.2;
/// Nominal execution speed (m/s) used to time-parameterize waypoints for snap.
pub const NOMINAL_SPEED: f64 = 0.5;

/// Outcome of executing one planned trajectory in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Reached the goal tolerance without collision within the step budget.
    pub success: bool,
    /// Arc length (meters) actually executed before stopping.
    pub executed_length: f64,
    /// Grid shortest-path length (meters) between start and goal.
    pub shortest_length: f64,
    /// Whether the swept path entered an occupied cell.
    pub collided: bool,
    /// Follower steps consumed (each up to [`FOLLOWER_STEP`] meters).
    pub steps_taken: usize,
    /// Distance (meters) from the stopping point to the goal.
    pub terminal_distance: f64,
    /// Success-weighted normalized inverse path length for this episode.
    pub spl: f64,
    /// Discrete minimum-snap score of the planned trajectory.
    pub minimum_snap: f64,
    /// The planned trajectory that was executed.
    pub trajectory: Trajectory,
}

/// Aggregate metrics over a batch of episodes.
///
/// Rates are percentages; `*_std` fields are sample standard deviations of the
/// per-episode quantities (zero when only one episode is present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    /// Success rate in percent.
    pub sr: f64,
    pub sr_std: f64,
    /// Mean SPL over all episodes (failures contribute zero).
    pub spl: f64,
    pub spl_std: f64,
    /// Collision rate in percent.
    pub collision_rate: f64,
    pub collision_std: f64,
    /// Mean minimum-snap score.
    pub ms: f64,
    pub ms_std: f64,
    /// Whether `ms` averages successful episodes only.
    pub ms_successes_only: bool,
    /// Per-episode records in input order.
    pub records: Vec<EpisodeResult>,
}

/// Mean SPL over a batch: `mean_i S_i * L_i / max(P_i, L_i)` where `S_i` is
/// the success indicator, `L_i` the shortest-path length, and `P_i` the
/// executed path length.  Failed episodes contribute zero.
///
/// Errors if the batch is empty or any `L_i` is non-positive.
pub fn spl(episodes: &[EpisodeResult]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::invalid("spl requires at least one episode"));
    }
    let mut total = 0.0;
    for ep in episodes {
        if ep.shortest_length <= 0.0 || !ep.shortest_length.is_finite() {
            return Err(Error::invalid(format!(
                "spl requires positive shortest-path lengths, got {}",
                ep.shortest_length
            )));
        }
        if ep.success {
            total += ep.shortest_length / ep.shortest_length.max(ep.executed_length);
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Discrete minimum-snap score of a waypoint sequence sampled at spacing `dt`.
///
/// The fourth derivative is estimated on every interior 5-point stencil with
/// the central difference `(x_{k-2} - 4x_{k-1} + 6x_k - 4x_{k+1} + x_{k+2}) /
/// dt^4`, its squared Euclidean norm is averaged over stencils, and the mean
/// is scaled by the total duration `(K-1) dt`.  Trajectories whose coordinates
/// are polynomials of degree three or less in the sample index score exactly
/// zero.
///
/// Errors when fewer than five waypoints are given or `dt` is not positive.
pub fn minimum_snap(tau: &Trajectory, dt: f64) -> Result<f64> {
    let pts = tau.points();
    if pts.len() < 5 {
        return Err(Error::invalid(format!(
            "minimum snap needs at least 5 waypoints, got {}",
            pts.len()
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!(
            "minimum snap needs a positive finite sample spacing, got {dt}"
        )));
    }
    let dt4 = dt * dt * dt * dt;
    let mut sum = 0.0;
    for k in 2..pts.len() - 2 {
        let snap = (pts[k - 2] - pts[k - 1] * 4.0 + pts[k] * 6.0 - pts[k + 1] * 4.0
            + pts[k + 2])
            / dt4;
        sum += snap.norm_squared();
    }
    let stencils = (pts.len() - 4) as f64;
    let duration = (pts.len() - 1) as f64 * dt;
    Ok(sum / stencils * duration)
}

/// Parameter `t` in `[0, 1]` at which the segment `a -> b` (world meters)
/// first enters an occupied or out-of-bounds cell, or `None` when the whole
/// segment stays in free space.  Uses an exact traversal of every cell the
/// segment touches.
fn first_collision(grid: &OccupancyGrid, a: Point2, b: Point2) -> Option<f64> {
    let res = grid.resolution();
    let blocked = |cx: i64, cy: i64| -> bool {
        if cx < 0 || cy < 0 || cx >= grid.width() as i64 || cy >= grid.height() as i64 {
            return true;
        }
        grid.is_occupied(cx as usize, cy as usize)
    };
    for (cell, entry_t) in segment_cells(a / res, b / res) {
        if blocked(cell.0, cell.1) {
            return Some(entry_t);
        }
    }
    None
}

/// Execute `tau` in `scenario` with the fixed-step point follower and score
/// the outcome.
///
/// The follower walks the polyline from its first waypoint, consuming one
/// step per [`FOLLOWER_STEP`] meters of arc length, and halts at the first of:
/// collision (swept segment enters an occupied or out-of-bounds cell), step
/// budget exhaustion, or the end of the trajectory.  Success requires no
/// collision, stopping within [`GOAL_TOLERANCE`] of the scenario goal, and at
/// most [`MAX_STEPS`] steps.
///
/// The executed length `P` is the arc length actually swept; the reference
/// length `L` is the grid shortest path between the scenario start and goal
/// cells.  The snap score uses spacing `dt = len(tau) / (K-1) / v` with
/// nominal speed `v` = [`NOMINAL_SPEED`].
pub fn evaluate_episode(scenario: &Scenario, tau: &Trajectory) -> Result<EpisodeResult> {
    let grid = &scenario.grid;
    let (sc, gc) = (scenario.start_cell(), scenario.goal_cell());
    let cells = astar_path(grid, sc, gc)
        .ok_or(Error::NoPath(sc.0, sc.1, gc.0, gc.1))?;
    let shortest_length = cell_path_length(grid, &cells);
    if shortest_length <= 0.0 {
        return Err(Error::invalid(
            "episode start and goal occupy the same cell; shortest path is degenerate",
        ));
    }

    let pts = tau.points();
    let budget = MAX_STEPS as f64 * FOLLOWER_STEP;
    let mut executed = 0.0;
    let mut position = pts[0];
    let mut collided = false;
    for w in pts.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if len == 0.0 {
            continue;
        }
        // Stop at whichever comes first on this segment: the first swept
        // collision or the point where the step budget runs out.
        let hit_t = first_collision(grid, w[0], w[1]);
        let remaining = budget - executed;
        let budget_t = if len >= remaining { remaining / len } else { f64::INFINITY };
        match hit_t {
            Some(t) if t <= budget_t => {
                executed += t * len;
                position = w[0] + seg * t;
                collided = true;
                break;
            }
            _ if budget_t <= 1.0 => {
                executed += budget_t * len;
                position = w[0] + seg * budget_t;
                break;
            }
            _ => {
                executed += len;
                position = w[1];
            }
        }
    }

    let steps_taken = (executed / FOLLOWER_STEP).ceil().min(MAX_STEPS as f64) as usize;
    let terminal_distance = (position - scenario.goal).norm();
    let success =
        !collided && terminal_distance <= GOAL_TOLERANCE && steps_taken <= MAX_STEPS;
    let spl = if success {
        shortest_length / shortest_length.max(executed)
    } else {
        0.0
    };
    // Snap is a property of the plan, not of the executed prefix.  Degenerate
    // plans (too few waypoints or zero length) score zero rather than erroring.
    let dt = tau.length() / (pts.len() - 1) as f64 / NOMINAL_SPEED;
    let ms = if pts.len() >= 5 && dt > 0.0 {
        minimum_snap(tau, dt)?
    } else {
        0.0
    };

    Ok(EpisodeResult {
        success,
        executed_length: executed,
        shortest_length,
        collided,
        steps_taken,
        terminal_distance,
        spl,
        minimum_snap: ms,
        trajectory: tau.clone(),
    })
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate per-episode results into a [`MetricsReport`].
///
/// `ms_successes_only` restricts the snap average to successful episodes
/// (zero when none succeeded); all other metrics always cover every episode.
/// Errors on an empty batch or non-positive shortest-path lengths.
pub fn aggregate(episodes: Vec<EpisodeResult>, ms_successes_only: bool) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::invalid("aggregate requires at least one episode"));
    }
    let spl_mean = spl(&episodes)?;
    let success: Vec<f64> = episodes
        .iter()
        .map(|e| if e.success { 100.0 } else { 0.0 })
        .collect();
    let collisions: Vec<f64> = episodes
        .iter()
        .map(|e| if e.collided { 100.0 } else { 0.0 })
        .collect();
    let spls: Vec<f64> = episodes.iter().map(|e| e.spl).collect();
    let snaps: Vec<f64> = if ms_successes_only {
        episodes
            .iter()
            .filter(|e| e.success)
            .map(|e| e.minimum_snap)
            .collect()
    } else {
        episodes.iter().map(|e| e.minimum_snap).collect()
    };
    let (sr, sr_std) = mean_and_std(&success);
    let (collision_rate, collision_std) = mean_and_std(&collisions);
    let (_, spl_std) = mean_and_std(&spls);
    let (ms, ms_std) = if snaps.is_empty() {
        (0.0, 0.0)
    } else {
        mean_and_std(&snaps)
    };
    Ok(MetricsReport {
        episodes: episodes.len(),
        sr,
        sr_std,
        spl: spl_mean,
        spl_std,
        collision_rate,
        collision_std,
        ms,
        ms_std,
        ms_successes_only,
        records: episodes,
    })
}
