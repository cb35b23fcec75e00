//! Planar trajectories and polyline utilities shared by the prior, flow, and
//! metrics stages.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// 2-D point / vector in world coordinates (meters).
pub type Point2 = nalgebra::Vector2<f64>;

/// An ordered sequence of 2-D waypoints in world coordinates.
///
/// Invariants enforced at construction: at least two waypoints, all
/// coordinates finite. Agreement of the endpoints with a scenario's start and
/// goal is a pipeline-level contract checked where trajectories are produced,
/// not a property of the bare type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    waypoints: Vec<Point2>,
}

impl Trajectory {
    /// Builds a trajectory, validating the waypoint invariants.
    pub fn new(waypoints: Vec<Point2>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::invalid(format!(
                "trajectory needs at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        if waypoints.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::NonFinite("trajectory waypoints"));
        }
        Ok(Self { waypoints })
    }

    pub fn points(&self) -> &[Point2] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: >= 2 waypoints
    }

    pub fn start(&self) -> Point2 {
        self.waypoints[0]
    }

    pub fn end(&self) -> Point2 {
        *self.waypoints.last().unwrap()
    }

    /// Total arc length in meters.
    pub fn length(&self) -> f64 {
        polyline_length(&self.waypoints)
    }

    /// Resamples to `k` waypoints equally spaced by arc length.
    ///
    /// The first and last waypoints are preserved exactly. A degenerate
    /// zero-length trajectory resamples to `k` copies of its single location.
    pub fn resampled(&self, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("resample target must be >= 2 waypoints"));
        }
        Ok(Self {
            waypoints: resample_polyline(&self.waypoints, k),
        })
    }

    /// Replaces the first and last waypoints (used to pin endpoints to a
    /// scenario's start and goal after resampling or an integration step).
    pub fn pin_endpoints(&mut self, start: Point2, end: Point2) {
        *self.waypoints.first_mut().unwrap() = start;
        *self.waypoints.last_mut().unwrap() = end;
    }

    /// Turning angle (radians, in `[0, pi]`) at each interior waypoint.
    ///
    /// Zero-length segments contribute a zero angle.
    pub fn turning_angles(&self) -> Vec<f64> {
        let p = &self.waypoints;
        let mut angles = Vec::with_capacity(p.len().saturating_sub(2));
        for k in 1..p.len() - 1 {
            let a = p[k] - p[k - 1];
            let b = p[k + 1] - p[k];
            let (na, nb) = (a.norm(), b.norm());
            if na < 1e-12 || nb < 1e-12 {
                angles.push(0.0);
                continue;
            }
            let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
            angles.push(cos.acos());
        }
        angles
    }
}

/// Arc length of a polyline.
pub fn polyline_length(points: &[Point2]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Resamples a polyline to `k >= 2` points equally spaced by arc length.
pub fn resample_polyline(points: &[Point2], k: usize) -> Vec<Point2> {
    assert!(k >= 2 && !points.is_empty());
    let total = polyline_length(points);
    if total < 1e-15 || points.len() == 1 {
        return vec![points[0]; k];
    }
    // Cumulative arc length per input vertex.
    let mut cum = Vec::with_capacity(points.len());
    cum.push(0.0);
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let mut out = Vec::with_capacity(k);
    out.push(points[0]);
    let mut seg = 0usize;
    for i in 1..k - 1 {
        let target = total * i as f64 / (k - 1) as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let span = cum[seg + 1] - cum[seg];
        let t = if span > 1e-15 { (target - cum[seg]) / span } else { 0.0 };
        out.push(points[seg] + (points[seg + 1] - points[seg]) * t);
    }
    out.push(*points.last().unwrap());
    out
}

/// Discrete symmetric Hausdorff distance between two point sets.
pub fn hausdorff_distance(a: &[Point2], b: &[Point2]) -> f64 {
    fn directed(from: &[Point2], to: &[Point2]) -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0_f64, f64::max)
    }
    directed(a, b).max(directed(b, a))
}
