//! Synthetic 2-D occupancy-grid worlds.
//!
//! Provides the occupancy grid type, four scenario generators (open room,
//! two-corridor junction, winding corridor, cluttered field), expert
//! demonstrations from a deterministic 8-connected grid planner, demonstration
//! label rasterization, and an exact Euclidean distance transform.
//!
//! Conventions: cells are indexed `(ix, iy)` with row-major storage
//! `iy * width + ix`; cell `(ix, iy)` has its center at
//! `((ix + 0.5) * resolution, (iy + 0.5) * resolution)` in world meters.

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::trajectory::Point2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;

/// Default grid resolution in meters per cell.
pub const DEFAULT_RESOLUTION: f64 = 0.1;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Binary occupancy grid over a rectangular cell lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    /// Row-major cell values; 0 = free, 1 = occupied.
    cells: Vec<u8>,
}

impl OccupancyGrid {
    /// Builds a grid from raw cell values (0 = free, 1 = occupied).
    ///
    /// Accepts any dimensions of at least 2x2 so tests can build small
    /// synthetic worlds; the scenario generators additionally guarantee
    /// at-least-8x8 closed-border worlds.
    pub fn from_cells(width: usize, height: usize, resolution: f64, cells: Vec<u8>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::invalid(format!(
                "grid dimensions must be at least 2x2, got {width}x{height}"
            )));
        }
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::invalid("grid resolution must be positive and finite"));
        }
        if cells.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::invalid("cell values must be 0 or 1"));
        }
        Ok(Self {
            width,
            height,
            resolution,
            cells,
        })
    }

    /// All-free grid with an occupied one-cell border ring (closed world).
    pub fn closed(width: usize, height: usize, resolution: f64) -> Result<Self> {
        let mut g = Self::from_cells(width, height, resolution, vec![0; width * height])?;
        for ix in 0..width {
            g.set(ix, 0, true);
            g.set(ix, height - 1, true);
        }
        for iy in 0..height {
            g.set(0, iy, true);
            g.set(width - 1, iy, true);
        }
        Ok(g)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Meters per cell.
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// World extent in meters: `(width * resolution, height * resolution)`.
    pub fn world_size(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        )
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.width && iy < self.height);
        iy * self.width + ix
    }

    #[inline]
    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.cells[self.idx(ix, iy)] == 1
    }

    #[inline]
    pub fn is_free(&self, ix: usize, iy: usize) -> bool {
        !self.is_occupied(ix, iy)
    }

    pub fn set(&mut self, ix: usize, iy: usize, occupied: bool) {
        let i = self.idx(ix, iy);
        self.cells[i] = occupied as u8;
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Center of cell `(ix, iy)` in world meters.
    pub fn cell_center(&self, ix: usize, iy: usize) -> Point2 {
        Point2::new(
            (ix as f64 + 0.5) * self.resolution,
            (iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell containing a world point, or `None` if outside the grid.
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let ix = (p.x / self.resolution).floor();
        let iy = (p.y / self.resolution).floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.height as f64 {
            return None;
        }
        Some((ix as usize, iy as usize))
    }

    /// Fraction of cells occupied within the Chebyshev-`r` window around a cell.
    pub fn occupancy_fraction(&self, ix: usize, iy: usize, r: usize) -> f64 {
        let (mut total, mut occ) = (0usize, 0usize);
        let x0 = ix.saturating_sub(r);
        let y0 = iy.saturating_sub(r);
        for y in y0..=(iy + r).min(self.height - 1) {
            for x in x0..=(ix + r).min(self.width - 1) {
                total += 1;
                occ += self.cells[self.idx(x, y)] as usize;
            }
        }
        occ as f64 / total as f64
    }
}

/// The four synthetic world families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Border walls only; start and goal in opposite corners.
    Open,
    /// A central block with free corridors on all four sides: at least two
    /// homotopy-distinct routes (left-around and right-around) from start
    /// (bottom corridor) to goal (top corridor).
    TJunction,
    /// A single winding corridor; exactly one route class, walls close by.
    Corridor,
    /// Randomly placed rectangular obstacles in an otherwise open room.
    Clutter,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Open,
        ScenarioKind::TJunction,
        ScenarioKind::Corridor,
        ScenarioKind::Clutter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Open => "open",
            ScenarioKind::TJunction => "t-junction",
            ScenarioKind::Corridor => "corridor",
            ScenarioKind::Clutter => "clutter",
        }
    }

    pub(crate) fn id(&self) -> u64 {
        match self {
            ScenarioKind::Open => 0,
            ScenarioKind::TJunction => 1,
            ScenarioKind::Corridor => 2,
            ScenarioKind::Clutter => 3,
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(ScenarioKind::Open),
            "t-junction" | "tjunction" => Ok(ScenarioKind::TJunction),
            "corridor" => Ok(ScenarioKind::Corridor),
            "clutter" => Ok(ScenarioKind::Clutter),
            other => Err(Error::invalid(format!("unknown scenario kind `{other}`"))),
        }
    }
}

/// A navigation problem: a grid plus free start and goal locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub grid: OccupancyGrid,
    /// Start position (a free cell center), world meters.
    pub start: Point2,
    /// Goal position (a free cell center), world meters.
    pub goal: Point2,
}

impl Scenario {
    pub fn start_cell(&self) -> (usize, usize) {
        self.grid.cell_of(self.start).expect("start inside grid")
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        self.grid.cell_of(self.goal).expect("goal inside grid")
    }
}

/// Generates a scenario deterministically from `(kind, seed, size)`.
///
/// Guarantees on success: closed border, free start/goal cells, start and
/// goal connected through free space, and for [`ScenarioKind::TJunction`] at
/// least two homotopy-distinct corridor routes. Fails with
/// [`Error::Generation`] if constraints cannot be met within a bounded number
/// of attempts.
pub fn generate_scenario(
    kind: ScenarioKind,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Scenario> {
    if width < 8 || height < 8 {
        return Err(Error::invalid(format!(
            "scenario grids must be at least 8x8, got {width}x{height}"
        )));
    }
    let gen_err = |reason: &str| Error::Generation {
        kind: kind.as_str(),
        seed,
        reason: reason.to_string(),
    };
    let scenario = match kind {
        ScenarioKind::Open => gen_open(seed, width, height)?,
        ScenarioKind::TJunction => gen_tjunction(seed, width, height)?,
        ScenarioKind::Corridor => gen_corridor(seed, width, height)?,
        ScenarioKind::Clutter => gen_clutter(seed, width, height)?,
    };
    // Common postconditions.
    let (sx, sy) = scenario.start_cell();
    let (gx, gy) = scenario.goal_cell();
    if scenario.grid.is_occupied(sx, sy) || scenario.grid.is_occupied(gx, gy) {
        return Err(gen_err("start or goal cell occupied"));
    }
    if !cells_connected(&scenario.grid, (sx, sy), (gx, gy)) {
        return Err(gen_err("start and goal not connected"));
    }
    Ok(scenario)
}

fn gen_open(seed: u64, width: usize, height: usize) -> Result<Scenario> {
    let grid = OccupancyGrid::closed(width, height, DEFAULT_RESOLUTION)?;
    let start = grid.cell_center(1, 1);
    let goal = grid.cell_center(width - 2, height - 2);
    Ok(Scenario {
        kind: ScenarioKind::Open,
        seed,
        grid,
        start,
        goal,
    })
}

/// Central block surrounded by a free corridor ring. The block is shifted
/// horizontally by a small seeded offset so the left-around and right-around
/// routes have slightly different lengths while staying near-symmetric.
fn gen_tjunction(seed: u64, width: usize, height: usize) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        ScenarioKind::TJunction.id(),
        seed,
        width as u64,
        height as u64,
    ]));
    // The junction is mirror-symmetric about a center column so neither arm
    // is systematically cheaper: the route choice is meant to stay ambiguous.
    // Even widths keep one extra wall column on the right so an exact integer
    // center exists; seed variation only moves symmetry-preserving knobs
    // (corridor width, block vertical extent, start/goal rows).
    let we = if width % 2 == 0 { width - 1 } else { width };
    // Corridor arms stay wide relative to typical waypoint spacing so that a
    // coarsely discretized route can round the two corners without clipping
    // the central block.
    let c = (width.min(height) / 6).max(3) + rng.gen_range(0..=1); // corridor width, cells
    if we < 2 * c + 5 || height < 2 * c + 6 {
        return Err(Error::Generation {
            kind: "t-junction",
            seed,
            reason: format!("grid too small for corridor width {c}"),
        });
    }
    let cx = (we - 1) / 2;
    let (bx0, bx1) = (1 + c, we - 2 - c); // bx0 + bx1 == we - 1: mirror images
    let by0 = 1 + c + rng.gen_range(0..=1);
    let by1 = height - 2 - c - rng.gen_range(0..=1);

    let mut grid = OccupancyGrid::from_cells(
        width,
        height,
        DEFAULT_RESOLUTION,
        vec![1; width * height],
    )?;
    for iy in 1..height - 1 {
        for ix in 1..we - 1 {
            let in_block = ix >= bx0 && ix <= bx1 && iy >= by0 && iy <= by1;
            if !in_block {
                grid.set(ix, iy, false);
            }
        }
    }
    let sy = (1 + c as i64 / 2 + rng.gen_range(-1..=1)).clamp(1, by0 as i64 - 1) as usize;
    let gy = (height as i64 - 2 - c as i64 / 2 + rng.gen_range(-1..=1))
        .clamp(by1 as i64 + 1, height as i64 - 2) as usize;
    let start = grid.cell_center(cx, sy);
    let goal = grid.cell_center(cx, gy);

    // Both routes must exist: sealing either side corridor must leave the
    // scenario solvable through the other.
    let scenario = Scenario {
        kind: ScenarioKind::TJunction,
        seed,
        grid,
        start,
        goal,
    };
    for side in [Side::Left, Side::Right] {
        let mut sealed = scenario.grid.clone();
        let my = (by0 + by1) / 2;
        let (x_lo, x_hi) = match side {
            Side::Left => (1, bx0 - 1),
            Side::Right => (bx1 + 1, we - 2),
        };
        for x in x_lo..=x_hi {
            sealed.set(x, my, true);
        }
        if !cells_connected(&sealed, scenario.start_cell(), scenario.goal_cell()) {
            return Err(Error::Generation {
                kind: "t-junction",
                seed,
                reason: format!("{side:?} route missing"),
            });
        }
    }
    Ok(scenario)
}

/// A single corridor that staircases from the left edge to the right edge.
fn gen_corridor(seed: u64, width: usize, height: usize) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        ScenarioKind::Corridor.id(),
        seed,
        width as u64,
        height as u64,
    ]));
    let half = ((width.min(height) / 6).max(3) / 2).max(1); // corridor half-width
    let margin = half + 1;
    if width < 4 * margin || height < 4 * margin {
        return Err(Error::Generation {
            kind: "corridor",
            seed,
            reason: "grid too small for corridor margins".into(),
        });
    }
    let y_lo = margin as i64;
    let y_hi = (height - 1 - margin) as i64;

    // Axis-aligned centerline: alternate rightward and vertical runs.
    let mut centerline: Vec<(i64, i64)> = Vec::new();
    let mut x = margin as i64;
    let mut y = rng.gen_range(y_lo..=y_hi);
    centerline.push((x, y));
    let x_end = (width - 1 - margin) as i64;
    while x < x_end {
        let dx = rng.gen_range((width as i64 / 6).max(2)..=(width as i64 / 3).max(3));
        let nx = (x + dx).min(x_end);
        for step_x in x + 1..=nx {
            centerline.push((step_x, y));
        }
        x = nx;
        if x >= x_end {
            break;
        }
        let ny = rng.gen_range(y_lo..=y_hi);
        let dir = if ny > y { 1 } else { -1 };
        let mut cy = y;
        while cy != ny {
            cy += dir;
            centerline.push((x, cy));
        }
        y = ny;
    }

    let mut grid = OccupancyGrid::from_cells(
        width,
        height,
        DEFAULT_RESOLUTION,
        vec![1; width * height],
    )?;
    let h = half as i64;
    for &(cx, cy) in &centerline {
        for dy in -h..=h {
            for dx in -h..=h {
                let (nx, ny) = (cx + dx, cy + dy);
                if nx >= 1 && ny >= 1 && nx < (width - 1) as i64 && ny < (height - 1) as i64 {
                    grid.set(nx as usize, ny as usize, false);
                }
            }
        }
    }
    let (sx, sy) = centerline[0];
    let (gx, gy) = *centerline.last().unwrap();
    let start = grid.cell_center(sx as usize, sy as usize);
    let goal = grid.cell_center(gx as usize, gy as usize);
    Ok(Scenario {
        kind: ScenarioKind::Corridor,
        seed,
        grid,
        start,
        goal,
    })
}

fn gen_clutter(seed: u64, width: usize, height: usize) -> Result<Scenario> {
    const ATTEMPTS: u64 = 32;
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            ScenarioKind::Clutter.id(),
            seed,
            width as u64,
            height as u64,
            attempt,
        ]));
        let mut grid = OccupancyGrid::closed(width, height, DEFAULT_RESOLUTION)?;
        let start_cell = (2usize, 2usize);
        let goal_cell = (width - 3, height - 3);
        let n_obstacles = ((width * height) / 256).max(3);
        let max_side = (width.max(height) / 10).max(3);
        for _ in 0..n_obstacles {
            let w = rng.gen_range(2..=max_side);
            let h = rng.gen_range(2..=max_side);
            let x0 = rng.gen_range(1..width.saturating_sub(w + 1).max(2));
            let y0 = rng.gen_range(1..height.saturating_sub(h + 1).max(2));
            for y in y0..(y0 + h).min(height - 1) {
                for x in x0..(x0 + w).min(width - 1) {
                    // Keep a clear pocket around start and goal.
                    let near_start =
                        x.abs_diff(start_cell.0) <= 2 && y.abs_diff(start_cell.1) <= 2;
                    let near_goal = x.abs_diff(goal_cell.0) <= 2 && y.abs_diff(goal_cell.1) <= 2;
                    if !near_start && !near_goal {
                        grid.set(x, y, true);
                    }
                }
            }
        }
        if cells_connected(&grid, start_cell, goal_cell) {
            let start = grid.cell_center(start_cell.0, start_cell.1);
            let goal = grid.cell_center(goal_cell.0, goal_cell.1);
            return Ok(Scenario {
                kind: ScenarioKind::Clutter,
                seed,
                grid,
                start,
                goal,
            });
        }
    }
    Err(Error::Generation {
        kind: "clutter",
        seed,
        reason: format!("no connected layout within {ATTEMPTS} attempts"),
    })
}

// ---------------------------------------------------------------------------
// Grid planning
// ---------------------------------------------------------------------------

/// 8-connected neighbor moves. Diagonal moves are forbidden when either
/// orthogonally adjacent cell is occupied (no corner cutting).
const MOVES: [(i64, i64, f64); 8] = [
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT2),
    (1, -1, SQRT2),
    (-1, 1, SQRT2),
    (-1, -1, SQRT2),
];

pub(crate) fn neighbors(
    grid: &OccupancyGrid,
    ix: usize,
    iy: usize,
) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    MOVES.iter().filter_map(move |&(dx, dy, cost)| {
        let nx = ix as i64 + dx;
        let ny = iy as i64 + dy;
        if nx < 0 || ny < 0 || nx >= grid.width() as i64 || ny >= grid.height() as i64 {
            return None;
        }
        let (nx, ny) = (nx as usize, ny as usize);
        if grid.is_occupied(nx, ny) {
            return None;
        }
        if dx != 0 && dy != 0 {
            // No corner cutting: both orthogonal cells must be free.
            if grid.is_occupied(nx, iy) || grid.is_occupied(ix, ny) {
                return None;
            }
        }
        Some((nx, ny, cost))
    })
}

#[derive(PartialEq)]
struct AStarEntry {
    f: f64,
    h: f64,
    node: usize,
}

impl Eq for AStarEntry {}

impl Ord for AStarEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap via reversal: smallest f, then smallest h, then index.
        other
            .f
            .total_cmp(&self.f)
            .then(other.h.total_cmp(&self.h))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for AStarEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Deterministic A* over free cells; returns the cell path including both
/// endpoints, or `None` when disconnected. Costs are Euclidean cell steps.
pub fn astar_path(
    grid: &OccupancyGrid,
    from: (usize, usize),
    to: (usize, usize),
) -> Option<Vec<(usize, usize)>> {
    if grid.is_occupied(from.0, from.1) || grid.is_occupied(to.0, to.1) {
        return None;
    }
    let w = grid.width();
    let n = w * grid.height();
    let heur = |ix: usize, iy: usize| -> f64 {
        let dx = ix as f64 - to.0 as f64;
        let dy = iy as f64 - to.1 as f64;
        (dx * dx + dy * dy).sqrt()
    };
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let start_idx = from.1 * w + from.0;
    g[start_idx] = 0.0;
    heap.push(AStarEntry {
        f: heur(from.0, from.1),
        h: heur(from.0, from.1),
        node: start_idx,
    });
    while let Some(AStarEntry { node, .. }) = heap.pop() {
        if closed[node] {
            continue;
        }
        closed[node] = true;
        let (ix, iy) = (node % w, node / w);
        if (ix, iy) == to {
            let mut path = vec![(ix, iy)];
            let mut cur = node;
            while parent[cur] != usize::MAX {
                cur = parent[cur];
                path.push((cur % w, cur / w));
            }
            path.reverse();
            return Some(path);
        }
        for (nx, ny, cost) in neighbors(grid, ix, iy) {
            let ni = ny * w + nx;
            if closed[ni] {
                continue;
            }
            let cand = g[node] + cost;
            if cand < g[ni] {
                g[ni] = cand;
                parent[ni] = node;
                let h = heur(nx, ny);
                heap.push(AStarEntry {
                    f: cand + h,
                    h,
                    node: ni,
                });
            }
        }
    }
    None
}

/// Length of a cell path in meters (Euclidean steps times resolution).
pub fn cell_path_length(grid: &OccupancyGrid, path: &[(usize, usize)]) -> f64 {
    path.windows(2)
        .map(|w| {
            let dx = w[1].0 as f64 - w[0].0 as f64;
            let dy = w[1].1 as f64 - w[0].1 as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum::<f64>()
        * grid.resolution()
}

/// Free-space cells reachable from `from` under planner connectivity.
pub fn reachable_cells(grid: &OccupancyGrid, from: (usize, usize)) -> Vec<bool> {
    let w = grid.width();
    let mut seen = vec![false; w * grid.height()];
    if grid.is_occupied(from.0, from.1) {
        return seen;
    }
    let mut queue = std::collections::VecDeque::new();
    seen[from.1 * w + from.0] = true;
    queue.push_back(from);
    while let Some((ix, iy)) = queue.pop_front() {
        for (nx, ny, _) in neighbors(grid, ix, iy) {
            if !seen[ny * w + nx] {
                seen[ny * w + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    seen
}

pub fn cells_connected(grid: &OccupancyGrid, a: (usize, usize), b: (usize, usize)) -> bool {
    reachable_cells(grid, a)[b.1 * grid.width() + b.0]
}

/// Nearest free cell to a world point, searching outward by Chebyshev rings.
pub fn nearest_free_cell(grid: &OccupancyGrid, p: Point2) -> Option<(usize, usize)> {
    let res = grid.resolution();
    let cx = (p.x / res).floor().clamp(0.0, grid.width() as f64 - 1.0) as i64;
    let cy = (p.y / res).floor().clamp(0.0, grid.height() as f64 - 1.0) as i64;
    let max_r = grid.width().max(grid.height()) as i64;
    for r in 0..=max_r {
        let mut best: Option<((usize, usize), f64)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs().max(dy.abs()) != r {
                    continue;
                }
                let (nx, ny) = (cx + dx, cy + dy);
                if nx < 0 || ny < 0 || nx >= grid.width() as i64 || ny >= grid.height() as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if grid.is_free(nx, ny) {
                    let d = (grid.cell_center(nx, ny) - p).norm();
                    let better = match best {
                        None => true,
                        Some((_, bd)) => d < bd,
                    };
                    if better {
                        best = Some(((nx, ny), d));
                    }
                }
            }
        }
        if let Some((cell, _)) = best {
            return Some(cell);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Demonstrations and labels
// ---------------------------------------------------------------------------

/// Copy of `grid` with every occupied cell dilated by `radius` cells
/// (Chebyshev metric). Free cells of the result are free in `grid` too.
pub fn inflate_obstacles(grid: &OccupancyGrid, radius: usize) -> OccupancyGrid {
    let (w, h) = (grid.width(), grid.height());
    let mut out = grid.clone();
    if radius == 0 {
        return out;
    }
    let r = radius as i64;
    for iy in 0..h {
        for ix in 0..w {
            if grid.is_free(ix, iy) {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Grid used for planning demonstration routes: obstacles are inflated by the
/// largest radius (up to 2 cells) that still leaves the start and goal cells
/// free and connected, so demonstrations keep clearance from walls wherever
/// the world is wide enough. Falls back to the raw grid in tight worlds.
pub fn planning_grid(scenario: &Scenario) -> OccupancyGrid {
    let start = scenario.start_cell();
    let goal = scenario.goal_cell();
    for radius in (1..=2usize).rev() {
        let g = inflate_obstacles(&scenario.grid, radius);
        if g.is_free(start.0, start.1)
            && g.is_free(goal.0, goal.1)
            && cells_connected(&g, start, goal)
        {
            return g;
        }
    }
    scenario.grid.clone()
}

/// Expert demonstration paths as world-space polylines.
///
/// Each demonstration is a shortest grid path, optionally detoured through a
/// random via point drawn near the straight start-goal line with standard
/// deviation `noise` meters. `noise <= 0` yields `n_demos` copies of the
/// direct shortest path. The first/last vertices are the exact start/goal.
/// Routes are planned on [`planning_grid`] so they keep clearance from walls
/// when the world allows it; any such route is also valid on the raw grid.
pub fn demonstrations(scenario: &Scenario, n_demos: usize, noise: f64) -> Result<Vec<Vec<Point2>>> {
    if n_demos == 0 {
        return Err(Error::invalid("n_demos must be positive"));
    }
    let grid = &planning_grid(scenario);
    let direct = astar_path(grid, scenario.start_cell(), scenario.goal_cell()).ok_or_else(|| {
        let (sx, sy) = scenario.start_cell();
        let (gx, gy) = scenario.goal_cell();
        Error::NoPath(sx, sy, gx, gy)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        4,
        scenario.kind.id(),
        scenario.seed,
        n_demos as u64,
        noise.to_bits(),
    ]));
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid std-dev");

    let mut demos = Vec::with_capacity(n_demos);
    for _ in 0..n_demos {
        let cell_path = if noise <= 0.0 {
            direct.clone()
        } else {
            let mut found = None;
            for _ in 0..8 {
                let u: f64 = rng.gen_range(0.25..0.75);
                let base = scenario.start + (scenario.goal - scenario.start) * u;
                let via_pt = base + Point2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                let Some(via) = nearest_free_cell(grid, via_pt) else {
                    continue;
                };
                let Some(a) = astar_path(grid, scenario.start_cell(), via) else {
                    continue;
                };
                let Some(b) = astar_path(grid, via, scenario.goal_cell()) else {
                    continue;
                };
                let mut joined = a;
                joined.extend_from_slice(&b[1..]);
                found = Some(joined);
                break;
            }
            found.unwrap_or_else(|| direct.clone())
        };
        let mut pts: Vec<Point2> = cell_path
            .iter()
            .map(|&(ix, iy)| grid.cell_center(ix, iy))
            .collect();
        *pts.first_mut().unwrap() = scenario.start;
        *pts.last_mut().unwrap() = scenario.goal;
        demos.push(pts);
    }
    Ok(demos)
}

/// Scalar labels over the grid in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl LabelField {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.width + ix]
    }
}

/// Rasterizes demonstration polylines into binary labels: the traversed cells
/// dilated by a Chebyshev radius of one cell. Occupied cells are never
/// labeled.
pub fn rasterize_labels(scenario: &Scenario, demos: &[Vec<Point2>]) -> LabelField {
    let grid = &scenario.grid;
    let (w, h) = (grid.width(), grid.height());
    let mut values = vec![0.0; w * h];
    let mut mark = |ix: i64, iy: i64| {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (nx, ny) = (ix + dx, iy + dy);
                if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                    let (nx, ny) = (nx as usize, ny as usize);
                    if grid.is_free(nx, ny) {
                        values[ny * w + nx] = 1.0;
                    }
                }
            }
        }
    };
    // Waypoints that sit on cell centers pick up float noise in the meters
    // round trip; snapping them back to exact half-integers keeps the
    // supercover's corner-tie handling consistent, so mirror-image polylines
    // rasterize to mirror-image cells. The 0.1 µm snap radius is far below
    // any meaningful geometry.
    let to_cells = |p: Point2| -> Point2 {
        let snap = |v: f64| {
            let centered = v - 0.5;
            let rounded = centered.round();
            if (centered - rounded).abs() < 1e-6 {
                rounded + 0.5
            } else {
                v
            }
        };
        Point2::new(snap(p.x / grid.resolution()), snap(p.y / grid.resolution()))
    };
    for demo in demos {
        for seg in demo.windows(2) {
            for ((cx, cy), _) in segment_cells(to_cells(seg[0]), to_cells(seg[1])) {
                mark(cx, cy);
            }
        }
        if let Some((ix, iy)) = demo.first().and_then(|p| grid.cell_of(*p)) {
            mark(ix as i64, iy as i64);
        }
    }
    LabelField {
        width: w,
        height: h,
        values,
    }
}

/// Runs the grid planner `n_demos` times with randomized via points and
/// rasterizes the results into labels. See [`demonstrations`] and
/// [`rasterize_labels`].
pub fn synthesize_demonstrations(
    scenario: &Scenario,
    n_demos: usize,
    noise: f64,
) -> Result<LabelField> {
    let demos = demonstrations(scenario, n_demos, noise)?;
    Ok(rasterize_labels(scenario, &demos))
}

// ---------------------------------------------------------------------------
// Distance transform
// ---------------------------------------------------------------------------

/// Euclidean clearance field: distance in meters from each cell center to the
/// nearest occupied cell center (zero on occupied cells).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// Row-major distances, meters.
    pub values: Vec<f64>,
}

impl DistanceField {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.width + ix]
    }

    /// Bilinear interpolation of cell-center clearances; query points are
    /// clamped onto the cell-center lattice hull, so out-of-grid points read
    /// the nearest border value.
    pub fn query_clamped(&self, p: Point2) -> f64 {
        bilinear_clamped(
            &self.values,
            self.width,
            self.height,
            self.resolution,
            p,
        )
    }

    /// Gradient of the bilinear interpolant at `p` (piecewise constant per
    /// cell in each axis), meters of clearance per meter.
    pub fn gradient_clamped(&self, p: Point2) -> Point2 {
        bilinear_gradient_clamped(&self.values, self.width, self.height, self.resolution, p)
    }

    /// Builds a field directly from raw values (for tests and ablations).
    pub fn from_values(width: usize, height: usize, resolution: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid("distance field size mismatch"));
        }
        Ok(Self {
            width,
            height,
            resolution,
            values,
        })
    }
}

/// Shared bilinear interpolation over cell-center samples with clamping.
pub(crate) fn bilinear_clamped(
    values: &[f64],
    width: usize,
    height: usize,
    resolution: f64,
    p: Point2,
) -> f64 {
    let gx = (p.x / resolution - 0.5).clamp(0.0, (width - 1) as f64);
    let gy = (p.y / resolution - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (gx.floor() as usize).min(width.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(height.saturating_sub(2));
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let v00 = values[y0 * width + x0];
    let v10 = values[y0 * width + x1];
    let v01 = values[y1 * width + x0];
    let v11 = values[y1 * width + x1];
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

pub(crate) fn bilinear_gradient_clamped(
    values: &[f64],
    width: usize,
    height: usize,
    resolution: f64,
    p: Point2,
) -> Point2 {
    let gx = (p.x / resolution - 0.5).clamp(0.0, (width - 1) as f64);
    let gy = (p.y / resolution - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (gx.floor() as usize).min(width.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(height.saturating_sub(2));
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let v00 = values[y0 * width + x0];
    let v10 = values[y0 * width + x1];
    let v01 = values[y1 * width + x0];
    let v11 = values[y1 * width + x1];
    // d/dgx and d/dgy of the bilinear form, then chain through gx = x/res - 0.5.
    let dgx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
    let dgy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
    Point2::new(dgx / resolution, dgy / resolution)
}

/// Exact Euclidean distance transform (two-pass lower-envelope method on
/// squared distances). Runs in O(width * height).
pub fn distance_transform(grid: &OccupancyGrid) -> DistanceField {
    const FAR: f64 = 1e20;
    let (w, h) = (grid.width(), grid.height());
    // Pass 1: per column, squared distance to nearest occupied cell in y.
    let mut tmp = vec![FAR; w * h];
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for ix in 0..w {
        for iy in 0..h {
            col_in[iy] = if grid.is_occupied(ix, iy) { 0.0 } else { FAR };
        }
        dt_1d(&col_in, &mut col_out);
        for iy in 0..h {
            tmp[iy * w + ix] = col_out[iy];
        }
    }
    // Pass 2: per row over the column results.
    let mut values = vec![0.0; w * h];
    let mut row_in = vec![0.0; w];
    let mut row_out = vec![0.0; w];
    let cap = ((w * w + h * h) as f64).sqrt();
    for iy in 0..h {
        row_in.copy_from_slice(&tmp[iy * w..(iy + 1) * w]);
        dt_1d(&row_in, &mut row_out);
        for ix in 0..w {
            let d = row_out[ix].sqrt().min(cap);
            values[iy * w + ix] = d * grid.resolution();
        }
    }
    DistanceField {
        width: w,
        height: h,
        resolution: grid.resolution(),
        values,
    }
}

/// 1-D squared-distance transform via the lower envelope of parabolas.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = (q as f64 - p as f64).powi(2) + f[p];
    }
}

// ---------------------------------------------------------------------------
// Segment traversal (supercover)
// ---------------------------------------------------------------------------

/// Cells visited by the segment from `a` to `b`, both in cell-space
/// coordinates (world meters divided by resolution), with the entry parameter
/// `t` in `[0, 1)` at which the segment enters each cell. Exact grid
/// traversal; never skips a crossed cell. Cell indices may be negative or
/// exceed the grid when the segment leaves it.
pub fn segment_cells(a: Point2, b: Point2) -> Vec<((i64, i64), f64)> {
    let d = b - a;
    let mut cx = a.x.floor() as i64;
    let mut cy = a.y.floor() as i64;
    let mut out = vec![((cx, cy), 0.0)];
    if d.x == 0.0 && d.y == 0.0 {
        return out;
    }
    let step_x: i64 = if d.x > 0.0 { 1 } else { -1 };
    let step_y: i64 = if d.y > 0.0 { 1 } else { -1 };
    let t_delta_x = if d.x != 0.0 { 1.0 / d.x.abs() } else { f64::INFINITY };
    let t_delta_y = if d.y != 0.0 { 1.0 / d.y.abs() } else { f64::INFINITY };
    let mut t_max_x = if d.x > 0.0 {
        ((cx + 1) as f64 - a.x) / d.x
    } else if d.x < 0.0 {
        (cx as f64 - a.x) / d.x
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if d.y > 0.0 {
        ((cy + 1) as f64 - a.y) / d.y
    } else if d.y < 0.0 {
        (cy as f64 - a.y) / d.y
    } else {
        f64::INFINITY
    };
    loop {
        let t;
        if t_max_x < t_max_y {
            t = t_max_x;
            cx += step_x;
            t_max_x += t_delta_x;
        } else if t_max_y < t_max_x {
            t = t_max_y;
            cy += step_y;
            t_max_y += t_delta_y;
        } else {
            // Exact corner crossing: advance both axes (diagonal step).
            t = t_max_x;
            cx += step_x;
            cy += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        }
        if t >= 1.0 {
            break;
        }
        out.push(((cx, cy), t));
    }
    out
}

// ---------------------------------------------------------------------------
// Route classification for two-corridor worlds
// ---------------------------------------------------------------------------

/// Which side of the central obstacle a route passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

/// Bounding box (x0, x1, y0, y1) of free-standing occupied cells — those not
/// 4-connected to the border walls — or `None` when every occupied cell is
/// part of the perimeter structure.
pub fn interior_obstacle_bbox(grid: &OccupancyGrid) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (grid.width(), grid.height());
    // Occupied cells 4-connected to the border belong to the perimeter
    // structure, not to a free-standing obstacle; flood them out first.
    let mut perimeter = vec![false; w * h];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut seed = |ix: usize, iy: usize, stack: &mut Vec<(usize, usize)>| {
        if grid.is_occupied(ix, iy) && !perimeter[iy * w + ix] {
            perimeter[iy * w + ix] = true;
            stack.push((ix, iy));
        }
    };
    for ix in 0..w {
        seed(ix, 0, &mut stack);
        seed(ix, h - 1, &mut stack);
    }
    for iy in 0..h {
        seed(0, iy, &mut stack);
        seed(w - 1, iy, &mut stack);
    }
    while let Some((ix, iy)) = stack.pop() {
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if grid.is_occupied(nx, ny) && !perimeter[ny * w + nx] {
                perimeter[ny * w + nx] = true;
                stack.push((nx, ny));
            }
        }
    }
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for iy in 1..h - 1 {
        for ix in 1..w - 1 {
            if grid.is_occupied(ix, iy) && !perimeter[iy * w + ix] {
                bbox = Some(match bbox {
                    None => (ix, ix, iy, iy),
                    Some((x0, x1, y0, y1)) => (x0.min(ix), x1.max(ix), y0.min(iy), y1.max(iy)),
                });
            }
        }
    }
    bbox
}

/// Classifies a world-space route by the side on which it passes the interior
/// obstacle: the majority sign of `x - center_x` over points whose `y` falls
/// within the obstacle's vertical span. `None` when the world has no interior
/// obstacle or the route never flanks it.
pub fn route_side(grid: &OccupancyGrid, points: &[Point2]) -> Option<Side> {
    let (x0, x1, y0, y1) = interior_obstacle_bbox(grid)?;
    let res = grid.resolution();
    let (y_lo, y_hi) = (y0 as f64 * res, (y1 + 1) as f64 * res);
    let center_x = (x0 as f64 + x1 as f64 + 1.0) / 2.0 * res;
    let mut balance = 0i64;
    for p in points {
        if p.y >= y_lo && p.y <= y_hi {
            balance += if p.x < center_x { -1 } else { 1 };
        }
    }
    match balance {
        0 => None,
        b if b < 0 => Some(Side::Left),
        _ => Some(Side::Right),
    }
}
