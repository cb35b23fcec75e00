//! Success-probability field estimation.
//!
//! Given demonstration labels `y` over a grid, the field `F` minimizes the
//! discrete quadratic energy
//!
//! ```text
//!   E(F) = sum_free (F - y)^2  +  mu * sum_pairs (F_i - F_j)^2
//!        + nu * sum_free (Lg F)^2
//! ```
//!
//! where `Lg` is the 5-point grid Laplacian in positive-semidefinite graph
//! form: missing neighbors outside the grid contribute nothing (Neumann outer
//! boundary) while occupied neighbors are read as zero (Dirichlet pins).
//! Stencils are in cell units; `mu` and `nu` are therefore interpreted at the
//! grid's resolution. The unique minimizer solves the SPD system
//!
//! ```text
//!   (I + mu Lg + nu Lg^2) F = y          (free cells; F = 0 on occupied)
//! ```
//!
//! solved matrix-free by conjugate gradients or by a dense LU factorization
//! for small grids. Field values are clamped to `[0, 1]` at query time; raw
//! solution values are kept internally so the energy identity stays exact.

use crate::error::{Error, Result};
use crate::trajectory::Point2;
use crate::world::{bilinear_clamped, LabelField, OccupancyGrid};
use serde::{Deserialize, Serialize};

/// Default gradient penalty weight.
pub const DEFAULT_MU: f64 = 1.0;
/// Default curvature penalty weight.
pub const DEFAULT_NU: f64 = 0.05;
/// Default residual tolerance (infinity norm).
pub const DEFAULT_TOL: f64 = 1e-8;

/// Linear system solver selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    /// Matrix-free conjugate gradients (any grid size).
    Cg,
    /// Dense LU factorization; limited to small systems.
    Direct,
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cg" => Ok(SolverMethod::Cg),
            "direct" => Ok(SolverMethod::Direct),
            other => Err(Error::invalid(format!("unknown solver `{other}`"))),
        }
    }
}

/// Options for [`solve_field`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub method: SolverMethod,
    /// Residual tolerance in the infinity norm.
    pub tol: f64,
    /// Iteration cap for CG; `None` chooses `10 n + 100`.
    pub max_iter: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Cg,
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

/// A solved success field over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessField {
    width: usize,
    height: usize,
    resolution: f64,
    /// Raw (unclamped) solution values over all cells; zero on occupied.
    values: Vec<f64>,
    occupied: Vec<bool>,
    mu: f64,
    nu: f64,
}

impl SuccessField {
    /// Builds a field directly from values (tests, ablations). Values on
    /// occupied cells are forced to zero.
    pub fn from_values(
        width: usize,
        height: usize,
        resolution: f64,
        mut values: Vec<f64>,
        occupied: Vec<bool>,
        mu: f64,
        nu: f64,
    ) -> Result<Self> {
        if values.len() != width * height || occupied.len() != width * height {
            return Err(Error::invalid("field size mismatch"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        for (v, &occ) in values.iter_mut().zip(&occupied) {
            if occ {
                *v = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            resolution,
            values,
            occupied,
            mu,
            nu,
        })
    }

    /// All-free field with a constant value (test helper).
    pub fn uniform(width: usize, height: usize, resolution: f64, value: f64) -> Result<Self> {
        Self::from_values(
            width,
            height,
            resolution,
            vec![value; width * height],
            vec![false; width * height],
            0.0,
            0.0,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Raw (unclamped) values, row-major.
    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.occupied[iy * self.width + ix]
    }

    /// Clamped field value at a cell center.
    pub fn value_at_cell(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.width + ix].clamp(0.0, 1.0)
    }

    /// Bilinear interpolation of cell-center values, clamped to `[0, 1]`.
    /// Errors when the point lies outside the world rectangle.
    pub fn query(&self, p: Point2) -> Result<f64> {
        let (w, h) = (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        );
        if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h {
            return Err(Error::OutOfBounds(p.x, p.y));
        }
        Ok(self.query_clamped(p))
    }

    /// As [`SuccessField::query`] but clamping out-of-range points onto the
    /// lattice hull instead of failing.
    pub fn query_clamped(&self, p: Point2) -> f64 {
        bilinear_clamped(&self.values, self.width, self.height, self.resolution, p)
            .clamp(0.0, 1.0)
    }
}

/// Free-cell indexing and the matrix-free grid Laplacian.
struct FreeSystem<'a> {
    grid: &'a OccupancyGrid,
    /// free-cell ordinal per cell index, or `usize::MAX` when occupied.
    free_of_cell: Vec<usize>,
    /// cell index per free-cell ordinal.
    cells: Vec<usize>,
    mu: f64,
    nu: f64,
}

impl<'a> FreeSystem<'a> {
    fn new(grid: &'a OccupancyGrid, mu: f64, nu: f64) -> Self {
        let n = grid.width() * grid.height();
        let mut free_of_cell = vec![usize::MAX; n];
        let mut cells = Vec::new();
        for iy in 0..grid.height() {
            for ix in 0..grid.width() {
                if grid.is_free(ix, iy) {
                    free_of_cell[iy * grid.width() + ix] = cells.len();
                    cells.push(iy * grid.width() + ix);
                }
            }
        }
        Self {
            grid,
            free_of_cell,
            cells,
            mu,
            nu,
        }
    }

    fn n(&self) -> usize {
        self.cells.len()
    }

    /// `out = Lg x`: for each free cell, (number of in-grid 4-neighbors) * x_i
    /// minus the sum over free 4-neighbors (occupied neighbors read as zero).
    fn apply_lap(&self, x: &[f64], out: &mut [f64]) {
        let (w, h) = (self.grid.width() as i64, self.grid.height() as i64);
        for (i, &cell) in self.cells.iter().enumerate() {
            let ix = (cell % self.grid.width()) as i64;
            let iy = (cell / self.grid.width()) as i64;
            let mut acc = 0.0;
            let mut degree = 0.0;
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (ix + dx, iy + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue; // Neumann: no flux across the outer boundary
                }
                degree += 1.0;
                let nf = self.free_of_cell[ny as usize * self.grid.width() + nx as usize];
                if nf != usize::MAX {
                    acc += x[nf];
                }
            }
            out[i] = degree * x[i] - acc;
        }
    }

    /// `out = (I + mu Lg + nu Lg^2) x`.
    fn apply(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        self.apply_lap(x, scratch);
        if self.nu != 0.0 {
            self.apply_lap(scratch, out);
            for i in 0..x.len() {
                out[i] = x[i] + self.mu * scratch[i] + self.nu * out[i];
            }
        } else {
            for i in 0..x.len() {
                out[i] = x[i] + self.mu * scratch[i];
            }
        }
    }
}

/// Solves the field system for the given labels and penalty weights.
///
/// Preconditions: label dimensions match the grid, label values lie in
/// `[0, 1]` and are zero on occupied cells, `mu, nu >= 0`.
pub fn solve_field(
    grid: &OccupancyGrid,
    labels: &LabelField,
    mu: f64,
    nu: f64,
    options: SolveOptions,
) -> Result<SuccessField> {
    if labels.width != grid.width() || labels.height != grid.height() {
        return Err(Error::invalid("label dimensions do not match the grid"));
    }
    if !(mu.is_finite() && nu.is_finite() && mu >= 0.0 && nu >= 0.0) {
        return Err(Error::invalid("penalty weights must be finite and non-negative"));
    }
    if !(options.tol.is_finite() && options.tol > 0.0) {
        return Err(Error::invalid("solver tolerance must be positive"));
    }
    for iy in 0..grid.height() {
        for ix in 0..grid.width() {
            let y = labels.value(ix, iy);
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::invalid(format!(
                    "label at ({ix},{iy}) out of [0,1]: {y}"
                )));
            }
            if grid.is_occupied(ix, iy) && y != 0.0 {
                return Err(Error::invalid(format!(
                    "occupied cell ({ix},{iy}) carries a non-zero label"
                )));
            }
        }
    }

    let sys = FreeSystem::new(grid, mu, nu);
    let b: Vec<f64> = sys
        .cells
        .iter()
        .map(|&cell| labels.values[cell])
        .collect();
    let x = match options.method {
        SolverMethod::Cg => solve_cg(&sys, &b, &options)?,
        SolverMethod::Direct => solve_direct(&sys, &b, &options)?,
    };

    let mut values = vec![0.0; grid.width() * grid.height()];
    for (i, &cell) in sys.cells.iter().enumerate() {
        values[cell] = x[i];
    }
    let occupied = (0..values.len())
        .map(|c| grid.is_occupied(c % grid.width(), c / grid.width()))
        .collect();
    SuccessField::from_values(
        grid.width(),
        grid.height(),
        grid.resolution(),
        values,
        occupied,
        mu,
        nu,
    )
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

fn solve_cg(sys: &FreeSystem, b: &[f64], options: &SolveOptions) -> Result<Vec<f64>> {
    let n = sys.n();
    if n == 0 {
        return Ok(Vec::new());
    }
    let max_iter = options.max_iter.unwrap_or(10 * n + 100);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let mut iterations = 0;
    while inf_norm(&r) > options.tol && iterations < max_iter {
        sys.apply(&p, &mut ap, &mut scratch);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap.is_finite() && pap > 0.0) {
            return Err(Error::NonFinite("conjugate gradient curvature"));
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
        iterations += 1;
    }
    // Recompute the true residual; the recurrence can drift.
    sys.apply(&x, &mut ap, &mut scratch);
    let residual = inf_norm(
        &ap.iter()
            .zip(b)
            .map(|(axi, bi)| axi - bi)
            .collect::<Vec<_>>(),
    );
    if !residual.is_finite() || residual > options.tol {
        return Err(Error::SolverDiverged {
            residual,
            iterations,
            tol: options.tol,
        });
    }
    Ok(x)
}

/// Dense LU solve. Capped at 3000 unknowns; build the matrix by applying the
/// operator to unit vectors.
fn solve_direct(sys: &FreeSystem, b: &[f64], options: &SolveOptions) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let n = sys.n();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > 3000 {
        return Err(Error::invalid(format!(
            "direct solver limited to 3000 free cells, got {n}; use the cg solver"
        )));
    }
    let mut a = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        sys.apply(&e, &mut col, &mut scratch);
        for i in 0..n {
            a[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let bv = DVector::from_column_slice(b);
    let lu = a.clone().lu();
    let x = lu
        .solve(&bv)
        .ok_or(Error::NonFinite("dense field system is singular"))?;
    let residual = (&a * &x - &bv).abs().max();
    if !residual.is_finite() || residual > options.tol {
        return Err(Error::SolverDiverged {
            residual,
            iterations: 1,
            tol: options.tol,
        });
    }
    Ok(x.iter().cloned().collect())
}

/// Evaluates the discrete field energy for arbitrary (raw) field values.
///
/// This is exactly the quadratic form minimized by [`solve_field`]: fidelity
/// over free cells, `mu` times squared differences over adjacent in-grid cell
/// pairs (occupied cells read as zero), and `nu` times the squared grid
/// Laplacian over free cells.
pub fn field_energy(field: &SuccessField, labels: &LabelField) -> f64 {
    let (w, h) = (field.width, field.height);
    assert_eq!(labels.width, w);
    assert_eq!(labels.height, h);
    let val = |ix: usize, iy: usize| -> f64 {
        if field.occupied[iy * w + ix] {
            0.0
        } else {
            field.values[iy * w + ix]
        }
    };
    let mut fidelity = 0.0;
    let mut grad = 0.0;
    let mut curvature = 0.0;
    for iy in 0..h {
        for ix in 0..w {
            if !field.occupied[iy * w + ix] {
                let d = field.values[iy * w + ix] - labels.value(ix, iy);
                fidelity += d * d;
                // 5-point Laplacian with Neumann outer boundary, Dirichlet pins.
                let mut degree = 0.0;
                let mut acc = 0.0;
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    degree += 1.0;
                    acc += val(nx as usize, ny as usize);
                }
                let lap = degree * field.values[iy * w + ix] - acc;
                curvature += lap * lap;
            }
            // Unordered adjacent pairs: right and down neighbors.
            if ix + 1 < w {
                let d = val(ix, iy) - val(ix + 1, iy);
                grad += d * d;
            }
            if iy + 1 < h {
                let d = val(ix, iy) - val(ix, iy + 1);
                grad += d * d;
            }
        }
    }
    fidelity + field.mu * grad + field.nu * curvature
}

/// Ridge-regression head mapping per-cell geometric features to labels.
///
/// An optional, non-normative way to produce label estimates from scenario
/// geometry (clearance and distance to the straight start-goal segment); the
/// demonstration-label solve remains the source of truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLabelHead {
    /// Weights over [1, clearance, clearance^2, segment distance].
    pub weights: [f64; 4],
}

fn head_features(p: Point2, clearance: f64, start: Point2, goal: Point2) -> [f64; 4] {
    // Distance from p to the straight start-goal segment.
    let d = goal - start;
    let len2 = d.norm_squared();
    let t = if len2 > 0.0 {
        ((p - start).dot(&d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let seg_dist = (p - (start + d * t)).norm();
    [1.0, clearance, clearance * clearance, seg_dist]
}

/// Fits the head on free cells by ridge regression (normal equations).
pub fn fit_label_head(
    scenario: &crate::world::Scenario,
    labels: &LabelField,
    distances: &crate::world::DistanceField,
) -> Result<LinearLabelHead> {
    use nalgebra::{Matrix4, Vector4};
    let grid = &scenario.grid;
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for iy in 0..grid.height() {
        for ix in 0..grid.width() {
            if grid.is_occupied(ix, iy) {
                continue;
            }
            let f = head_features(
                grid.cell_center(ix, iy),
                distances.value(ix, iy),
                scenario.start,
                scenario.goal,
            );
            let fv = Vector4::from_column_slice(&f);
            ata += fv * fv.transpose();
            atb += fv * labels.value(ix, iy);
        }
    }
    ata += Matrix4::identity() * 1e-6;
    let w = ata
        .lu()
        .solve(&atb)
        .ok_or(Error::NonFinite("label head normal equations"))?;
    Ok(LinearLabelHead {
        weights: [w[0], w[1], w[2], w[3]],
    })
}

/// Predicts clamped labels from the fitted head (zero on occupied cells).
pub fn predict_labels(
    head: &LinearLabelHead,
    scenario: &crate::world::Scenario,
    distances: &crate::world::DistanceField,
) -> LabelField {
    let grid = &scenario.grid;
    let mut values = vec![0.0; grid.width() * grid.height()];
    for iy in 0..grid.height() {
        for ix in 0..grid.width() {
            if grid.is_occupied(ix, iy) {
                continue;
            }
            let f = head_features(
                grid.cell_center(ix, iy),
                distances.value(ix, iy),
                scenario.start,
                scenario.goal,
            );
            let v: f64 = f.iter().zip(&head.weights).map(|(a, b)| a * b).sum();
            values[iy * grid.width() + ix] = v.clamp(0.0, 1.0);
        }
    }
    LabelField {
        width: grid.width(),
        height: grid.height(),
        values,
    }
}
