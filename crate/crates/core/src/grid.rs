//! Truncated log-cylinder discretization of the two-punctured sphere.
//!
//! Coordinates are `x = -log r ∈ [-X, X]` and the periodic angle `y ∈ [0, 2π)`.
//! The puncture at the origin sits at `x = +∞`, the one at infinity at
//! `x = -∞`; truncating at `±X` realizes the complement of two punctured
//! disks of radius `ρ = e^{-X}`. The background metric is `E(x,y)(dx²+dy²)`
//! for a positive conformal density `E`, and the Laplace-Beltrami operator is
//! `Δ_φ = E^{-1}(∂_x² + ∂_y²)`.

use crate::error::{Error, Result};
use crate::linalg::C64;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Truncated cylinder grid. Nodes `(i, j)`, `0 ≤ i ≤ nx`, `0 ≤ j < ny`, at
/// `x_i = -X + i·dx`, `y_j = j·dy` with `dx = 2X/nx`, `dy = 2π/ny`. Rows
/// `i = 0` and `i = nx` are the boundary circles; y wraps periodically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderGrid {
    pub x_half: f64,
    pub nx: usize,
    pub ny: usize,
}

impl CylinderGrid {
    pub fn dx(&self) -> f64 {
        2.0 * self.x_half / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        TWO_PI / self.ny as f64
    }

    /// Number of x-nodes including the two boundary rows.
    pub fn nodes_x(&self) -> usize {
        self.nx + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_x() * self.ny
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.x_half + i as f64 * self.dx()
    }

    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.dy()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    #[inline]
    pub fn jp(&self, j: usize) -> usize {
        if j + 1 == self.ny {
            0
        } else {
            j + 1
        }
    }

    #[inline]
    pub fn jm(&self, j: usize) -> usize {
        if j == 0 {
            self.ny - 1
        } else {
            j - 1
        }
    }
}

/// Validated grid constructor: X > 1, nx ≥ 8, ny ≥ 8 and even.
pub fn build_grid(x_half: f64, nx: usize, ny: usize) -> Result<CylinderGrid> {
    let mut problems = Vec::new();
    if !(x_half > 1.0) {
        problems.push(format!("x_half must be > 1, got {x_half}"));
    }
    if nx < 8 {
        problems.push(format!("nx must be >= 8, got {nx}"));
    }
    if ny < 8 || ny % 2 != 0 {
        problems.push(format!("ny must be even and >= 8, got {ny}"));
    }
    if problems.is_empty() {
        Ok(CylinderGrid { x_half, nx, ny })
    } else {
        Err(Error::BadDimensions(problems.join("; ")))
    }
}

/// Real scalar data on a grid, node-major (x outer, y inner).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: CylinderGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: CylinderGrid) -> Self {
        ScalarField {
            grid,
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn from_fn(grid: CylinderGrid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut v = Vec::with_capacity(grid.node_count());
        for i in 0..grid.nodes_x() {
            for j in 0..grid.ny {
                v.push(f(grid.x(i), grid.y(j)));
            }
        }
        ScalarField { grid, values: v }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Conformal density presets for the background metric `E(x)(dx²+dy²)`.
///
/// Fubini-Study pulls back to `E = sech²x` (total volume 4π); the Loftin-type
/// family dampens it by `(1+x²)^{-q/2}`; a custom table is interpolated
/// linearly in x and extended by its end values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConformalPreset {
    FubiniStudy,
    LoftinType { q: f64 },
    CustomTable { xs: Vec<f64>, values: Vec<f64> },
}

impl ConformalPreset {
    fn eval(&self, x: f64) -> f64 {
        match self {
            ConformalPreset::FubiniStudy => sech2(x),
            ConformalPreset::LoftinType { q } => sech2(x) * (1.0 + x * x).powf(-q / 2.0),
            ConformalPreset::CustomTable { xs, values } => {
                if xs.is_empty() {
                    return f64::NAN;
                }
                if x <= xs[0] {
                    return values[0];
                }
                if x >= xs[xs.len() - 1] {
                    return values[values.len() - 1];
                }
                let k = xs.partition_point(|&t| t <= x).min(xs.len() - 1);
                let (x0, x1) = (xs[k - 1], xs[k]);
                let (v0, v1) = (values[k - 1], values[k]);
                v0 + (v1 - v0) * (x - x0) / (x1 - x0)
            }
        }
    }

    /// E ≡ 1 window, useful for exercising the flat-metric closed forms.
    pub fn flat_window() -> Self {
        ConformalPreset::CustomTable {
            xs: vec![-1.0, 1.0],
            values: vec![1.0, 1.0],
        }
    }
}

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

/// Sample the conformal density on the grid; every value must be positive.
pub fn conformal_factor(preset: &ConformalPreset, grid: CylinderGrid) -> Result<ScalarField> {
    if let ConformalPreset::LoftinType { q } = preset {
        if *q < 0.0 {
            return Err(Error::DomainError(format!("loftin-type q must be >= 0, got {q}")));
        }
    }
    if let ConformalPreset::CustomTable { xs, values } = preset {
        if xs.len() != values.len() || xs.len() < 2 {
            return Err(Error::NonPositive(
                "custom-table needs at least two (x, value) pairs".into(),
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::NonPositive("custom-table xs must be increasing".into()));
        }
    }
    let f = ScalarField::from_fn(grid, |x, _| preset.eval(x));
    if f.values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NonPositive(
            "conformal factor must be positive at every node".into(),
        ));
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy)]
pub enum Tail<'a> {
    None,
    Analytic(&'a ConformalPreset),
}

/// Trapezoid quadrature of ∫E dx dy; with an analytic tail the preset's mass
/// beyond ±X is added in closed form (high-order quadrature where no closed
/// form exists; custom tables carry no tail).
pub fn volume(e: &ScalarField, tail: Tail) -> f64 {
    let mut v = trapezoid(e);
    if let Tail::Analytic(preset) = tail {
        v += TWO_PI * tail_mass(preset, e.grid.x_half);
    }
    v
}

fn tail_mass(preset: &ConformalPreset, x_half: f64) -> f64 {
    match preset {
        // ∫_{|x|>X} sech² dx = 2(1 - tanh X)
        ConformalPreset::FubiniStudy => 2.0 * (1.0 - x_half.tanh()),
        ConformalPreset::LoftinType { .. } => {
            // symmetric integrand; Simpson on [X, X+40] is exact to machine
            // precision against the e^{-2x} decay
            2.0 * simpson(|x| preset.eval(x), x_half, x_half + 40.0, 4000)
        }
        ConformalPreset::CustomTable { .. } => 0.0,
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Trapezoid weights in x (periodic full weights in y).
pub fn trapezoid(f: &ScalarField) -> f64 {
    let g = f.grid;
    let mut s = 0.0;
    for i in 0..g.nodes_x() {
        let w = if i == 0 || i == g.nx { 0.5 } else { 1.0 };
        let mut row = 0.0;
        for j in 0..g.ny {
            row += f.at(i, j);
        }
        s += w * row;
    }
    s * g.dx() * g.dy()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityWeight {
    /// Weight by the conformal density: ∫ f E dx dy (a dν-integral).
    Conformal,
    /// Conformally invariant densities integrate with weight 1.
    Invariant,
}

pub fn integrate_density(f: &ScalarField, e: &ScalarField, weight: DensityWeight) -> f64 {
    match weight {
        DensityWeight::Invariant => trapezoid(f),
        DensityWeight::Conformal => {
            let mut prod = f.clone();
            for (p, w) in prod.values.iter_mut().zip(e.values.iter()) {
                *p *= w;
            }
            trapezoid(&prod)
        }
    }
}

/// Flat Laplacian ∂_x² + ∂_y²: central stencil inside, one-sided second-order
/// at the x-ends, periodic in y.
pub fn laplacian_apply(f: &ScalarField) -> ScalarField {
    let g = f.grid;
    let (dx2, dy2) = (g.dx() * g.dx(), g.dy() * g.dy());
    let mut out = ScalarField::zeros(g);
    let nx = g.nx;
    for i in 0..=nx {
        for j in 0..g.ny {
            let fxx = if i == 0 {
                (2.0 * f.at(0, j) - 5.0 * f.at(1, j) + 4.0 * f.at(2, j) - f.at(3, j)) / dx2
            } else if i == nx {
                (2.0 * f.at(nx, j) - 5.0 * f.at(nx - 1, j) + 4.0 * f.at(nx - 2, j)
                    - f.at(nx - 3, j))
                    / dx2
            } else {
                (f.at(i - 1, j) - 2.0 * f.at(i, j) + f.at(i + 1, j)) / dx2
            };
            let fyy = (f.at(i, g.jm(j)) - 2.0 * f.at(i, j) + f.at(i, g.jp(j))) / dy2;
            out.values[g.idx(i, j)] = fxx + fyy;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bc {
    /// u = 0 on both boundary circles.
    DirichletZero,
    /// Zero-flux ends with the constant mode pinned by zero average;
    /// requires ∫rhs ≈ 0 within the given absolute tolerance.
    MeanZero { tol: f64 },
}

/// FFT-in-y, tridiagonal-in-x solver for `(∂_x² + ∂_y² - s) u = rhs` on the
/// cylinder. Plans are cached per grid.
pub struct SpectralSolver {
    grid: CylinderGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// discrete -∂_y² eigenvalue per Fourier mode
    msq: Vec<f64>,
}

impl SpectralSolver {
    pub fn new(grid: CylinderGrid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.ny);
        let inv = planner.plan_fft_inverse(grid.ny);
        let dy2 = grid.dy() * grid.dy();
        let msq = (0..grid.ny)
            .map(|k| (2.0 - 2.0 * (TWO_PI * k as f64 / grid.ny as f64).cos()) / dy2)
            .collect();
        SpectralSolver { grid, fwd, inv, msq }
    }

    pub fn grid(&self) -> CylinderGrid {
        self.grid
    }

    /// Solve ∂²u = rhs with the requested boundary handling.
    pub fn poisson(&self, rhs: &ScalarField, bc: Bc) -> Result<ScalarField> {
        let g = self.grid;
        if rhs.grid != g {
            return Err(Error::BadDimensions("rhs grid mismatch".into()));
        }
        let mut data: Vec<C64> = rhs.values.iter().map(|&v| C64::new(v, 0.0)).collect();
        match bc {
            Bc::DirichletZero => self.solve_modes(&mut data, 0.0, XBc::Dirichlet),
            Bc::MeanZero { tol } => {
                let total = trapezoid(rhs);
                let l1 = trapezoid(&ScalarField {
                    grid: g,
                    values: rhs.values.iter().map(|v| v.abs()).collect(),
                });
                if total.abs() > tol * l1.max(1.0) {
                    return Err(Error::NotSolvable(format!(
                        "mean-zero Poisson problem with |∫rhs| = {:.3e} (tol {:.3e})",
                        total.abs(),
                        tol * l1.max(1.0)
                    )));
                }
                self.solve_modes(&mut data, 0.0, XBc::NeumannMeanZero);
            }
        }
        let mut out = ScalarField::zeros(g);
        for (o, z) in out.values.iter_mut().zip(data.iter()) {
            *o = z.re;
        }
        if let Bc::MeanZero { .. } = bc {
            let area = 2.0 * g.x_half * TWO_PI;
            let mean = trapezoid(&out) / area;
            for v in out.values.iter_mut() {
                *v -= mean;
            }
        }
        Ok(out)
    }

    /// Solve (∂² - s)·δ = rhs for one complex field with δ = 0 at the x-ends,
    /// in place. Used by the semi-implicit flow stepper.
    pub fn helmholtz_dirichlet(&self, data: &mut [C64], s: f64) {
        assert_eq!(data.len(), self.grid.node_count());
        self.solve_modes(data, s, XBc::Dirichlet);
    }

    fn solve_modes(&self, data: &mut [C64], shift: f64, xbc: XBc) {
        let g = self.grid;
        let (nxn, ny) = (g.nodes_x(), g.ny);
        let dx2 = g.dx() * g.dx();
        // forward FFT along y, row by row
        let mut row = vec![Complex64::new(0.0, 0.0); ny];
        let mut modes = vec![C64::new(0.0, 0.0); nxn * ny]; // mode-major [k][i]
        for i in 0..nxn {
            row.copy_from_slice(&data[i * ny..(i + 1) * ny]);
            self.fwd.process(&mut row);
            for k in 0..ny {
                modes[k * nxn + i] = row[k];
            }
        }
        let mut diag = vec![0.0f64; nxn];
        let mut sub = vec![0.0f64; nxn];
        let mut sup = vec![0.0f64; nxn];
        let mut rhsbuf = vec![C64::new(0.0, 0.0); nxn];
        for k in 0..ny {
            let lam = self.msq[k] + shift;
            let m = &mut modes[k * nxn..(k + 1) * nxn];
            match xbc {
                XBc::Dirichlet => {
                    // boundary rows: identity with zero data
                    diag[0] = 1.0;
                    sup[0] = 0.0;
                    diag[nxn - 1] = 1.0;
                    sub[nxn - 1] = 0.0;
                    rhsbuf[0] = C64::new(0.0, 0.0);
                    rhsbuf[nxn - 1] = C64::new(0.0, 0.0);
                    for i in 1..nxn - 1 {
                        sub[i] = 1.0 / dx2;
                        diag[i] = -2.0 / dx2 - lam;
                        sup[i] = 1.0 / dx2;
                        rhsbuf[i] = m[i];
                    }
                    thomas(&sub, &mut diag, &sup, &mut rhsbuf, nxn);
                    m.copy_from_slice(&rhsbuf);
                }
                XBc::NeumannMeanZero => {
                    if lam.abs() < 1e-300 {
                        // singular constant mode: make consistent, pin u_0 = 0
                        let mut wsum = C64::new(0.0, 0.0);
                        let mut wtot = 0.0;
                        for (i, z) in m.iter().enumerate() {
                            let w = if i == 0 || i == nxn - 1 { 0.5 } else { 1.0 };
                            wsum += w * z;
                            wtot += w;
                        }
                        let c = wsum / wtot;
                        for z in m.iter_mut() {
                            *z -= c;
                        }
                        // unknowns u_1..u_{nx}; u_0 = 0
                        let nsub = nxn - 1;
                        for i in 0..nsub {
                            let gi = i + 1;
                            if gi < nxn - 1 {
                                sub[i] = 1.0 / dx2;
                                diag[i] = -2.0 / dx2;
                                sup[i] = 1.0 / dx2;
                                rhsbuf[i] = m[gi];
                            } else {
                                sub[i] = 2.0 / dx2;
                                diag[i] = -2.0 / dx2;
                                sup[i] = 0.0;
                                rhsbuf[i] = m[gi];
                            }
                        }
                        if nsub > 0 {
                            sub[0] = if nsub == 1 { 2.0 / dx2 } else { 1.0 / dx2 };
                        }
                        thomas(&sub, &mut diag, &sup, &mut rhsbuf, nsub);
                        m[0] = C64::new(0.0, 0.0);
                        for i in 0..nsub {
                            m[i + 1] = rhsbuf[i];
                        }
                    } else {
                        // mirrored Neumann rows
                        diag[0] = -2.0 / dx2 - lam;
                        sup[0] = 2.0 / dx2;
                        rhsbuf[0] = m[0];
                        for i in 1..nxn - 1 {
                            sub[i] = 1.0 / dx2;
                            diag[i] = -2.0 / dx2 - lam;
                            sup[i] = 1.0 / dx2;
                            rhsbuf[i] = m[i];
                        }
                        sub[nxn - 1] = 2.0 / dx2;
                        diag[nxn - 1] = -2.0 / dx2 - lam;
                        rhsbuf[nxn - 1] = m[nxn - 1];
                        thomas(&sub, &mut diag, &sup, &mut rhsbuf, nxn);
                        m.copy_from_slice(&rhsbuf);
                    }
                }
            }
        }
        // inverse FFT along y
        let scale = 1.0 / ny as f64;
        for i in 0..nxn {
            for k in 0..ny {
                row[k] = modes[k * nxn + i];
            }
            self.inv.process(&mut row);
            for j in 0..ny {
                data[i * ny + j] = row[j] * scale;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum XBc {
    Dirichlet,
    NeumannMeanZero,
}

/// Thomas algorithm; `diag` and `rhs` are clobbered, solution left in `rhs`.
fn thomas(sub: &[f64], diag: &mut [f64], sup: &[f64], rhs: &mut [C64], n: usize) {
    for i in 1..n {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= w * prev;
    }
    rhs[n - 1] /= diag[n - 1];
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] = (rhs[i] - sup[i] * next) / diag[i];
    }
}

/// One-shot convenience wrapper around [`SpectralSolver::poisson`].
pub fn poisson_solve(rhs: &ScalarField, bc: Bc) -> Result<ScalarField> {
    SpectralSolver::new(rhs.grid).poisson(rhs, bc)
}
