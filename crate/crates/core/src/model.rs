//! The explicit model metric near the punctures, its unitary-frame
//! connection, and gauge transforms between frames.
//!
//! Three frames are in play on the cylinder:
//!
//! * **parabolic** (the construction frame): the flat connection reads
//!   `∇ = d + P(x) dx + B dy` with `P = ⊕ p_ℓ(x) I` carrying the parabolic
//!   weights (`p_ℓ → w⁰_ℓ` as `x → +X`, `p_ℓ → -w^∞_ℓ` as `x → -X`) and
//!   `B = ⊕ (κ_ℓ I + N_ℓ)` the constant Jordan residue anchored at the zero
//!   puncture. The model metric is the diagonal
//!   `H₀ = e^u · ⊕ diag(λ_α(t))`, `λ_α(t) = ((d-α)!/(α-1)!) t^{2α-(d+1)}`.
//! * **temporal**: the weight factors are gauged away, `∇ = d + B dy`.
//! * **unitary** (the PDE frame): the gauge `σ = H₀^{-1/2}` turns `H₀` into
//!   the identity; `∇ = d + Ω` with `Ω` block-diagonal, and the dual flat
//!   connection is `∇̂⁰ = d - Ω†`.
//!
//! Between the ends the power `t` and the weights are spliced with smooth
//! bumps supported in `|x| ∈ [2,3]`, keeping `t > 1` everywhere; the metric
//! is a Poisson metric (`K(H₀) = cI`) outside that band and the band residual
//! is absorbed by the heat flow.

use crate::bundle::{nilpotent_weights, FlatBundleSpec};
use crate::error::{Error, Result};
use crate::grid::{
    conformal_factor, trapezoid, volume, Bc, ConformalPreset, CylinderGrid, ScalarField,
    SpectralSolver, Tail,
};
use crate::linalg::{commutator_into, inverse_into, mul_into, CMat, C64, ONE, ZERO};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Temporal,
    Parabolic,
    Unitary,
}

/// n×n complex matrix data per grid node (node-major, row-major entries).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub grid: CylinderGrid,
    pub frame: Frame,
    pub n: usize,
    pub values: Vec<C64>,
}

/// Hermitian positive definite matrix per node.
pub type MetricField = MatrixField;
/// General endomorphism data per node.
pub type EndomorphismField = MatrixField;

impl MatrixField {
    pub fn zeros(grid: CylinderGrid, frame: Frame, n: usize) -> Self {
        MatrixField {
            grid,
            frame,
            n,
            values: vec![ZERO; grid.node_count() * n * n],
        }
    }

    pub fn identity(grid: CylinderGrid, frame: Frame, n: usize) -> Self {
        let mut f = MatrixField::zeros(grid, frame, n);
        for node in 0..grid.node_count() {
            for k in 0..n {
                f.values[node * n * n + k * n + k] = ONE;
            }
        }
        f
    }

    pub fn from_fn(
        grid: CylinderGrid,
        frame: Frame,
        n: usize,
        mut f: impl FnMut(usize, usize) -> CMat,
    ) -> Self {
        let mut out = MatrixField::zeros(grid, frame, n);
        for i in 0..grid.nodes_x() {
            for j in 0..grid.ny {
                out.set_mat(i, j, &f(i, j));
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[C64] {
        let nn = self.n * self.n;
        let base = self.grid.idx(i, j) * nn;
        &self.values[base..base + nn]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [C64] {
        let nn = self.n * self.n;
        let base = self.grid.idx(i, j) * nn;
        &mut self.values[base..base + nn]
    }

    pub fn mat(&self, i: usize, j: usize) -> CMat {
        CMat {
            n: self.n,
            a: self.at(i, j).to_vec(),
        }
    }

    pub fn set_mat(&mut self, i: usize, j: usize, m: &CMat) {
        self.at_mut(i, j).copy_from_slice(&m.a);
    }

    /// Max over nodes of the Frobenius distance to `other`.
    pub fn sup_distance(&self, other: &MatrixField) -> f64 {
        let nn = self.n * self.n;
        self.values
            .chunks(nn)
            .zip(other.values.chunks(nn))
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Smallest Hermitian eigenvalue over all nodes.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.grid.nodes_x() {
            for j in 0..self.grid.ny {
                let (vals, _) = self.mat(i, j).eigh();
                m = m.min(vals[0]);
            }
        }
        m
    }

    /// Max over nodes of the deviation from Hermitian symmetry.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for chunk in self.values.chunks(n * n) {
            for r in 0..n {
                for c in 0..n {
                    worst = worst.max((chunk[r * n + c] - chunk[c * n + r].conj()).norm());
                }
            }
        }
        worst
    }
}

/// A pair of matrix coefficients (dx and dy components): connections and
/// endomorphism-valued one-forms.
#[derive(Debug, Clone, PartialEq)]
pub struct PairField {
    pub x: MatrixField,
    pub y: MatrixField,
}

pub type ConnectionField = PairField;
pub type OneFormField = PairField;

impl PairField {
    pub fn frame(&self) -> Frame {
        self.x.frame
    }
    pub fn n(&self) -> usize {
        self.x.n
    }
    pub fn grid(&self) -> CylinderGrid {
        self.x.grid
    }
}

// ---------------------------------------------------------------------------
// Blend profiles.
// ---------------------------------------------------------------------------

/// Septic smoothstep: 0 for s ≤ 0, 1 for s ≥ 1, C³ at both ends.
fn smoothstep(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        let s4 = s * s * s * s;
        s4 * (35.0 - 84.0 * s + 70.0 * s * s - 20.0 * s * s * s)
    }
}

fn smoothstep_d(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        let s3 = s * s * s;
        s3 * (140.0 - 420.0 * s + 420.0 * s * s - 140.0 * s3)
    }
}

/// ∫₀ˢ smoothstep, continued linearly past 1.
fn smoothstep_i(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        0.5 + (s - 1.0)
    } else {
        let s5 = s.powi(5);
        s5 * (7.0 - 14.0 * s + 10.0 * s * s - 2.5 * s * s * s)
    }
}

pub const BLEND_LO: f64 = 2.0;
pub const BLEND_HI: f64 = 3.0;

/// Ramp 0 → 1 across x ∈ [2, 3].
pub fn chi_plus(x: f64) -> f64 {
    smoothstep(x - BLEND_LO)
}

fn chi_plus_d(x: f64) -> f64 {
    smoothstep_d(x - BLEND_LO)
}

/// ∫₀ˣ chi_plus.
fn chi_plus_i(x: f64) -> f64 {
    smoothstep_i(x - BLEND_LO)
}

/// The smooth |log r| profile: `t(x) = |x|` for `|x| ≥ 3`, an even quadratic
/// core `2 + x²/6` for `|x| ≤ 2`, spliced in between. Always > 1.
pub fn t_profile(x: f64) -> f64 {
    let xi = x.abs();
    let core = 2.0 + x * x / 6.0;
    if xi >= BLEND_HI {
        xi
    } else if xi <= BLEND_LO {
        core
    } else {
        let s = smoothstep(xi - BLEND_LO);
        s * xi + (1.0 - s) * core
    }
}

pub fn t_profile_dx(x: f64) -> f64 {
    let xi = x.abs();
    let sg = if x >= 0.0 { 1.0 } else { -1.0 };
    if xi >= BLEND_HI {
        sg
    } else if xi <= BLEND_LO {
        x / 3.0
    } else {
        let s = smoothstep(xi - BLEND_LO);
        let ds = smoothstep_d(xi - BLEND_LO);
        let core = 2.0 + xi * xi / 6.0;
        sg * (ds * (xi - core) + s + (1.0 - s) * (xi / 3.0))
    }
}

/// Weight profile of block ℓ: `p_ℓ(x) = w⁰_ℓ χ₊(x) - w^∞_ℓ χ₊(-x)`.
pub fn weight_profile(w_zero: f64, w_inf: f64, x: f64) -> f64 {
    w_zero * chi_plus(x) - w_inf * chi_plus(-x)
}

fn weight_profile_dx(w_zero: f64, w_inf: f64, x: f64) -> f64 {
    w_zero * chi_plus_d(x) + w_inf * chi_plus_d(-x)
}

/// ∫₀ˣ p_ℓ.
fn weight_profile_i(w_zero: f64, w_inf: f64, x: f64) -> f64 {
    w_zero * chi_plus_i(x) + w_inf * chi_plus_i(-x)
}

// ---------------------------------------------------------------------------
// Closed-form block model.
// ---------------------------------------------------------------------------

/// Diagonal entries of the size-d block model at `t = |log r| > 1`:
/// `λ_α = ((d-α)!/(α-1)!) · t^{2α-(d+1)}`. Their product is 1.
pub fn block_model_lambdas(d: usize, t: f64) -> Result<Vec<f64>> {
    if !(t > 1.0) {
        return Err(Error::DomainError(format!(
            "block model needs t > 1, got {t}"
        )));
    }
    let taus = nilpotent_weights(d);
    Ok((1..=d)
        .map(|alpha| {
            let num = factorial(d - alpha);
            let den = factorial(alpha - 1);
            (num / den) * t.powi(taus[alpha - 1] as i32)
        })
        .collect())
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Max finite-difference residual of the model recursion
/// `∂_t² log λ_α = λ_α/λ_{α+1} - λ_{α-1}/λ_α` over uniformly spaced radial
/// samples (spacing `dt`). For the closed form this is the discretization
/// error of the stencil.
pub fn model_ode_residual(lambda_rows: &[Vec<f64>], dt: f64) -> f64 {
    let m = lambda_rows.len();
    if m < 3 {
        return 0.0;
    }
    let d = lambda_rows[0].len();
    let mut worst = 0.0f64;
    for s in 1..m - 1 {
        for a in 0..d {
            let lm = lambda_rows[s - 1][a].ln();
            let l0 = lambda_rows[s][a].ln();
            let lp = lambda_rows[s + 1][a].ln();
            let dd = (lm - 2.0 * l0 + lp) / (dt * dt);
            let up = if a + 1 < d {
                lambda_rows[s][a] / lambda_rows[s][a + 1]
            } else {
                0.0
            };
            let dn = if a > 0 {
                lambda_rows[s][a - 1] / lambda_rows[s][a]
            } else {
                0.0
            };
            worst = worst.max((dd - (up - dn)).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Model geometry: everything derived from (bundle, grid, preset).
// ---------------------------------------------------------------------------

/// The assembled background data for one scenario: conformal density, the
/// conformal twist `u`, the Poisson constant, the model metric in the
/// parabolic frame, the unitary-frame connection `Ω` and the numerically
/// differenced curvature `K(H₀)`.
#[derive(Debug, Clone)]
pub struct ModelGeometry {
    pub bundle: FlatBundleSpec,
    pub grid: CylinderGrid,
    pub preset: ConformalPreset,
    pub e_field: ScalarField,
    /// Analytic-tail volume used for the Poisson constant.
    pub volume: f64,
    /// π·deg/(rank·Vol): the unique constant compatible with the conformal
    /// factor equation.
    pub c_raw: f64,
    /// Effective constant after absorbing the truncation defect; the flow
    /// targets this one. `K(H₀) = c·I` holds outside the blend band.
    pub c: f64,
    pub u: ScalarField,
    pub h0_parabolic: MetricField,
    /// Unitary-frame connection Ω (dx and dy coefficients).
    pub conn: ConnectionField,
    /// Dual flat connection -Ω† in the unitary frame.
    pub conn_hat: ConnectionField,
    /// Ψ(H₀) = -½(Ω + Ω†) in the unitary frame.
    pub psi0: OneFormField,
    /// K(H₀) in the unitary frame, by the same stencils the flow uses.
    pub k0: MatrixField,
}

impl ModelGeometry {
    pub fn build(
        bundle: &FlatBundleSpec,
        grid: CylinderGrid,
        preset: &ConformalPreset,
    ) -> Result<ModelGeometry> {
        if grid.x_half < BLEND_HI {
            return Err(Error::DomainError(format!(
                "grid half-length {} too short for the blend band [|x| in [{}, {}]]",
                grid.x_half, BLEND_LO, BLEND_HI
            )));
        }
        let e_field = conformal_factor(preset, grid)?;
        let vol = volume(&e_field, Tail::Analytic(preset));
        let n = bundle.rank;
        let deg = crate::bundle::parabolic_degree(bundle, None);
        let c_raw = std::f64::consts::PI * deg / (n as f64 * vol);
        let (u, c) = solve_conformal_factor(bundle, &e_field, c_raw)?;

        let h0_parabolic = build_model_metric_with_u(bundle, grid, &u)?;
        let conn = unitary_connection_with_u(bundle, grid, &u);
        let conn_hat = dual_connection(&conn);
        let psi0 = psi_of_connection(&conn);
        let k0 = covariant_divergence_scaled(&conn, &psi0, &e_field, -0.5);
        Ok(ModelGeometry {
            bundle: bundle.clone(),
            grid,
            preset: preset.clone(),
            e_field,
            volume: vol,
            c_raw,
            c,
            u,
            h0_parabolic,
            conn,
            conn_hat,
            psi0,
            k0,
        })
    }

    /// Pointwise Frobenius norm of K(H₀) - cI.
    pub fn model_residual(&self) -> ScalarField {
        let n = self.bundle.rank;
        let mut out = ScalarField::zeros(self.grid);
        for i in 0..self.grid.nodes_x() {
            for j in 0..self.grid.ny {
                let k = self.k0.at(i, j);
                let mut s = 0.0;
                for r in 0..n {
                    for cc in 0..n {
                        let v = if r == cc {
                            k[r * n + cc] - C64::new(self.c, 0.0)
                        } else {
                            k[r * n + cc]
                        };
                        s += v.norm_sqr();
                    }
                }
                out.values[self.grid.idx(i, j)] = s.sqrt();
            }
        }
        out
    }

    /// Diagonal gauge from the parabolic frame to `to`, evaluated at node
    /// (i, j): frame_to = frame_parabolic · σ.
    fn sigma_from_parabolic(&self, to: Frame, i: usize, j: usize) -> CMat {
        let n = self.bundle.rank;
        match to {
            Frame::Parabolic => CMat::identity(n),
            Frame::Unitary => {
                // H₀^{-1/2}
                let x = self.grid.x(i);
                let t = t_profile(x);
                let eu = (-0.5 * self.u.at(i, j)).exp();
                let mut m = CMat::zeros(n);
                let mut base = 0;
                for (l, b) in self.bundle.zero.blocks.iter().enumerate() {
                    let lam = block_model_lambdas(b.dim, t).expect("t > 1 by construction");
                    let _ = l;
                    for a in 0..b.dim {
                        m[(base + a, base + a)] = C64::new(eu / lam[a].sqrt(), 0.0);
                    }
                    base += b.dim;
                }
                m
            }
            Frame::Temporal => {
                // exp(-∫₀ˣ P)
                let x = self.grid.x(i);
                let mut m = CMat::zeros(n);
                let mut base = 0;
                for (l, b) in self.bundle.zero.blocks.iter().enumerate() {
                    let (wz, wi) = self.bundle.weight_pair(l);
                    let f = (-weight_profile_i(wz, wi, x)).exp();
                    for a in 0..b.dim {
                        m[(base + a, base + a)] = C64::new(f, 0.0);
                    }
                    base += b.dim;
                }
                m
            }
        }
    }

    /// Transform a metric field between frames: H ↦ σ† H σ with the diagonal
    /// gauge σ relating the frames. Round trips reproduce the input to
    /// rounding.
    pub fn gauge_transform_metric(&self, field: &MetricField, to: Frame) -> Result<MetricField> {
        if field.grid != self.grid {
            return Err(Error::BadDimensions("metric grid mismatch".into()));
        }
        let from = field.frame;
        if from == to {
            return Ok(field.clone());
        }
        let n = field.n;
        let mut out = MatrixField::zeros(self.grid, to, n);
        for i in 0..self.grid.nodes_x() {
            for j in 0..self.grid.ny {
                // σ(from→to) = σ(par→from)^{-1} σ(par→to); all gauges diagonal
                let sf = self.sigma_from_parabolic(from, i, j);
                let st = self.sigma_from_parabolic(to, i, j);
                let mut sigma = CMat::zeros(n);
                for k in 0..n {
                    sigma[(k, k)] = st[(k, k)] / sf[(k, k)];
                }
                let h = field.mat(i, j);
                let m = sigma.adjoint().mul(&h).mul(&sigma);
                out.set_mat(i, j, &m);
            }
        }
        Ok(out)
    }

    /// Transform an endomorphism field: T ↦ σ^{-1} T σ.
    pub fn gauge_transform_endomorphism(
        &self,
        field: &EndomorphismField,
        to: Frame,
    ) -> Result<EndomorphismField> {
        if field.grid != self.grid {
            return Err(Error::BadDimensions("field grid mismatch".into()));
        }
        let from = field.frame;
        if from == to {
            return Ok(field.clone());
        }
        let n = field.n;
        let mut out = MatrixField::zeros(self.grid, to, n);
        for i in 0..self.grid.nodes_x() {
            for j in 0..self.grid.ny {
                let sf = self.sigma_from_parabolic(from, i, j);
                let st = self.sigma_from_parabolic(to, i, j);
                let t = field.mat(i, j);
                let mut m = CMat::zeros(n);
                for r in 0..n {
                    for cc in 0..n {
                        // σ^{-1} T σ with diagonal σ
                        let s = (sf[(r, r)] / st[(r, r)]) * (st[(cc, cc)] / sf[(cc, cc)]);
                        m[(r, cc)] = t[(r, cc)] * s;
                    }
                }
                out.set_mat(i, j, &m);
            }
        }
        Ok(out)
    }

    /// Transform a connection field with the affine rule
    /// Γ ↦ σ^{-1} Γ σ + σ^{-1} dσ (dσ analytic for the Λ- and weight-factors,
    /// discrete central differences for the u-factor).
    pub fn gauge_transform_connection(
        &self,
        field: &ConnectionField,
        to: Frame,
    ) -> Result<ConnectionField> {
        if field.grid() != self.grid {
            return Err(Error::BadDimensions("connection grid mismatch".into()));
        }
        let from = field.frame();
        if from == to {
            return Ok(field.clone());
        }
        let n = field.n();
        let mut out_x = MatrixField::zeros(self.grid, to, n);
        let mut out_y = MatrixField::zeros(self.grid, to, n);
        let du = discrete_gradient(&self.u);
        for i in 0..self.grid.nodes_x() {
            for j in 0..self.grid.ny {
                let sf = self.sigma_from_parabolic(from, i, j);
                let st = self.sigma_from_parabolic(to, i, j);
                let x = self.grid.x(i);
                // log σ(par→F) derivative, diagonal, per frame
                let dlog = |frame: Frame, r: usize| -> (f64, f64) {
                    match frame {
                        Frame::Parabolic => (0.0, 0.0),
                        Frame::Temporal => {
                            let l = self.block_of(r);
                            let (wz, wi) = self.bundle.weight_pair(l);
                            (-weight_profile(wz, wi, x), 0.0)
                        }
                        Frame::Unitary => {
                            let (l, a) = self.block_and_slot(r);
                            let d = self.bundle.zero.blocks[l].dim;
                            let tau = (2 * (a + 1)) as f64 - (d as f64 + 1.0);
                            let t = t_profile(x);
                            let dt = t_profile_dx(x);
                            (
                                -0.5 * du.0.at(i, j) - 0.5 * tau * dt / t,
                                -0.5 * du.1.at(i, j),
                            )
                        }
                    }
                };
                let gx = field.x.mat(i, j);
                let gy = field.y.mat(i, j);
                let mut mx = CMat::zeros(n);
                let mut my = CMat::zeros(n);
                for r in 0..n {
                    for cc in 0..n {
                        let s = (sf[(r, r)] / st[(r, r)]) * (st[(cc, cc)] / sf[(cc, cc)]);
                        mx[(r, cc)] = gx[(r, cc)] * s;
                        my[(r, cc)] = gy[(r, cc)] * s;
                    }
                    // σ^{-1}dσ, with σ = σ_from^{-1} σ_to diagonal:
                    // d log σ = d log σ_to - d log σ_from
                    let (tx, ty) = dlog(to, r);
                    let (fxx, fy) = dlog(from, r);
                    mx[(r, r)] += C64::new(tx - fxx, 0.0);
                    my[(r, r)] += C64::new(ty - fy, 0.0);
                }
                out_x.set_mat(i, j, &mx);
                out_y.set_mat(i, j, &my);
            }
        }
        Ok(PairField { x: out_x, y: out_y })
    }

    fn block_of(&self, global: usize) -> usize {
        let mut base = 0;
        for (l, b) in self.bundle.zero.blocks.iter().enumerate() {
            if global < base + b.dim {
                return l;
            }
            base += b.dim;
        }
        unreachable!()
    }

    fn block_and_slot(&self, global: usize) -> (usize, usize) {
        let mut base = 0;
        for (l, b) in self.bundle.zero.blocks.iter().enumerate() {
            if global < base + b.dim {
                return (l, global - base);
            }
            base += b.dim;
        }
        unreachable!()
    }

    /// Gram matrix of `H₀` in the parabolic frame at node (i,j) without the
    /// conformal factor e^u (the "hat" model).
    pub fn lambda_diag(&self, i: usize) -> Vec<f64> {
        let t = t_profile(self.grid.x(i));
        let mut diag = Vec::with_capacity(self.bundle.rank);
        for b in &self.bundle.zero.blocks {
            diag.extend(block_model_lambdas(b.dim, t).expect("t > 1"));
        }
        diag
    }
}

/// Conformal twist: solves `Δu = (2/n) w̄'(x) - 4cE` (the trace part of the
/// Poisson condition for `H₀ = e^u Ĥ`), after projecting the truncation
/// defect onto the conformal density. The defect shifts the constant:
/// returns `(u, c_effective)`. Errors with NotSolvable when the supplied
/// constant is grossly inconsistent with the bundle degree.
pub fn solve_conformal_factor(
    bundle: &FlatBundleSpec,
    e_field: &ScalarField,
    c: f64,
) -> Result<(ScalarField, f64)> {
    let grid = e_field.grid;
    let n = bundle.rank as f64;
    let mut rhs = ScalarField::zeros(grid);
    for i in 0..grid.nodes_x() {
        let x = grid.x(i);
        let mut wbar_dx = 0.0;
        for (l, b) in bundle.zero.blocks.iter().enumerate() {
            let (wz, wi) = bundle.weight_pair(l);
            wbar_dx += b.dim as f64 * weight_profile_dx(wz, wi, x);
        }
        for j in 0..grid.ny {
            rhs.values[grid.idx(i, j)] =
                (2.0 / n) * wbar_dx - 4.0 * c * e_field.at(i, j);
        }
    }
    // compatibility: the defect must be a small multiple of the density
    let total = trapezoid(&rhs);
    let e_total = trapezoid(e_field);
    let beta = total / e_total;
    if beta.abs() / 4.0 > 5e-3 * (1.0 + c.abs()) {
        return Err(Error::NotSolvable(format!(
            "conformal-factor equation has mean defect {:.3e}; the constant {c} \
             is inconsistent with the bundle degree",
            total
        )));
    }
    for (r, e) in rhs.values.iter_mut().zip(e_field.values.iter()) {
        *r -= beta * e;
    }
    let solver = SpectralSolver::new(grid);
    let u = solver.poisson(&rhs, Bc::MeanZero { tol: 1e-6 })?;
    Ok((u, c + beta / 4.0))
}

/// The model metric `H₀ = e^u ⊕ diag λ_α(t(x))` in the parabolic frame.
pub fn build_model_metric_with_u(
    bundle: &FlatBundleSpec,
    grid: CylinderGrid,
    u: &ScalarField,
) -> Result<MetricField> {
    if grid.x_half < BLEND_HI {
        return Err(Error::DomainError(format!(
            "grid half-length {} cannot fit the blend band",
            grid.x_half
        )));
    }
    let n = bundle.rank;
    let mut out = MatrixField::zeros(grid, Frame::Parabolic, n);
    for i in 0..grid.nodes_x() {
        let t = t_profile(grid.x(i));
        let mut diag = Vec::with_capacity(n);
        for b in &bundle.zero.blocks {
            diag.extend(block_model_lambdas(b.dim, t)?);
        }
        for j in 0..grid.ny {
            let eu = u.at(i, j).exp();
            let m = out.at_mut(i, j);
            for k in 0..n {
                m[k * n + k] = C64::new(eu * diag[k], 0.0);
            }
        }
    }
    Ok(out)
}

/// Unitary-frame connection coefficients `Ω_x, Ω_y`. Per block (size d,
/// weight pair (w⁰, w^∞), eigenvalue κ):
///
/// * `Ω_x` diagonal: `p_ℓ(x) - ½∂_x u - τ_α t'/(2t)`,
/// * `Ω_y`: diagonal `κ_ℓ - ½∂_y u`, super-diagonal `√(α(d-α))/t`.
///
/// The u-derivatives are the discrete central differences of the grid `u`.
pub fn unitary_connection_with_u(
    bundle: &FlatBundleSpec,
    grid: CylinderGrid,
    u: &ScalarField,
) -> ConnectionField {
    let n = bundle.rank;
    let (dux, duy) = discrete_gradient(u);
    let mut out_x = MatrixField::zeros(grid, Frame::Unitary, n);
    let mut out_y = MatrixField::zeros(grid, Frame::Unitary, n);
    for i in 0..grid.nodes_x() {
        let x = grid.x(i);
        let t = t_profile(x);
        let dt = t_profile_dx(x);
        for j in 0..grid.ny
        {
            let ux = dux.at(i, j);
            let uy = duy.at(i, j);
            let mx = out_x.at_mut(i, j);
            let mut base = 0;
            for (l, b) in bundle.zero.blocks.iter().enumerate() {
                let d = b.dim;
                let (wz, wi) = bundle.weight_pair(l);
                let p = weight_profile(wz, wi, x);
                let taus = nilpotent_weights(d);
                for a in 0..d {
                    let row = base + a;
                    mx[row * n + row] =
                        C64::new(p - 0.5 * ux - 0.5 * taus[a] as f64 * dt / t, 0.0);
                }
                base += d;
            }
            let my = out_y.at_mut(i, j);
            let mut base = 0;
            for (l, b) in bundle.zero.blocks.iter().enumerate() {
                let d = b.dim;
                let kappa = bundle.zero.blocks[l].kappa;
                for a in 0..d {
                    let row = base + a;
                    my[row * n + row] = kappa - C64::new(0.5 * uy, 0.0);
                    if a + 1 < d {
                        let s = ((a + 1) as f64 * (d - a - 1) as f64).sqrt() / t;
                        my[row * n + (row + 1)] = C64::new(s, 0.0);
                    }
                }
                base += d;
            }
        }
    }
    PairField { x: out_x, y: out_y }
}

/// Ψ(H₀) = -½(Ω + Ω†) in the unitary frame.
pub fn psi_of_connection(conn: &ConnectionField) -> OneFormField {
    let n = conn.n();
    let half = |m: &MatrixField| {
        let mut out = m.clone();
        for chunk in out.values.chunks_mut(n * n) {
            let orig: Vec<C64> = chunk.to_vec();
            for r in 0..n {
                for c in 0..n {
                    chunk[r * n + c] = -0.5 * (orig[r * n + c] + orig[c * n + r].conj());
                }
            }
        }
        out
    };
    PairField {
        x: half(&conn.x),
        y: half(&conn.y),
    }
}

/// Discrete gradient of a scalar field: central in the interior, one-sided
/// second order at the x-ends, periodic in y.
pub fn discrete_gradient(f: &ScalarField) -> (ScalarField, ScalarField) {
    let g = f.grid;
    let (dx, dy) = (g.dx(), g.dy());
    let mut fx = ScalarField::zeros(g);
    let mut fy = ScalarField::zeros(g);
    let nx = g.nx;
    for i in 0..=nx {
        for j in 0..g.ny {
            fx.values[g.idx(i, j)] = if i == 0 {
                (-3.0 * f.at(0, j) + 4.0 * f.at(1, j) - f.at(2, j)) / (2.0 * dx)
            } else if i == nx {
                (3.0 * f.at(nx, j) - 4.0 * f.at(nx - 1, j) + f.at(nx - 2, j)) / (2.0 * dx)
            } else {
                (f.at(i + 1, j) - f.at(i - 1, j)) / (2.0 * dx)
            };
            fy.values[g.idx(i, j)] = (f.at(i, g.jp(j)) - f.at(i, g.jm(j))) / (2.0 * dy);
        }
    }
    (fx, fy)
}

/// `scale · E^{-1} Σ_i ∇_i(ψ_i)` with `∇_i T = D_i T + [Γ_i, T]`: the
/// covariant divergence entering every curvature formula. Central
/// differences inside, one-sided second order at the x-ends.
pub fn covariant_divergence_scaled(
    conn: &ConnectionField,
    pair: &PairField,
    e_field: &ScalarField,
    scale: f64,
) -> MatrixField {
    let g = conn.grid();
    let n = conn.n();
    let nn = n * n;
    let (dx, dy) = (g.dx(), g.dy());
    let mut out = MatrixField::zeros(g, conn.frame(), n);
    let mut dxt = vec![ZERO; nn];
    let mut dyt = vec![ZERO; nn];
    let mut comm = vec![ZERO; nn];
    let nx = g.nx;
    for i in 0..=nx {
        for j in 0..g.ny {
            // D_x ψ_x
            if i == 0 {
                let a = pair.x.at(0, j);
                let b = pair.x.at(1, j);
                let c = pair.x.at(2, j);
                for k in 0..nn {
                    dxt[k] = (-3.0 * a[k] + 4.0 * b[k] - c[k]) / (2.0 * dx);
                }
            } else if i == nx {
                let a = pair.x.at(nx, j);
                let b = pair.x.at(nx - 1, j);
                let c = pair.x.at(nx - 2, j);
                for k in 0..nn {
                    dxt[k] = (3.0 * a[k] - 4.0 * b[k] + c[k]) / (2.0 * dx);
                }
            } else {
                let a = pair.x.at(i + 1, j);
                let b = pair.x.at(i - 1, j);
                for k in 0..nn {
                    dxt[k] = (a[k] - b[k]) / (2.0 * dx);
                }
            }
            // D_y ψ_y (periodic)
            let a = pair.y.at(i, g.jp(j));
            let b = pair.y.at(i, g.jm(j));
            for k in 0..nn {
                dyt[k] = (a[k] - b[k]) / (2.0 * dy);
            }
            let o = {
                let base = g.idx(i, j) * nn;
                &mut out.values[base..base + nn]
            };
            for k in 0..nn {
                o[k] = dxt[k] + dyt[k];
            }
            commutator_into(n, conn.x.at(i, j), pair.x.at(i, j), &mut comm);
            for k in 0..nn {
                o[k] += comm[k];
            }
            commutator_into(n, conn.y.at(i, j), pair.y.at(i, j), &mut comm);
            for k in 0..nn {
                o[k] += comm[k];
            }
            let f = scale / e_field.at(i, j);
            for k in 0..nn {
                o[k] *= f;
            }
        }
    }
    out
}

/// `scale · E^{-1} Σ_i ∇_i(h^{-1} ∇̂⁰_i h)` in compact (staggered-flux) form:
/// the flux `T_i = h^{-1}(D_i h + [Γ̂⁰_i, h])` is evaluated at half-points
/// with averaged `h` and connection coefficients, and the outer covariant
/// divergence contracts adjacent fluxes. The 3-point coverage in each
/// direction damps the grid's odd-even mode, which the wide composite of two
/// central differences cannot see. Second-order in the interior; the two
/// boundary rows (where h is pinned anyway) use a one-sided variant.
pub fn compact_h_divergence(
    conn: &ConnectionField,
    conn_hat: &ConnectionField,
    h: &MatrixField,
    e_field: &ScalarField,
    scale: f64,
) -> MatrixField {
    let g = h.grid;
    let n = h.n;
    let nn = n * n;
    let (dx, dy) = (g.dx(), g.dy());
    let nxn = g.nodes_x();
    let mut out = MatrixField::zeros(g, h.frame, n);

    let mut hmid = vec![ZERO; nn];
    let mut gmid = vec![ZERO; nn];
    let mut grad = vec![ZERO; nn];
    let mut comm = vec![ZERO; nn];
    let mut hinv = vec![ZERO; nn];
    let mut scratch = vec![ZERO; 2 * nn];

    // x-fluxes at (i+1/2, j), laid out flux-major
    let mut flux_x = vec![ZERO; (nxn - 1) * g.ny * nn];
    for i in 0..nxn - 1 {
        for j in 0..g.ny {
            let ha = h.at(i, j);
            let hb = h.at(i + 1, j);
            let ga = conn_hat.x.at(i, j);
            let gb = conn_hat.x.at(i + 1, j);
            for q in 0..nn {
                hmid[q] = 0.5 * (ha[q] + hb[q]);
                gmid[q] = 0.5 * (ga[q] + gb[q]);
                grad[q] = (hb[q] - ha[q]) / dx;
            }
            commutator_into(n, &gmid, &hmid, &mut comm);
            for q in 0..nn {
                grad[q] += comm[q];
            }
            assert!(inverse_into(n, &hmid, &mut hinv, &mut scratch), "singular h midpoint");
            let base = (i * g.ny + j) * nn;
            mul_into(n, &hinv, &grad, &mut flux_x[base..base + nn]);
        }
    }
    // y-fluxes at (i, j+1/2)
    let mut flux_y = vec![ZERO; nxn * g.ny * nn];
    for i in 0..nxn {
        for j in 0..g.ny {
            let jp = g.jp(j);
            let ha = h.at(i, j);
            let hb = h.at(i, jp);
            let ga = conn_hat.y.at(i, j);
            let gb = conn_hat.y.at(i, jp);
            for q in 0..nn {
                hmid[q] = 0.5 * (ha[q] + hb[q]);
                gmid[q] = 0.5 * (ga[q] + gb[q]);
                grad[q] = (hb[q] - ha[q]) / dy;
            }
            commutator_into(n, &gmid, &hmid, &mut comm);
            for q in 0..nn {
                grad[q] += comm[q];
            }
            assert!(inverse_into(n, &hmid, &mut hinv, &mut scratch), "singular h midpoint");
            let base = (i * g.ny + j) * nn;
            mul_into(n, &hinv, &grad, &mut flux_y[base..base + nn]);
        }
    }

    let mut tbar = vec![ZERO; nn];
    let mut acc = vec![ZERO; nn];
    for i in 0..nxn {
        for j in 0..g.ny {
            acc.fill(ZERO);
            // x-part
            if i >= 1 && i < nxn - 1 {
                let fp = &flux_x[((i) * g.ny + j) * nn..][..nn];
                let fm = &flux_x[((i - 1) * g.ny + j) * nn..][..nn];
                for q in 0..nn {
                    acc[q] += (fp[q] - fm[q]) / dx;
                    tbar[q] = 0.5 * (fp[q] + fm[q]);
                }
                commutator_into(n, conn.x.at(i, j), &tbar, &mut comm);
                for q in 0..nn {
                    acc[q] += comm[q];
                }
            } else {
                // one-sided: difference of the two nearest fluxes and an
                // extrapolated node value for the commutator
                let (fa, fb, sgn) = if i == 0 {
                    (
                        &flux_x[(j) * nn..][..nn],
                        &flux_x[(g.ny + j) * nn..][..nn],
                        1.0,
                    )
                } else {
                    (
                        &flux_x[((nxn - 2) * g.ny + j) * nn..][..nn],
                        &flux_x[((nxn - 3) * g.ny + j) * nn..][..nn],
                        -1.0,
                    )
                };
                for q in 0..nn {
                    acc[q] += sgn * (fb[q] - fa[q]) / dx;
                    tbar[q] = 1.5 * fa[q] - 0.5 * fb[q];
                }
                commutator_into(n, conn.x.at(i, j), &tbar, &mut comm);
                for q in 0..nn {
                    acc[q] += comm[q];
                }
            }
            // y-part (periodic)
            {
                let fp = &flux_y[(i * g.ny + j) * nn..][..nn];
                let fm = &flux_y[(i * g.ny + g.jm(j)) * nn..][..nn];
                for q in 0..nn {
                    acc[q] += (fp[q] - fm[q]) / dy;
                    tbar[q] = 0.5 * (fp[q] + fm[q]);
                }
                commutator_into(n, conn.y.at(i, j), &tbar, &mut comm);
                for q in 0..nn {
                    acc[q] += comm[q];
                }
            }
            let f = scale / e_field.at(i, j);
            let base = g.idx(i, j) * nn;
            for q in 0..nn {
                out.values[base + q] = f * acc[q];
            }
        }
    }
    out
}

/// Dual covariant derivative of an endomorphism against a connection pair:
/// `∇̂⁰_i h = D_i h + [Γ̂⁰_i, h]`. For the unitary frame pass `Γ̂⁰ = -Ω†`.
pub fn covariant_derivative(conn_hat: &ConnectionField, h: &MatrixField) -> PairField {
    let g = h.grid;
    let n = h.n;
    let nn = n * n;
    let (dx, dy) = (g.dx(), g.dy());
    let mut out_x = MatrixField::zeros(g, h.frame, n);
    let mut out_y = MatrixField::zeros(g, h.frame, n);
    let mut comm = vec![ZERO; nn];
    let nx = g.nx;
    for i in 0..=nx {
        for j in 0..g.ny {
            {
                let ox = {
                    let base = g.idx(i, j) * nn;
                    &mut out_x.values[base..base + nn]
                };
                if i == 0 {
                    let a = h.at(0, j);
                    let b = h.at(1, j);
                    let c = h.at(2, j);
                    for k in 0..nn {
                        ox[k] = (-3.0 * a[k] + 4.0 * b[k] - c[k]) / (2.0 * dx);
                    }
                } else if i == nx {
                    let a = h.at(nx, j);
                    let b = h.at(nx - 1, j);
                    let c = h.at(nx - 2, j);
                    for k in 0..nn {
                        ox[k] = (3.0 * a[k] - 4.0 * b[k] + c[k]) / (2.0 * dx);
                    }
                } else {
                    let a = h.at(i + 1, j);
                    let b = h.at(i - 1, j);
                    for k in 0..nn {
                        ox[k] = (a[k] - b[k]) / (2.0 * dx);
                    }
                }
                commutator_into(n, conn_hat.x.at(i, j), h.at(i, j), &mut comm);
                for k in 0..nn {
                    ox[k] += comm[k];
                }
            }
            {
                let oy = {
                    let base = g.idx(i, j) * nn;
                    &mut out_y.values[base..base + nn]
                };
                let a = h.at(i, g.jp(j));
                let b = h.at(i, g.jm(j));
                for k in 0..nn {
                    oy[k] = (a[k] - b[k]) / (2.0 * dy);
                }
                commutator_into(n, conn_hat.y.at(i, j), h.at(i, j), &mut comm);
                for k in 0..nn {
                    oy[k] += comm[k];
                }
            }
        }
    }
    PairField { x: out_x, y: out_y }
}

/// `-Ω†`: the dual flat connection coefficients in the unitary frame.
pub fn dual_connection(conn: &ConnectionField) -> ConnectionField {
    let n = conn.n();
    let neg_adj = |m: &MatrixField| {
        let mut out = m.clone();
        for chunk in out.values.chunks_mut(n * n) {
            let orig: Vec<C64> = chunk.to_vec();
            for r in 0..n {
                for c in 0..n {
                    chunk[r * n + c] = -orig[c * n + r].conj();
                }
            }
        }
        out
    };
    PairField {
        x: neg_adj(&conn.x),
        y: neg_adj(&conn.y),
    }
}

/// Left-multiply pointwise by the inverse of `h`: out_i = h^{-1}·pair_i.
pub fn left_divide(h: &MatrixField, pair: &PairField) -> PairField {
    let g = h.grid;
    let n = h.n;
    let nn = n * n;
    let mut inv = vec![ZERO; nn];
    let mut scratch = vec![ZERO; 2 * n * n];
    let mut tmp = vec![ZERO; nn];
    let mut out = pair.clone();
    for i in 0..g.nodes_x() {
        for j in 0..g.ny {
            let hm = h.at(i, j);
            assert!(inverse_into(n, hm, &mut inv, &mut scratch), "singular h");
            mul_into(n, &inv, pair.x.at(i, j), &mut tmp);
            out.x.at_mut(i, j).copy_from_slice(&tmp);
            mul_into(n, &inv, pair.y.at(i, j), &mut tmp);
            out.y.at_mut(i, j).copy_from_slice(&tmp);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::FlatBundleSpec;
    use crate::grid::build_grid;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn lambdas_closed_forms() {
        let l = block_model_lambdas(2, 7.0).unwrap();
        assert!((l[0] - 1.0 / 7.0).abs() < 1e-15);
        assert!((l[1] - 7.0).abs() < 1e-15);
        let l = block_model_lambdas(1, 3.0).unwrap();
        assert_eq!(l, vec![1.0]);
        let l = block_model_lambdas(3, 2.0).unwrap();
        assert!((l[0] - 2.0 / 4.0).abs() < 1e-15); // 2 t^{-2}
        assert!((l[1] - 1.0).abs() < 1e-15);
        assert!((l[2] - 2.0).abs() < 1e-15); // t²/2
        assert!(block_model_lambdas(2, 1.0).is_err());
        assert!(block_model_lambdas(2, 0.5).is_err());
    }

    #[test]
    fn lambdas_det_one_normalization() {
        for d in 1..=6 {
            for &t in &[2.0, 5.0, 10.0, 50.0] {
                let l = block_model_lambdas(d, t).unwrap();
                let prod: f64 = l.iter().product();
                assert!((prod - 1.0).abs() < 1e-10, "d={d} t={t} prod={prod}");
                for (i, li) in l.iter().enumerate() {
                    let lj = l[d - 1 - i];
                    assert!((li * lj - fac_ratio(d, i) * fac_ratio(d, d - 1 - i)).abs() < 1e-9);
                }
            }
        }
    }

    fn fac_ratio(d: usize, i: usize) -> f64 {
        let alpha = i + 1;
        super::factorial(d - alpha) / super::factorial(alpha - 1)
    }

    #[test]
    fn ode_residual_of_closed_form_is_discretization_error() {
        let dt = 1e-3;
        for d in [1usize, 2, 3] {
            let rows: Vec<Vec<f64>> = (0..200)
                .map(|k| block_model_lambdas(d, 5.0 + k as f64 * dt).unwrap())
                .collect();
            let r = model_ode_residual(&rows, dt);
            if d == 1 {
                assert!(r < 1e-12, "d=1 residual {r}");
            } else {
                assert!(r < 1e-5, "d={d} residual {r}");
            }
        }
        // perturbed λ₁ leaves a leading-order residual ~ 0.1 · t^{-2}
        let dt = 1e-3;
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|k| {
                let mut l = block_model_lambdas(2, 5.0 + k as f64 * dt).unwrap();
                l[0] *= 1.1;
                l
            })
            .collect();
        let r = model_ode_residual(&rows, dt);
        let expect = 0.1 / (5.1f64 * 5.1);
        assert!((r - expect).abs() < 0.3 * expect, "r={r} expect~{expect}");
    }

    #[test]
    fn t_profile_properties() {
        for &x in &[-8.0, -3.0, 3.0, 5.5, 8.0] {
            assert!((t_profile(x) - x.abs()).abs() < 1e-15);
        }
        assert!((t_profile(0.0) - 2.0).abs() < 1e-15);
        for k in 0..400 {
            let x = -4.0 + k as f64 * 0.02;
            assert!(t_profile(x) > 1.9);
            // derivative consistency
            let h = 1e-6;
            let fd = (t_profile(x + h) - t_profile(x - h)) / (2.0 * h);
            assert!((fd - t_profile_dx(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn weight_profile_ends_and_integral() {
        let (wz, wi) = (0.4, -0.3);
        assert!((weight_profile(wz, wi, 4.0) - wz).abs() < 1e-15);
        assert!((weight_profile(wz, wi, -4.0) + wi).abs() < 1e-15);
        assert_eq!(weight_profile(wz, wi, 0.0), 0.0);
        // derivative and integral consistency
        for k in 0..100 {
            let x = -3.5 + 0.07 * k as f64;
            let h = 1e-6;
            let fd = (weight_profile(wz, wi, x + h) - weight_profile(wz, wi, x - h)) / (2.0 * h);
            assert!((fd - weight_profile_dx(wz, wi, x)).abs() < 1e-8);
            let iq = (weight_profile_i(wz, wi, x + h) - weight_profile_i(wz, wi, x - h)) / (2.0 * h);
            assert!((iq - weight_profile(wz, wi, x)).abs() < 1e-8);
        }
    }

    fn geometry_for(
        dim: usize,
        kappa: C64,
        w: [f64; 2],
        x_half: f64,
        nx: usize,
        ny: usize,
        preset: &ConformalPreset,
    ) -> ModelGeometry {
        let b = FlatBundleSpec::single_jordan_block(dim, kappa, w).unwrap();
        let g = build_grid(x_half, nx, ny).unwrap();
        ModelGeometry::build(&b, g, preset).unwrap()
    }

    #[test]
    fn rank1_zero_weight_model_is_exact() {
        let geo = geometry_for(1, c(0.3, 0.0), [0.0, 0.0], 5.0, 64, 8, &ConformalPreset::flat_window());
        // deg = 0 so c = 0 and u ≡ 0; H₀ ≡ 1 and K₀ ≡ 0
        assert!((geo.c).abs() < 1e-12);
        assert!(geo.u.max_abs() < 1e-12);
        assert!(geo.model_residual().max_abs() < 1e-10);
    }

    #[test]
    fn rank1_weighted_constant_matches_formula() {
        let b = FlatBundleSpec::single_jordan_block(1, c(0.0, 0.0), [0.25, 0.25]).unwrap();
        let g = build_grid(6.0, 120, 8).unwrap();
        let preset = ConformalPreset::FubiniStudy;
        let geo = ModelGeometry::build(&b, g, &preset).unwrap();
        // c = π·deg/(n·Vol) = π·0.5/4π = 0.125
        assert!((geo.c_raw - 0.125).abs() < 1e-6, "c_raw = {}", geo.c_raw);
        assert!((geo.c - geo.c_raw).abs() < 1e-4);
        assert!(geo.u.max_abs() > 1e-3); // nonzero twist
        // model residual small away from the band even with weights
        let r = geo.model_residual();
        let mut worst: f64 = 0.0;
        for i in 0..g.nodes_x() {
            if g.x(i).abs() > 3.2 && g.x(i).abs() < 5.6 {
                for j in 0..g.ny {
                    worst = worst.max(r.at(i, j));
                }
            }
        }
        assert!(worst < 5e-3, "off-band residual {worst}");
    }

    #[test]
    fn jordan_model_metric_values() {
        // Example values: rank-2 Jordan block, zero weights, flat window;
        // at x = 5, H₀ = diag(1/5, 5)·e^u with u ≡ 0.
        let geo = geometry_for(2, c(1.0, 0.0), [0.0, 0.0], 6.0, 96, 8, &ConformalPreset::flat_window());
        assert!(geo.u.max_abs() < 1e-12);
        let g = geo.grid;
        // find node nearest x = 5
        let i = ((5.0 + g.x_half) / g.dx()).round() as usize;
        assert!((g.x(i) - 5.0).abs() < 1e-9);
        let h = geo.h0_parabolic.mat(i, 0);
        assert!((h[(0, 0)].re - 0.2).abs() < 1e-12);
        assert!((h[(1, 1)].re - 5.0).abs() < 1e-12);
        assert!(geo.h0_parabolic.min_eigenvalue() > 0.0);
    }

    #[test]
    fn rank3_model_positive_definite() {
        let geo = geometry_for(3, c(0.2, 0.1), [0.1, -0.1], 5.0, 80, 8, &ConformalPreset::FubiniStudy);
        assert!(geo.h0_parabolic.min_eigenvalue() > 0.0);
    }

    #[test]
    fn unitary_connection_closed_forms() {
        // d=1, w=0, u=0: Ω_x = 0, Ω_y = κ
        let geo = geometry_for(1, c(0.4, 0.2), [0.0, 0.0], 5.0, 64, 8, &ConformalPreset::flat_window());
        for i in 0..geo.grid.nodes_x() {
            assert!(geo.conn.x.at(i, 0)[0].norm() < 1e-12);
            assert!((geo.conn.y.at(i, 0)[0] - c(0.4, 0.2)).norm() < 1e-12);
        }
        // d=2: super-diagonal entry 1/t at t = |x| = 10; radial diagonal
        // entries ∓ t'/(2t)
        let geo = geometry_for(2, c(1.0, 0.0), [0.0, 0.0], 11.0, 110, 8, &ConformalPreset::flat_window());
        let g = geo.grid;
        let i = ((10.0 + g.x_half) / g.dx()).round() as usize;
        assert!((g.x(i) - 10.0).abs() < 1e-9);
        let oy = geo.conn.y.mat(i, 0);
        assert!((oy[(0, 1)] - c(0.1, 0.0)).norm() < 1e-12);
        let ox = geo.conn.x.mat(i, 0);
        assert!((ox[(0, 0)] - c(0.05, 0.0)).norm() < 1e-12); // -τ₁ t'/(2t) = +1/(2t)
        assert!((ox[(1, 1)] + c(0.05, 0.0)).norm() < 1e-12);
        // d=3 super-diagonals √2/t
        let geo = geometry_for(3, c(0.0, 0.0), [0.0, 0.0], 11.0, 110, 8, &ConformalPreset::flat_window());
        let oy = geo.conn.y.mat(i, 0);
        let s = 2.0f64.sqrt() / 10.0;
        assert!((oy[(0, 1)] - c(s, 0.0)).norm() < 1e-12);
        assert!((oy[(1, 2)] - c(s, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn model_residual_vanishes_off_band_rank2() {
        // Acceptance-style check at coarse resolution: flat window, c = 0.
        let geo = geometry_for(2, c(1.0, 0.0), [0.0, 0.0], 6.0, 240, 8, &ConformalPreset::flat_window());
        let r = geo.model_residual();
        let g = geo.grid;
        let mut off_band: f64 = 0.0;
        let mut in_band: f64 = 0.0;
        for i in 1..g.nx {
            let xa = g.x(i).abs();
            for j in 0..g.ny {
                if xa > 3.2 {
                    off_band = off_band.max(r.at(i, j));
                } else {
                    in_band = in_band.max(r.at(i, j));
                }
            }
        }
        let dx2 = g.dx() * g.dx();
        assert!(off_band < 10.0 * dx2, "off-band {off_band} vs dx² {dx2}");
        assert!(in_band.is_finite());
    }

    #[test]
    fn gauge_roundtrips_are_tight() {
        let geo = geometry_for(2, c(0.5, 0.3), [0.2, -0.1], 5.0, 60, 8, &ConformalPreset::FubiniStudy);
        // metric roundtrip parabolic -> unitary -> parabolic
        let h0 = geo.h0_parabolic.clone();
        let u = geo.gauge_transform_metric(&h0, Frame::Unitary).unwrap();
        let back = geo.gauge_transform_metric(&u, Frame::Parabolic).unwrap();
        let mut rel: f64 = 0.0;
        for (a, b) in back.values.iter().zip(h0.values.iter()) {
            rel = rel.max((a - b).norm() / (1.0 + b.norm()));
        }
        assert!(rel < 1e-12, "roundtrip rel err {rel}");
        // H₀ in the unitary frame is the identity
        let idm = MatrixField::identity(geo.grid, Frame::Unitary, 2);
        assert!(u.sup_distance(&idm) < 1e-12);
        // temporal with zero weights = parabolic
        let geo0 = geometry_for(2, c(0.5, 0.3), [0.0, 0.0], 5.0, 60, 8, &ConformalPreset::flat_window());
        let t = geo0
            .gauge_transform_metric(&geo0.h0_parabolic, Frame::Temporal)
            .unwrap();
        let mut rel: f64 = 0.0;
        for (a, b) in t.values.iter().zip(geo0.h0_parabolic.values.iter()) {
            rel = rel.max((a - b).norm() / (1.0 + b.norm()));
        }
        assert!(rel < 1e-12);
    }

    #[test]
    fn temporal_roundtrip_with_weights() {
        let geo = geometry_for(2, c(0.4, 0.2), [0.35, -0.15], 5.0, 60, 8, &ConformalPreset::FubiniStudy);
        let t = geo
            .gauge_transform_metric(&geo.h0_parabolic, Frame::Temporal)
            .unwrap();
        let back = geo.gauge_transform_metric(&t, Frame::Parabolic).unwrap();
        let mut rel: f64 = 0.0;
        for (a, b) in back.values.iter().zip(geo.h0_parabolic.values.iter()) {
            rel = rel.max((a - b).norm() / (1.0 + b.norm()));
        }
        assert!(rel < 1e-12, "temporal roundtrip rel err {rel}");
    }

    #[test]
    fn connection_transform_cancels_the_conformal_twist() {
        // with weights and a nonzero twist u, the unitary Ω carries du-terms;
        // transforming to the parabolic frame must cancel them exactly,
        // leaving the analytic P dx + B dy
        let geo = geometry_for(2, c(1.0, 0.0), [0.3, -0.2], 6.0, 120, 8, &ConformalPreset::FubiniStudy);
        let par = geo
            .gauge_transform_connection(&geo.conn, Frame::Parabolic)
            .unwrap();
        let g = geo.grid;
        let mut worst: f64 = 0.0;
        for i in 0..g.nodes_x() {
            let x = g.x(i);
            let p = weight_profile(0.3, -0.2, x);
            for j in 0..g.ny {
                let gx = par.x.mat(i, j);
                let gy = par.y.mat(i, j);
                for r in 0..2 {
                    for cc in 0..2 {
                        let ex = if r == cc { c(p, 0.0) } else { c(0.0, 0.0) };
                        let ey = if r == cc {
                            c(1.0, 0.0)
                        } else if cc == r + 1 {
                            c(1.0, 0.0)
                        } else {
                            c(0.0, 0.0)
                        };
                        worst = worst.max((gx[(r, cc)] - ex).norm());
                        worst = worst.max((gy[(r, cc)] - ey).norm());
                    }
                }
            }
        }
        assert!(worst < 1e-10, "twist cancellation defect {worst}");
    }

    #[test]
    fn connection_transform_consistency() {
        // transform the unitary Ω back to the parabolic frame and compare
        // with the analytic parabolic-frame connection P dx + B dy
        let geo = geometry_for(2, c(1.0, 0.0), [0.3, 0.1], 5.0, 80, 8, &ConformalPreset::flat_window());
        let par = geo
            .gauge_transform_connection(&geo.conn, Frame::Parabolic)
            .unwrap();
        let g = geo.grid;
        let mut worst: f64 = 0.0;
        for i in 1..g.nx {
            let x = g.x(i);
            let p = weight_profile(0.3, 0.1, x);
            for j in 0..g.ny {
                let gx = par.x.mat(i, j);
                let gy = par.y.mat(i, j);
                for r in 0..2 {
                    for cc in 0..2 {
                        let ex = if r == cc { c(p, 0.0) } else { c(0.0, 0.0) };
                        let ey = if r == cc {
                            c(1.0, 0.0)
                        } else if cc == r + 1 {
                            c(1.0, 0.0)
                        } else {
                            c(0.0, 0.0)
                        };
                        worst = worst.max((gx[(r, cc)] - ex).norm());
                        worst = worst.max((gy[(r, cc)] - ey).norm());
                    }
                }
            }
        }
        // u ≡ 0 here so the transform is analytic up to rounding
        assert!(worst < 1e-10, "parabolic connection mismatch {worst}");
    }

    #[test]
    fn model_frame_norm_slopes_match_nilpotent_weights() {
        // |e_α|²_{H₀} = λ_α e^u: log-log slope in t equals τ_α for |e_α|²
        let geo = geometry_for(3, c(0.0, 0.0), [0.0, 0.0], 120.0, 240, 8, &ConformalPreset::flat_window());
        let g = geo.grid;
        let taus = nilpotent_weights(3);
        let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
        for i in 0..g.nodes_x() {
            let x = g.x(i);
            if (10.0..=100.0).contains(&x) {
                pts.push((t_profile(x).ln(), geo.lambda_diag(i).iter().map(|l| l.ln()).collect()));
            }
        }
        for a in 0..3 {
            let slope = fit_slope(&pts, a);
            let rel = (slope - taus[a] as f64).abs() / (taus[a].abs() as f64).max(1.0);
            assert!(rel < 0.02, "slot {a}: slope {slope} vs tau {}", taus[a]);
        }
    }

    fn fit_slope(pts: &[(f64, Vec<f64>)], a: usize) -> f64 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1[a]).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1[a]).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }

    #[test]
    fn trace_psi_matches_weights_off_band() {
        // r·Tr Ψ̂_r = -Tr Ψ̂_x with the u-part peeled equals Σ w d exactly
        // outside the band (the weight profile is constant there)
        let geo = geometry_for(2, c(1.0, 0.0), [0.3, -0.2], 6.0, 120, 8, &ConformalPreset::FubiniStudy);
        let g = geo.grid;
        let (dux, _) = discrete_gradient(&geo.u);
        for i in 0..g.nodes_x() {
            let x = g.x(i);
            if x > 3.2 {
                let tr_psi_x: f64 = {
                    let p = geo.psi0.x.mat(i, 0);
                    (p[(0, 0)] + p[(1, 1)]).re
                };
                let peeled = tr_psi_x - 0.5 * 2.0 * dux.at(i, 0);
                // Tr Ψ̂_x = -Σ d_ℓ p_ℓ = -(2 · 0.3) at the zero end
                assert!((peeled + 0.6).abs() < 1e-9, "x={x} got {peeled}");
            }
        }
    }

    #[test]
    fn solve_conformal_factor_rejects_inconsistent_constant() {
        let b = FlatBundleSpec::single_jordan_block(1, c(0.0, 0.0), [0.25, 0.25]).unwrap();
        let g = build_grid(6.0, 60, 8).unwrap();
        let e = conformal_factor(&ConformalPreset::FubiniStudy, g).unwrap();
        assert!(matches!(
            solve_conformal_factor(&b, &e, 1.0),
            Err(Error::NotSolvable(_))
        ));
    }

    #[test]
    fn too_short_grid_rejected() {
        let b = FlatBundleSpec::single_jordan_block(2, c(1.0, 0.0), [0.0, 0.0]).unwrap();
        let g = build_grid(2.5, 40, 8).unwrap();
        assert!(matches!(
            ModelGeometry::build(&b, g, &ConformalPreset::flat_window()),
            Err(Error::DomainError(_))
        ));
    }
}
