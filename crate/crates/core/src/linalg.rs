//! Dense complex matrices of small runtime dimension.
//!
//! Fibre ranks here are tiny (n ≤ 16), and the flow kernels touch millions of
//! node-local matrices per run, so everything is flat `Vec<Complex64>` storage
//! with allocation-free `*_into` variants for the hot paths. Eigensolvers are
//! classical: cyclic Jacobi for Hermitian matrices, Hessenberg + shifted QR
//! for general spectra. Both are deterministic.

use num_complex::Complex64;

pub type C64 = Complex64;

pub const ZERO: C64 = Complex64::new(0.0, 0.0);
pub const ONE: C64 = Complex64::new(1.0, 0.0);

/// Row-major n×n complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    pub n: usize,
    pub a: Vec<C64>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        CMat {
            n,
            a: vec![ZERO; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = CMat::zeros(n);
        for r in 0..n {
            for c in 0..n {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    pub fn diag_real(d: &[f64]) -> Self {
        let mut m = CMat::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        m
    }

    pub fn adjoint(&self) -> CMat {
        let mut out = CMat::zeros(self.n);
        for r in 0..self.n {
            for c in 0..self.n {
                out[(r, c)] = self[(c, r)].conj();
            }
        }
        out
    }

    pub fn mul(&self, rhs: &CMat) -> CMat {
        let mut out = CMat::zeros(self.n);
        mul_into(self.n, &self.a, &rhs.a, &mut out.a);
        out
    }

    pub fn add(&self, rhs: &CMat) -> CMat {
        let mut out = self.clone();
        for (o, r) in out.a.iter_mut().zip(rhs.a.iter()) {
            *o += r;
        }
        out
    }

    pub fn sub(&self, rhs: &CMat) -> CMat {
        let mut out = self.clone();
        for (o, r) in out.a.iter_mut().zip(rhs.a.iter()) {
            *o -= r;
        }
        out
    }

    pub fn scale(&self, s: C64) -> CMat {
        let mut out = self.clone();
        for o in out.a.iter_mut() {
            *o *= s;
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// Average with own adjoint.
    pub fn hermitize(&mut self) {
        for r in 0..self.n {
            for c in r..self.n {
                let m = 0.5 * (self[(r, c)] + self[(c, r)].conj());
                self[(r, c)] = m;
                self[(c, r)] = m.conj();
            }
        }
    }

    pub fn norm_fro(&self) -> f64 {
        self.a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn norm_max(&self) -> f64 {
        self.a.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn inverse(&self) -> Option<CMat> {
        let mut lu = Lu::new(self)?;
        let mut out = CMat::zeros(self.n);
        let mut col = vec![ZERO; self.n];
        for j in 0..self.n {
            col.fill(ZERO);
            col[j] = ONE;
            lu.solve_in_place(&mut col);
            for i in 0..self.n {
                out[(i, j)] = col[i];
            }
        }
        Some(out)
    }

    pub fn det(&self) -> C64 {
        match Lu::new(self) {
            Some(lu) => lu.det(),
            None => ZERO,
        }
    }

    /// Cholesky-based check of Hermitian positive definiteness with the given
    /// eigenvalue floor; returns det(h) on success.
    pub fn posdef_det(&self, floor: f64) -> Option<f64> {
        let n = self.n;
        let mut l = vec![ZERO; n * n];
        let mut det = 1.0;
        for j in 0..n {
            let mut s = self[(j, j)].re;
            for k in 0..j {
                s -= l[j * n + k].norm_sqr();
            }
            if s <= floor {
                return None;
            }
            let ljj = s.sqrt();
            det *= s;
            l[j * n + j] = C64::new(ljj, 0.0);
            for i in j + 1..n {
                let mut v = self[(i, j)];
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = v / ljj;
            }
        }
        Some(det)
    }

    /// Eigen-decomposition of a Hermitian matrix: ascending real eigenvalues
    /// and a unitary matrix of column eigenvectors.
    pub fn eigh(&self) -> (Vec<f64>, CMat) {
        hermitian_eigen(self)
    }

    /// exp(A) for Hermitian A, via the spectral calculus.
    pub fn exp_hermitian(&self) -> CMat {
        let (vals, vecs) = self.eigh();
        let mut out = CMat::zeros(self.n);
        for r in 0..self.n {
            for c in 0..self.n {
                let mut s = ZERO;
                for k in 0..self.n {
                    s += vecs[(r, k)] * vals[k].exp() * vecs[(c, k)].conj();
                }
                out[(r, c)] = s;
            }
        }
        out
    }

    /// h^p for Hermitian positive semi-definite h, via the spectral calculus.
    pub fn pow_hermitian(&self, p: f64) -> CMat {
        let (vals, vecs) = self.eigh();
        let mut out = CMat::zeros(self.n);
        for r in 0..self.n {
            for c in 0..self.n {
                let mut s = ZERO;
                for k in 0..self.n {
                    let lp = vals[k].max(0.0).powf(p);
                    s += vecs[(r, k)] * lp * vecs[(c, k)].conj();
                }
                out[(r, c)] = s;
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.a[r * self.n + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.a[r * self.n + c]
    }
}

// ---------------------------------------------------------------------------
// Allocation-free slice kernels for the flow hot path.
// ---------------------------------------------------------------------------

#[inline]
pub fn mul_into(n: usize, a: &[C64], b: &[C64], out: &mut [C64]) {
    for r in 0..n {
        for c in 0..n {
            let mut s = ZERO;
            for k in 0..n {
                s += a[r * n + k] * b[k * n + c];
            }
            out[r * n + c] = s;
        }
    }
}

#[inline]
pub fn adjoint_into(n: usize, a: &[C64], out: &mut [C64]) {
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = a[c * n + r].conj();
        }
    }
}

/// out = [a, b] = ab - ba
#[inline]
pub fn commutator_into(n: usize, a: &[C64], b: &[C64], out: &mut [C64]) {
    for r in 0..n {
        for c in 0..n {
            let mut s = ZERO;
            for k in 0..n {
                s += a[r * n + k] * b[k * n + c] - b[r * n + k] * a[k * n + c];
            }
            out[r * n + c] = s;
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting, into `out`. `scratch` must be
/// n*2n long. Returns false on (numerically) singular input.
pub fn inverse_into(n: usize, a: &[C64], out: &mut [C64], scratch: &mut [C64]) -> bool {
    let w = 2 * n;
    for r in 0..n {
        for c in 0..n {
            scratch[r * w + c] = a[r * n + c];
            scratch[r * w + n + c] = if r == c { ONE } else { ZERO };
        }
    }
    for col in 0..n {
        let mut piv = col;
        let mut best = scratch[col * w + col].norm_sqr();
        for r in col + 1..n {
            let v = scratch[r * w + col].norm_sqr();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return false;
        }
        if piv != col {
            for c in 0..w {
                scratch.swap(col * w + c, piv * w + c);
            }
        }
        let d = scratch[col * w + col];
        for c in 0..w {
            scratch[col * w + c] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = scratch[r * w + col];
            if f == ZERO {
                continue;
            }
            for c in 0..w {
                let v = scratch[col * w + c];
                scratch[r * w + c] -= f * v;
            }
        }
    }
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = scratch[r * w + n + c];
        }
    }
    true
}

// ---------------------------------------------------------------------------
// LU with partial pivoting.
// ---------------------------------------------------------------------------

struct Lu {
    n: usize,
    a: Vec<C64>,
    piv: Vec<usize>,
    sign: f64,
}

impl Lu {
    fn new(m: &CMat) -> Option<Lu> {
        let n = m.n;
        let mut a = m.a.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].norm_sqr();
            for r in k + 1..n {
                let v = a[r * n + k].norm_sqr();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 {
                return None;
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                piv.swap(k, p);
                sign = -sign;
            }
            let d = a[k * n + k];
            for r in k + 1..n {
                let f = a[r * n + k] / d;
                a[r * n + k] = f;
                for c in k + 1..n {
                    let v = a[k * n + c];
                    a[r * n + c] -= f * v;
                }
            }
        }
        Some(Lu { n, a, piv, sign })
    }

    fn det(&self) -> C64 {
        let mut d = C64::new(self.sign, 0.0);
        for k in 0..self.n {
            d *= self.a[k * self.n + k];
        }
        d
    }

    fn solve_in_place(&mut self, b: &mut [C64]) {
        let n = self.n;
        let permuted: Vec<C64> = self.piv.iter().map(|&p| b[p]).collect();
        b.copy_from_slice(&permuted);
        for r in 1..n {
            for c in 0..r {
                let f = self.a[r * n + c];
                let v = b[c];
                b[r] -= f * v;
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                let f = self.a[r * n + c];
                let v = b[c];
                b[r] -= f * v;
            }
            b[r] /= self.a[r * n + r];
        }
    }
}

// ---------------------------------------------------------------------------
// Hermitian eigensolver: cyclic Jacobi with complex rotations.
// ---------------------------------------------------------------------------

fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.n;
    let mut a = m.clone();
    a.hermitize();
    let mut v = CMat::identity(n);
    if n <= 1 {
        return ((0..n).map(|i| a[(i, i)].re).collect(), v);
    }
    let scale = a.norm_fro().max(1e-300);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let beta = a[(p, q)];
                let b = beta.norm();
                if b <= 1e-300 {
                    continue;
                }
                let phase = beta / b;
                let tau = (a[(q, q)].re - a[(p, p)].re) / (2.0 * b);
                // small root of t^2 - 2 tau t - 1 = 0
                let t = if tau >= 0.0 {
                    -1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = phase.conj() * (t * c);
                // A <- U^H A U with U = [[c, -conj(s)],[s, c]] acting on (p,q)
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * c + akq * s;
                    a[(k, q)] = -akp * s.conj() + akq * c;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = apk * c + aqk * s.conj();
                    a[(q, k)] = -apk * s + aqk * c;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * c + vkq * s;
                    v[(k, q)] = -vkp * s.conj() + vkq * c;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let vals: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    order.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let mut vecs = CMat::zeros(n);
    for (newc, &oldc) in order.iter().enumerate() {
        for r in 0..n {
            vecs[(r, newc)] = v[(r, oldc)];
        }
    }
    (sorted_vals, vecs)
}

// ---------------------------------------------------------------------------
// General complex eigenvalues: Hessenberg reduction + shifted QR.
// ---------------------------------------------------------------------------

/// Eigenvalues of a general complex matrix. Order is deterministic
/// (sorted by (re, im) descending). Returns None if QR fails to deflate.
pub fn eigenvalues(m: &CMat) -> Option<Vec<C64>> {
    let n = m.n;
    if n == 0 {
        return Some(vec![]);
    }
    if n == 1 {
        return Some(vec![m[(0, 0)]]);
    }
    let mut h = hessenberg(m);
    let scale = h.norm_fro().max(1e-300);
    let eps = 1e-14;
    let mut eigs: Vec<C64> = Vec::with_capacity(n);
    let mut hi = n - 1;
    let mut iters = 0usize;
    loop {
        // deflate converged trailing entries
        while hi > 0 {
            let sub = h[(hi, hi - 1)].norm();
            let d = h[(hi - 1, hi - 1)].norm() + h[(hi, hi)].norm();
            if sub <= eps * d.max(scale * 1e-3) {
                eigs.push(h[(hi, hi)]);
                hi -= 1;
            } else {
                break;
            }
        }
        if hi == 0 {
            eigs.push(h[(0, 0)]);
            break;
        }
        iters += 1;
        if iters > 200 * n {
            return None;
        }
        // Wilkinson shift from the trailing 2x2 of the active block
        let a = h[(hi - 1, hi - 1)];
        let b = h[(hi - 1, hi)];
        let c = h[(hi, hi - 1)];
        let d = h[(hi, hi)];
        let tr = a + d;
        let disc = ((a - d) * (a - d) + 4.0 * b * c).sqrt();
        let l1 = 0.5 * (tr + disc);
        let l2 = 0.5 * (tr - disc);
        let mu = if (l1 - d).norm() < (l2 - d).norm() { l1 } else { l2 };
        qr_step(&mut h, hi + 1, mu);
    }
    eigs.sort_by(|x, y| {
        (y.re, y.im)
            .partial_cmp(&(x.re, x.im))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Some(eigs)
}

fn hessenberg(m: &CMat) -> CMat {
    let n = m.n;
    let mut a = m.clone();
    for k in 0..n.saturating_sub(2) {
        // Householder on column k, rows k+1..n
        let mut x: Vec<C64> = (k + 1..n).map(|r| a[(r, k)]).collect();
        let nx = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nx <= 1e-300 {
            continue;
        }
        let phase = if x[0].norm() > 0.0 { x[0] / x[0].norm() } else { ONE };
        let alpha = -phase * nx;
        x[0] -= alpha;
        let nv = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nv <= 1e-300 {
            continue;
        }
        for z in x.iter_mut() {
            *z /= nv;
        }
        // A <- P A P with P = I - 2 v v^H on the trailing block
        for c in 0..n {
            let mut dot = ZERO;
            for (i, vz) in x.iter().enumerate() {
                dot += vz.conj() * a[(k + 1 + i, c)];
            }
            for (i, vz) in x.iter().enumerate() {
                let upd = 2.0 * vz * dot;
                a[(k + 1 + i, c)] -= upd;
            }
        }
        for r in 0..n {
            let mut dot = ZERO;
            for (i, vz) in x.iter().enumerate() {
                dot += a[(r, k + 1 + i)] * vz;
            }
            for (i, vz) in x.iter().enumerate() {
                let upd = 2.0 * dot * vz.conj();
                a[(r, k + 1 + i)] -= upd;
            }
        }
    }
    a
}

/// One shifted QR iteration on the leading m×m block: H <- RQ + mu I where
/// QR = H - mu I, via Householder reflectors.
fn qr_step(h: &mut CMat, m: usize, mu: C64) {
    let n = h.n;
    let mut b = CMat::zeros(m);
    for r in 0..m {
        for c in 0..m {
            b[(r, c)] = h[(r, c)];
        }
        b[(r, r)] -= mu;
    }
    let mut vs: Vec<Vec<C64>> = Vec::with_capacity(m);
    for k in 0..m {
        let mut x: Vec<C64> = (k..m).map(|r| b[(r, k)]).collect();
        let nx = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nx <= 1e-300 {
            vs.push(vec![]);
            continue;
        }
        let phase = if x[0].norm() > 0.0 { x[0] / x[0].norm() } else { ONE };
        let alpha = -phase * nx;
        x[0] -= alpha;
        let nv = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nv <= 1e-300 {
            vs.push(vec![]);
            continue;
        }
        for z in x.iter_mut() {
            *z /= nv;
        }
        for c in k..m {
            let mut dot = ZERO;
            for (i, vz) in x.iter().enumerate() {
                dot += vz.conj() * b[(k + i, c)];
            }
            for (i, vz) in x.iter().enumerate() {
                let upd = 2.0 * vz * dot;
                b[(k + i, c)] -= upd;
            }
        }
        vs.push(x);
    }
    // b now holds R; apply the reflectors from the right: R P_0 P_1 ...
    for (k, v) in vs.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        for r in 0..m {
            let mut dot = ZERO;
            for (i, vz) in v.iter().enumerate() {
                dot += b[(r, k + i)] * vz;
            }
            for (i, vz) in v.iter().enumerate() {
                let upd = 2.0 * dot * vz.conj();
                b[(r, k + i)] -= upd;
            }
        }
    }
    for r in 0..m {
        for c in 0..m {
            h[(r, c)] = b[(r, c)];
        }
        h[(r, r)] += mu;
    }
    let _ = n;
}

/// Numerical rank via Gaussian elimination with full pivoting; pivots are
/// compared against the absolute tolerance.
pub fn rank_with_tol(m: &CMat, tol: f64) -> usize {
    let n = m.n;
    let mut a = m.a.clone();
    let mut rank = 0;
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut best = 0.0;
        let (mut pr, mut pc) = (k, k);
        for (ri, &r) in rows.iter().enumerate().skip(k) {
            for (ci, &c) in cols.iter().enumerate().skip(k) {
                let v = a[r * n + c].norm();
                if v > best {
                    best = v;
                    pr = ri;
                    pc = ci;
                }
            }
        }
        if best <= tol {
            break;
        }
        rows.swap(k, pr);
        cols.swap(k, pc);
        rank += 1;
        let (prow, pcol) = (rows[k], cols[k]);
        let d = a[prow * n + pcol];
        for &r in rows.iter().skip(k + 1) {
            let f = a[r * n + pcol] / d;
            for &c in cols.iter().skip(k) {
                let v = a[prow * n + c];
                a[r * n + c] -= f * v;
            }
        }
    }
    rank
}
