//! Algebraic model of a flat bundle with regular singularities and parabolic
//! structure over the two-punctured sphere.
//!
//! A bundle is described by its residue data at the two punctures: an ordered
//! list of Jordan blocks `(κ, d)` per puncture, plus one real parabolic weight
//! per block. Degrees, slopes and the stability classification are finite
//! combinatorics over this data; the punctured-surface geometry only enters
//! through the compatibility constraint tying the two punctures together
//! (they are the two ends of one cylinder and carry inverse monodromy).

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C64};
use serde::{Deserialize, Serialize};

const TOL_MATCH: f64 = 1e-9;
const TOL_SLOPE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Puncture {
    Zero,
    Infinity,
}

/// One Jordan block of the normalized residue: generalized eigenvalue κ with
/// Im κ ∈ [0,1), and block size d ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JordanBlock {
    pub kappa: C64,
    pub dim: usize,
}

impl JordanBlock {
    pub fn new(kappa: C64, dim: usize) -> Self {
        JordanBlock { kappa, dim }
    }
}

/// Residue blocks at one puncture, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct PuncturePresentation {
    pub blocks: Vec<JordanBlock>,
    pub puncture: Puncture,
}

impl PuncturePresentation {
    pub fn rank(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }
}

/// Shift Im(κ) by integers into [0,1) and re-apply the canonical block order.
/// Idempotent.
pub fn temporal_normalize(blocks: &[JordanBlock]) -> Vec<JordanBlock> {
    let mut out: Vec<JordanBlock> = blocks
        .iter()
        .map(|b| {
            let mut im = b.kappa.im.rem_euclid(1.0);
            if im >= 1.0 {
                im = 0.0;
            }
            JordanBlock::new(C64::new(b.kappa.re, im), b.dim)
        })
        .collect();
    canonical_sort(&mut out, &mut []);
    out
}

/// Canonical block order: (Re κ, Im κ, dim) descending, ties by input order.
/// `weights` (if non-empty) is permuted alongside.
fn canonical_sort(blocks: &mut Vec<JordanBlock>, weights: &mut [f64]) {
    let mut idx: Vec<usize> = (0..blocks.len()).collect();
    idx.sort_by(|&i, &j| {
        let a = &blocks[i];
        let b = &blocks[j];
        (b.kappa.re, b.kappa.im, b.dim)
            .partial_cmp(&(a.kappa.re, a.kappa.im, a.dim))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let sorted_blocks: Vec<JordanBlock> = idx.iter().map(|&i| blocks[i]).collect();
    *blocks = sorted_blocks;
    if !weights.is_empty() {
        let sorted_w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        weights.copy_from_slice(&sorted_w);
    }
}

/// Nilpotent weights of a size-d block: τ_i = 2i - (d+1). They sum to zero and
/// step by 2; multiplication by the nilpotent part drops the weight by 2.
pub fn nilpotent_weights(d: usize) -> Vec<i64> {
    (1..=d).map(|i| 2 * i as i64 - (d as i64 + 1)).collect()
}

/// Per-puncture parabolic weights, aligned with the canonical block order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParabolicStructure {
    pub zero: Vec<f64>,
    pub infinity: Vec<f64>,
}

/// A flat bundle with regular singularities at 0 and ∞ plus a parabolic
/// structure. Construction normalizes, sorts and validates; in particular the
/// block-size partitions at the two punctures must agree and matched blocks
/// must carry inverse monodromy: κ_∞ ≡ -κ_0 with Im taken mod 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatBundleSpec {
    pub rank: usize,
    pub zero: PuncturePresentation,
    pub infinity: PuncturePresentation,
    pub weights: ParabolicStructure,
    /// zero-block ℓ is matched with infinity-block `matching[ℓ]`.
    matching: Vec<usize>,
    /// Two blocks at one puncture share κ: the invariant-subspace family is a
    /// continuum and enumeration covers only the block-aligned standard family.
    degenerate: bool,
}

impl FlatBundleSpec {
    pub fn new(
        rank: usize,
        zero_blocks: Vec<JordanBlock>,
        infinity_blocks: Vec<JordanBlock>,
        weights_zero: Vec<f64>,
        weights_infinity: Vec<f64>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidBundle("rank must be positive".into()));
        }
        for b in zero_blocks.iter().chain(infinity_blocks.iter()) {
            if b.dim == 0 {
                return Err(Error::InvalidBundle("block dim must be >= 1".into()));
            }
            if !b.kappa.re.is_finite() || !b.kappa.im.is_finite() {
                return Err(Error::InvalidBundle("kappa must be finite".into()));
            }
        }
        if weights_zero.len() != zero_blocks.len() {
            return Err(Error::InvalidBundle(format!(
                "weights at zero: expected {} entries, got {}",
                zero_blocks.len(),
                weights_zero.len()
            )));
        }
        if weights_infinity.len() != infinity_blocks.len() {
            return Err(Error::InvalidBundle(format!(
                "weights at infinity: expected {} entries, got {}",
                infinity_blocks.len(),
                weights_infinity.len()
            )));
        }
        let mut zb: Vec<JordanBlock> = zero_blocks
            .iter()
            .map(|b| JordanBlock::new(C64::new(b.kappa.re, norm_im(b.kappa.im)), b.dim))
            .collect();
        let mut wz = weights_zero;
        canonical_sort(&mut zb, &mut wz);
        let mut ib: Vec<JordanBlock> = infinity_blocks
            .iter()
            .map(|b| JordanBlock::new(C64::new(b.kappa.re, norm_im(b.kappa.im)), b.dim))
            .collect();
        let mut wi = weights_infinity;
        canonical_sort(&mut ib, &mut wi);

        let rz: usize = zb.iter().map(|b| b.dim).sum();
        let ri: usize = ib.iter().map(|b| b.dim).sum();
        if rz != rank || ri != rank {
            return Err(Error::InvalidBundle(format!(
                "block dims sum to {rz} at zero and {ri} at infinity, expected rank {rank}"
            )));
        }
        if zb.len() != ib.len() {
            return Err(Error::InvalidBundle(
                "block partitions at the two punctures differ".into(),
            ));
        }
        // Match blocks: κ_∞ = -κ_0 with Im mod 1, equal sizes.
        let mut used = vec![false; ib.len()];
        let mut matching = Vec::with_capacity(zb.len());
        for b in &zb {
            let want_re = -b.kappa.re;
            let want_im = norm_im(-b.kappa.im);
            let mut found = None;
            for (m, cand) in ib.iter().enumerate() {
                if used[m] || cand.dim != b.dim {
                    continue;
                }
                let dim_ok = (cand.kappa.re - want_re).abs() <= TOL_MATCH
                    && im_dist_mod1(cand.kappa.im, want_im) <= TOL_MATCH;
                if dim_ok {
                    found = Some(m);
                    break;
                }
            }
            match found {
                Some(m) => {
                    used[m] = true;
                    matching.push(m);
                }
                None => {
                    return Err(Error::InvalidBundle(format!(
                        "no infinity block matches zero block (kappa={}, dim={}); \
                         the punctures must carry inverse monodromy",
                        b.kappa, b.dim
                    )))
                }
            }
        }
        let degenerate = has_equal_kappa(&zb) || has_equal_kappa(&ib);
        Ok(FlatBundleSpec {
            rank,
            zero: PuncturePresentation {
                blocks: zb,
                puncture: Puncture::Zero,
            },
            infinity: PuncturePresentation {
                blocks: ib,
                puncture: Puncture::Infinity,
            },
            weights: ParabolicStructure {
                zero: wz,
                infinity: wi,
            },
            matching,
            degenerate,
        })
    }

    /// Rank-d bundle with a single Jordan block κ at zero (inverse residue at
    /// infinity) and one weight per puncture.
    pub fn single_jordan_block(dim: usize, kappa: C64, weights: [f64; 2]) -> Result<Self> {
        FlatBundleSpec::new(
            dim,
            vec![JordanBlock::new(kappa, dim)],
            vec![JordanBlock::new(-kappa, dim)],
            vec![weights[0]],
            vec![weights[1]],
        )
    }

    /// Direct sum of line bundles: one (κ, w_zero, w_infinity) triple each.
    pub fn direct_sum_of_lines(lines: &[(C64, f64, f64)]) -> Result<Self> {
        let zb = lines.iter().map(|l| JordanBlock::new(l.0, 1)).collect();
        let ib = lines.iter().map(|l| JordanBlock::new(-l.0, 1)).collect();
        FlatBundleSpec::new(
            lines.len(),
            zb,
            ib,
            lines.iter().map(|l| l.1).collect(),
            lines.iter().map(|l| l.2).collect(),
        )
    }

    pub fn block_count(&self) -> usize {
        self.zero.blocks.len()
    }

    /// Index of the infinity block matched with zero block ℓ.
    pub fn matched_infinity_index(&self, l: usize) -> usize {
        self.matching[l]
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Weight pair (zero, infinity) of matched block ℓ (zero-order index).
    pub fn weight_pair(&self, l: usize) -> (f64, f64) {
        (self.weights.zero[l], self.weights.infinity[self.matching[l]])
    }

    /// The flat bundle carried by a standard-family subbundle: block
    /// dimensions shrink to the prefixes (zero-prefix blocks drop out),
    /// eigenvalues and weights restrict.
    pub fn subbundle_spec(&self, sub: &FlatSubbundleSpec) -> Result<FlatBundleSpec> {
        sub.validate(self)?;
        if sub.rank() == 0 {
            return Err(Error::InvalidBundle("subbundle has rank 0".into()));
        }
        let mut zb = Vec::new();
        let mut ib = Vec::new();
        let mut wz = Vec::new();
        let mut wi = Vec::new();
        for (l, &s) in sub.prefixes.iter().enumerate() {
            if s == 0 {
                continue;
            }
            zb.push(JordanBlock::new(self.zero.blocks[l].kappa, s));
            let m = self.matching[l];
            ib.push(JordanBlock::new(self.infinity.blocks[m].kappa, s));
            wz.push(self.weights.zero[l]);
            wi.push(self.weights.infinity[m]);
        }
        FlatBundleSpec::new(sub.rank(), zb, ib, wz, wi)
    }

    /// Bundle induced by a subset of (whole) matched blocks.
    fn block_subset(&self, subset: &[usize]) -> FlatBundleSpec {
        let zb: Vec<JordanBlock> = subset.iter().map(|&l| self.zero.blocks[l]).collect();
        let ib: Vec<JordanBlock> = subset
            .iter()
            .map(|&l| self.infinity.blocks[self.matching[l]])
            .collect();
        let wz: Vec<f64> = subset.iter().map(|&l| self.weights.zero[l]).collect();
        let wi: Vec<f64> = subset
            .iter()
            .map(|&l| self.weights.infinity[self.matching[l]])
            .collect();
        let rank = zb.iter().map(|b| b.dim).sum();
        FlatBundleSpec::new(rank, zb, ib, wz, wi).expect("subset of a valid bundle is valid")
    }
}

fn norm_im(im: f64) -> f64 {
    let v = im.rem_euclid(1.0);
    if v >= 1.0 {
        0.0
    } else {
        v
    }
}

fn im_dist_mod1(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn has_equal_kappa(blocks: &[JordanBlock]) -> bool {
    for i in 0..blocks.len() {
        for j in i + 1..blocks.len() {
            if (blocks[i].kappa.re - blocks[j].kappa.re).abs() <= TOL_MATCH
                && im_dist_mod1(blocks[i].kappa.im, blocks[j].kappa.im) <= TOL_MATCH
            {
                return true;
            }
        }
    }
    false
}

/// A flat subbundle from the standard family: per matched block ℓ, the
/// chain-prefix length s_ℓ ∈ [0, d_ℓ] selecting the local invariant subbundle
/// ker N^{s_ℓ}. The same prefixes apply at both punctures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatSubbundleSpec {
    pub prefixes: Vec<usize>,
}

impl FlatSubbundleSpec {
    pub fn rank(&self) -> usize {
        self.prefixes.iter().sum()
    }

    pub fn validate(&self, bundle: &FlatBundleSpec) -> Result<()> {
        if self.prefixes.len() != bundle.block_count() {
            return Err(Error::InvalidBundle(format!(
                "subbundle has {} prefixes, bundle has {} blocks",
                self.prefixes.len(),
                bundle.block_count()
            )));
        }
        for (l, &s) in self.prefixes.iter().enumerate() {
            if s > bundle.zero.blocks[l].dim {
                return Err(Error::InvalidBundle(format!(
                    "prefix {} exceeds block dim {}",
                    s, bundle.zero.blocks[l].dim
                )));
            }
        }
        Ok(())
    }
}

/// Parabolic degree: deg = Σ_punctures Σ_ℓ w_ℓ · d_ℓ, with d_ℓ replaced by the
/// prefix length for a subbundle.
pub fn parabolic_degree(bundle: &FlatBundleSpec, sub: Option<&FlatSubbundleSpec>) -> f64 {
    match sub {
        None => {
            let z: f64 = bundle
                .zero
                .blocks
                .iter()
                .zip(&bundle.weights.zero)
                .map(|(b, w)| w * b.dim as f64)
                .sum();
            let i: f64 = bundle
                .infinity
                .blocks
                .iter()
                .zip(&bundle.weights.infinity)
                .map(|(b, w)| w * b.dim as f64)
                .sum();
            z + i
        }
        Some(s) => s
            .prefixes
            .iter()
            .enumerate()
            .map(|(l, &sl)| {
                let (wz, wi) = bundle.weight_pair(l);
                (wz + wi) * sl as f64
            })
            .sum(),
    }
}

/// Degree divided by rank.
pub fn slope(bundle: &FlatBundleSpec, sub: Option<&FlatSubbundleSpec>) -> f64 {
    let deg = parabolic_degree(bundle, sub);
    let rk = match sub {
        None => bundle.rank,
        Some(s) => s.rank(),
    };
    deg / rk as f64
}

/// The standard family of proper flat subbundles: all chain-prefix tuples per
/// block, excluding 0 and E.
#[derive(Debug, Clone)]
pub struct SubbundleFamily {
    pub subs: Vec<FlatSubbundleSpec>,
    /// Equal-κ multi-block degeneracy: a continuum of invariant subspaces
    /// exists and only the block-aligned family is returned.
    pub degenerate: bool,
}

pub fn enumerate_flat_subbundles(bundle: &FlatBundleSpec) -> SubbundleFamily {
    let dims: Vec<usize> = bundle.zero.blocks.iter().map(|b| b.dim).collect();
    let total: usize = dims.iter().map(|d| d + 1).product();
    let mut subs = Vec::new();
    for code in 0..total {
        let mut c = code;
        let mut prefixes = Vec::with_capacity(dims.len());
        for &d in &dims {
            prefixes.push(c % (d + 1));
            c /= d + 1;
        }
        let rank: usize = prefixes.iter().sum();
        if rank == 0 || rank == bundle.rank {
            continue;
        }
        subs.push(FlatSubbundleSpec { prefixes });
    }
    // Deterministic order: by rank, then lexicographic prefixes.
    subs.sort_by(|a, b| (a.rank(), &a.prefixes).cmp(&(b.rank(), &b.prefixes)));
    SubbundleFamily {
        subs,
        degenerate: bundle.is_degenerate(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityClass {
    Stable,
    StrictlySemistable,
    Polystable,
    Unstable,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityVerdict {
    pub class: StabilityClass,
    /// Slope-maximal witness, present for unstable and strictly-semistable.
    pub witness: Option<(FlatSubbundleSpec, f64)>,
    pub mu: f64,
    /// Classification covers only the block-aligned standard family (equal-κ
    /// degeneracy present).
    pub standard_family_only: bool,
}

/// Classify by comparing slopes over the standard subbundle family.
/// Polystable means E decomposes into whole-block groups, each a stable
/// bundle of slope μ(E).
pub fn stability_classify(bundle: &FlatBundleSpec) -> StabilityVerdict {
    let mu = slope(bundle, None);
    let family = enumerate_flat_subbundles(bundle);
    if family.subs.is_empty() {
        return StabilityVerdict {
            class: StabilityClass::Stable,
            witness: None,
            mu,
            standard_family_only: family.degenerate,
        };
    }
    let mut best: Option<(&FlatSubbundleSpec, f64)> = None;
    for s in &family.subs {
        let sl = slope(bundle, Some(s));
        let better = match best {
            None => true,
            Some((_, bs)) => sl > bs + TOL_SLOPE,
        };
        if better {
            best = Some((s, sl));
        }
    }
    let (bsub, bslope) = best.unwrap();
    let class;
    let mut witness = None;
    if bslope > mu + TOL_SLOPE {
        class = StabilityClass::Unstable;
        witness = Some((bsub.clone(), bslope));
    } else if bslope < mu - TOL_SLOPE {
        class = StabilityClass::Stable;
    } else if is_polystable(bundle, mu) {
        class = StabilityClass::Polystable;
    } else {
        class = StabilityClass::StrictlySemistable;
        witness = Some((bsub.clone(), bslope));
    }
    StabilityVerdict {
        class,
        witness,
        mu,
        standard_family_only: family.degenerate,
    }
}

fn is_polystable(bundle: &FlatBundleSpec, mu: f64) -> bool {
    let all: Vec<usize> = (0..bundle.block_count()).collect();
    partition_into_stable_slope(bundle, &all, mu)
}

/// Strict slope test only, no polystability recursion.
fn is_stable(bundle: &FlatBundleSpec) -> bool {
    let mu = slope(bundle, None);
    enumerate_flat_subbundles(bundle)
        .subs
        .iter()
        .all(|s| slope(bundle, Some(s)) < mu - TOL_SLOPE)
}

fn partition_into_stable_slope(bundle: &FlatBundleSpec, avail: &[usize], mu: f64) -> bool {
    if avail.is_empty() {
        return true;
    }
    let first = avail[0];
    let rest: Vec<usize> = avail[1..].to_vec();
    // all subsets containing `first`
    for mask in 0..(1usize << rest.len()) {
        let mut group = vec![first];
        let mut remain = Vec::new();
        for (i, &b) in rest.iter().enumerate() {
            if mask & (1 << i) != 0 {
                group.push(b);
            } else {
                remain.push(b);
            }
        }
        let gb = bundle.block_subset(&group);
        if (slope(&gb, None) - mu).abs() > TOL_SLOPE {
            continue;
        }
        if !is_stable(&gb) {
            continue;
        }
        if partition_into_stable_slope(bundle, &remain, mu) {
            return true;
        }
    }
    false
}

/// Jordan data of a complex residue matrix, by eigenvalue clustering at the
/// given tolerance followed by rank tests of (A - κI)^k. Numerical Jordan
/// form is ill-posed; this is a convenience with a hard failure mode.
pub fn jordan_blocks(matrix: &CMat, tol: f64) -> Result<Vec<JordanBlock>> {
    if tol <= 0.0 {
        return Err(Error::DomainError("jordan_blocks: tol must be > 0".into()));
    }
    let n = matrix.n;
    if matrix.a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::DomainError("jordan_blocks: non-finite entries".into()));
    }
    let eigs = linalg::eigenvalues(matrix)
        .ok_or_else(|| Error::NonConvergence("QR iteration failed to deflate".into()))?;
    // cluster
    let mut clusters: Vec<(C64, usize)> = Vec::new(); // (mean, count)
    for e in eigs {
        let mut placed = false;
        for cl in clusters.iter_mut() {
            if (e - cl.0).norm() <= tol {
                let k = cl.1 as f64;
                cl.0 = (cl.0 * k + e) / (k + 1.0);
                cl.1 += 1;
                placed = true;
                break;
            }
        }
        if !placed {
            clusters.push((e, 1));
        }
    }
    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            if (clusters[i].0 - clusters[j].0).norm() < 2.0 * tol {
                return Err(Error::NonConvergence(format!(
                    "eigenvalue clusters {} and {} are within 2*tol = {}; \
                     adjust tol or supply blocks directly",
                    clusters[i].0,
                    clusters[j].0,
                    2.0 * tol
                )));
            }
        }
    }
    let scale = matrix.norm_max().max(1.0);
    let mut blocks = Vec::new();
    for (kappa, mult) in clusters {
        let mut shifted = matrix.clone();
        for i in 0..n {
            shifted[(i, i)] -= kappa;
        }
        // m_k = dim ker (A-κ)^k; number of blocks of size >= k is m_k - m_{k-1}
        let mut power = CMat::identity(n);
        let mut kerdims = vec![0usize];
        loop {
            power = power.mul(&shifted);
            let rank = linalg::rank_with_tol(&power, tol * power.norm_max().max(scale));
            kerdims.push(n - rank);
            if n - rank >= mult || kerdims.len() > n {
                break;
            }
        }
        let kmax = kerdims.len() - 1;
        let ge = |k: usize| -> i64 {
            if k > kmax {
                0
            } else {
                kerdims[k] as i64 - kerdims[k - 1] as i64
            }
        };
        let mut total = 0usize;
        for k in 1..=kmax {
            let exactly = ge(k) - ge(k + 1);
            if exactly < 0 {
                return Err(Error::NonConvergence(
                    "inconsistent kernel filtration; rank tolerance too loose".into(),
                ));
            }
            for _ in 0..exactly {
                blocks.push(JordanBlock::new(kappa, k));
                total += k;
            }
        }
        if total != mult {
            return Err(Error::NonConvergence(format!(
                "block sizes for kappa={kappa} sum to {total}, expected multiplicity {mult}"
            )));
        }
    }
    let mut out = blocks;
    canonical_sort(&mut out, &mut []);
    Ok(out)
}
