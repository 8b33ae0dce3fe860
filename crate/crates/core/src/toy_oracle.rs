//! Analytic conditional distribution of independent normals given their
//! observed minimum and maximum.
//!
//! For `X_i ~ N(mu_i, sd_i)` independent, conditioning on
//! `min X = x_min, max X = x_max` gives each marginal an atom at `x_min`
//! (probability that coordinate is the minimum), an atom at `x_max`, and a
//! truncated-normal interior. The pair-probability matrix
//! `P[i][j] = Pr(X_i is the min and X_j is the max)` determines all weights.
//! This is the ground truth the constrained sampler is validated against.
//!
//! All products are evaluated in log space; interval probabilities go through
//! the complementary error function so the p=100 toy case survives tail
//! underflow.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::{erf, erfc, erfc_inv};

use crate::error::{Error, Result};

/// Independent normal coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct IndepNormalSpec {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl IndepNormalSpec {
    pub fn new(means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        if means.len() != sds.len() || means.is_empty() {
            return Err(Error::invalid("means and sds must have equal, nonzero length"));
        }
        if !means.iter().all(|m| m.is_finite()) || !sds.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::invalid("means must be finite and sds positive"));
        }
        Ok(IndepNormalSpec { means, sds })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Shift every mean by `c` (used by the equivariance property).
    pub fn shifted(&self, c: f64) -> IndepNormalSpec {
        IndepNormalSpec {
            means: self.means.iter().map(|m| m + c).collect(),
            sds: self.sds.clone(),
        }
    }
}

/// The 100-dimensional sinusoidal test case: `mu_i = 10 + sin(2 pi i / 50)`,
/// `sd_i = 0.1 + cos^2(2 pi i / 50)`, i = 1..=100.
pub fn toy_spec() -> IndepNormalSpec {
    let n = 100;
    let mut means = Vec::with_capacity(n);
    let mut sds = Vec::with_capacity(n);
    for i in 1..=n {
        let a = 2.0 * std::f64::consts::PI * i as f64 / 50.0;
        means.push(10.0 + a.sin());
        sds.push(0.1 + a.cos().powi(2));
    }
    IndepNormalSpec { means, sds }
}

/// Observed extrema of the §4.1 demonstration.
pub const TOY_X_MIN: f64 = 8.8;
pub const TOY_X_MAX: f64 = 12.5;

// ---------------------------------------------------------------------------
// Stable normal helpers.

pub(crate) fn ln_normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub(crate) fn norm_cdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / (sd * std::f64::consts::SQRT_2);
    0.5 * erfc(-z)
}

/// `ln erfc(x)` without underflow; asymptotic expansion past the range where
/// erfc is representable.
fn ln_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        // erfc(x) ~ exp(-x^2) / (x sqrt(pi)) * (1 - 1/(2x^2) + 3/(4x^4) - ...)
        let x2 = x * x;
        let series = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2);
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
    }
}

/// `ln (Phi((b-mu)/sd) - Phi((a-mu)/sd))` for `a < b`, stable in both tails.
pub(crate) fn ln_norm_interval(mu: f64, sd: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a < b);
    let za = (a - mu) / sd;
    let zb = (b - mu) / sd;
    let s2 = std::f64::consts::SQRT_2;
    if za >= 0.0 {
        // Both in the upper tail: p = (erfc(za/s2) - erfc(zb/s2)) / 2.
        let la = ln_erfc(za / s2);
        let lb = ln_erfc(zb / s2);
        std::f64::consts::LN_2.mul_add(-1.0, la) + ln_sub_exp0(lb - la)
    } else if zb <= 0.0 {
        // Mirror into the upper tail.
        let la = ln_erfc(-zb / s2);
        let lb = ln_erfc(-za / s2);
        std::f64::consts::LN_2.mul_add(-1.0, la) + ln_sub_exp0(lb - la)
    } else {
        // Straddles the mean; direct difference is well conditioned.
        let p = 0.5 * (erf(zb / s2) - erf(za / s2));
        p.ln()
    }
}

/// `ln(1 - exp(d))` for `d <= 0`.
fn ln_sub_exp0(d: f64) -> f64 {
    if d >= 0.0 {
        f64::NEG_INFINITY
    } else if d > -0.693 {
        (-d.exp_m1()).ln()
    } else {
        (-(d.exp() - 1.0)).ln()
    }
}

/// Inverse standard normal CDF via erfc_inv.
fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

// ---------------------------------------------------------------------------

/// Pair-probability matrix: `p[(i, j)] = Pr(X_i is the min and X_j is the max)`.
#[derive(Debug, Clone)]
pub struct ExtremaPairProbs {
    pub p: DMatrix<f64>,
    /// Row sums: probability that coordinate i is the minimum.
    pub p_min: Vec<f64>,
    /// Column sums: probability that coordinate j is the maximum.
    pub p_max: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
}

/// Compute the pair-probability matrix for observed extrema.
///
/// Unnormalized weight of (i, j):
/// `f_i(x_min) f_j(x_max) prod_{k != i,j} (F_k(x_max) - F_k(x_min))`,
/// evaluated as `S - lnD_i - lnD_j + ln f_i + ln f_j` with `S = sum_k lnD_k`.
pub fn extrema_pair_probs(spec: &IndepNormalSpec, x_min: f64, x_max: f64) -> Result<ExtremaPairProbs> {
    if !(x_min < x_max) {
        return Err(Error::invalid("need x_min < x_max"));
    }
    let p = spec.dim();
    if p < 2 {
        return Err(Error::invalid("need at least two coordinates"));
    }
    let ln_d: Vec<f64> = (0..p)
        .map(|k| ln_norm_interval(spec.means[k], spec.sds[k], x_min, x_max))
        .collect();
    // F_k(x_max) - F_k(x_min) == 0 in double precision.
    if ln_d.iter().any(|d| *d < -745.0) {
        return Err(Error::invalid(
            "degenerate support: some coordinate has zero mass on (x_min, x_max)",
        ));
    }
    let s: f64 = ln_d.iter().sum();
    let lf_min: Vec<f64> = (0..p)
        .map(|i| ln_normal_pdf(x_min, spec.means[i], spec.sds[i]))
        .collect();
    let lf_max: Vec<f64> = (0..p)
        .map(|j| ln_normal_pdf(x_max, spec.means[j], spec.sds[j]))
        .collect();

    let mut logw = DMatrix::<f64>::from_element(p, p, f64::NEG_INFINITY);
    let mut wmax = f64::NEG_INFINITY;
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let lw = lf_min[i] + lf_max[j] + s - ln_d[i] - ln_d[j];
            logw[(i, j)] = lw;
            if lw > wmax {
                wmax = lw;
            }
        }
    }
    if !wmax.is_finite() {
        return Err(Error::numerical("all pair weights vanished"));
    }
    let mut probs = DMatrix::<f64>::zeros(p, p);
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                let v = (logw[(i, j)] - wmax).exp();
                probs[(i, j)] = v;
                total += v;
            }
        }
    }
    probs /= total;
    let p_min: Vec<f64> = (0..p).map(|i| probs.row(i).sum()).collect();
    let p_max: Vec<f64> = (0..p).map(|j| probs.column(j).sum()).collect();
    Ok(ExtremaPairProbs {
        p: probs,
        p_min,
        p_max,
        x_min,
        x_max,
    })
}

/// Conditional CDF of coordinate `i` given the extrema: an atom of `p_min[i]`
/// at `x_min`, an atom of `p_max[i]` at `x_max`, and a truncated-normal
/// interior carrying the rest.
pub fn conditional_cdf(
    spec: &IndepNormalSpec,
    probs: &ExtremaPairProbs,
    i: usize,
    x: f64,
) -> Result<f64> {
    if i >= spec.dim() {
        return Err(Error::invalid("coordinate index out of range"));
    }
    let (x_min, x_max) = (probs.x_min, probs.x_max);
    if x < x_min {
        return Ok(0.0);
    }
    if x >= x_max {
        return Ok(1.0);
    }
    let interior = 1.0 - probs.p_min[i] - probs.p_max[i];
    if x == x_min || interior <= 0.0 {
        return Ok(probs.p_min[i]);
    }
    let ln_num = ln_norm_interval(spec.means[i], spec.sds[i], x_min, x);
    let ln_den = ln_norm_interval(spec.means[i], spec.sds[i], x_min, x_max);
    let ratio = (ln_num - ln_den).exp().min(1.0);
    Ok(probs.p_min[i] + interior * ratio)
}

/// Generalized inverse (infimum convention) of [`conditional_cdf`] by
/// bisection to 1e-9 absolute tolerance. Quantiles inside the atoms map to
/// the atoms' locations.
pub fn conditional_quantiles(
    spec: &IndepNormalSpec,
    probs: &ExtremaPairProbs,
    i: usize,
    qs: &[f64],
) -> Result<Vec<f64>> {
    if i >= spec.dim() {
        return Err(Error::invalid("coordinate index out of range"));
    }
    if qs.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Error::invalid("quantile levels must lie in (0, 1)"));
    }
    let (x_min, x_max) = (probs.x_min, probs.x_max);
    qs.iter()
        .map(|&q| {
            if q <= probs.p_min[i] {
                return Ok(x_min);
            }
            if q >= 1.0 - probs.p_max[i] {
                return Ok(x_max);
            }
            let mut lo = x_min;
            let mut hi = x_max;
            while hi - lo > 1e-9 {
                let mid = 0.5 * (lo + hi);
                if conditional_cdf(spec, probs, i, mid)? >= q {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        })
        .collect()
}

/// Joint law of a coordinate pair, decomposed into the seven exclusive cases:
/// both extreme (two corners), one extreme (four boundary slices), neither
/// (interior product of truncated normals). Weights sum to one.
#[derive(Debug, Clone)]
pub struct PairJoint {
    pub i: usize,
    pub j: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// Pr(X_i = x_min and X_j = x_max).
    pub corner_ij: f64,
    /// Pr(X_j = x_min and X_i = x_max).
    pub corner_ji: f64,
    /// Pr(X_i = x_min, X_j interior), and the three analogues.
    pub slice_i_min: f64,
    pub slice_i_max: f64,
    pub slice_j_min: f64,
    pub slice_j_max: f64,
    /// Pr(neither i nor j is an extremum).
    pub interior: f64,
    ti: TruncNorm,
    tj: TruncNorm,
}

#[derive(Debug, Clone, Copy)]
struct TruncNorm {
    mu: f64,
    sd: f64,
    ln_mass: f64,
}

impl TruncNorm {
    fn pdf(&self, x: f64, lo: f64, hi: f64) -> f64 {
        if x <= lo || x >= hi {
            0.0
        } else {
            (ln_normal_pdf(x, self.mu, self.sd) - self.ln_mass).exp()
        }
    }
}

/// Decompose the joint law of coordinates `i != j`.
pub fn pair_joint(
    spec: &IndepNormalSpec,
    probs: &ExtremaPairProbs,
    i: usize,
    j: usize,
) -> Result<PairJoint> {
    let p = spec.dim();
    if i == j || i >= p || j >= p {
        return Err(Error::invalid("need two distinct in-range coordinates"));
    }
    let corner_ij = probs.p[(i, j)];
    let corner_ji = probs.p[(j, i)];
    let slice_i_min = (probs.p_min[i] - corner_ij).max(0.0);
    let slice_i_max = (probs.p_max[i] - corner_ji).max(0.0);
    let slice_j_min = (probs.p_min[j] - corner_ji).max(0.0);
    let slice_j_max = (probs.p_max[j] - corner_ij).max(0.0);
    let interior = (1.0
        - corner_ij
        - corner_ji
        - slice_i_min
        - slice_i_max
        - slice_j_min
        - slice_j_max)
        .max(0.0);
    let mk = |c: usize| TruncNorm {
        mu: spec.means[c],
        sd: spec.sds[c],
        ln_mass: ln_norm_interval(spec.means[c], spec.sds[c], probs.x_min, probs.x_max),
    };
    Ok(PairJoint {
        i,
        j,
        x_min: probs.x_min,
        x_max: probs.x_max,
        corner_ij,
        corner_ji,
        slice_i_min,
        slice_i_max,
        slice_j_min,
        slice_j_max,
        interior,
        ti: mk(i),
        tj: mk(j),
    })
}

/// Which coordinate of the pair sits at which extremum in a boundary slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceCase {
    IMin,
    IMax,
    JMin,
    JMax,
}

impl PairJoint {
    /// Interior joint density at (x, y): weight times the product of the two
    /// truncated-normal densities.
    pub fn interior_pdf(&self, x: f64, y: f64) -> f64 {
        self.interior
            * self.ti.pdf(x, self.x_min, self.x_max)
            * self.tj.pdf(y, self.x_min, self.x_max)
    }

    /// Density of the free coordinate of a boundary slice, scaled by the
    /// slice's probability (so it integrates to the slice weight).
    pub fn slice_pdf(&self, case: SliceCase, v: f64) -> f64 {
        match case {
            SliceCase::IMin => self.slice_i_min * self.tj.pdf(v, self.x_min, self.x_max),
            SliceCase::IMax => self.slice_i_max * self.tj.pdf(v, self.x_min, self.x_max),
            SliceCase::JMin => self.slice_j_min * self.ti.pdf(v, self.x_min, self.x_max),
            SliceCase::JMax => self.slice_j_max * self.ti.pdf(v, self.x_min, self.x_max),
        }
    }

    /// Total probability over corners, slices, and interior; equals one by
    /// construction up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.corner_ij
            + self.corner_ji
            + self.slice_i_min
            + self.slice_i_max
            + self.slice_j_min
            + self.slice_j_max
            + self.interior
    }
}

// ---------------------------------------------------------------------------
// Reference samplers.

/// Tolerance-band rejection sampler: accept prior draws whose minimum and
/// maximum land within `delta` of the observed extrema. The independent
/// ground-truth oracle for small dimension; its acceptance probability decays
/// too fast to be usable at p = 100.
#[derive(Debug, Clone)]
pub struct RejectionBand {
    pub accepted: Vec<Vec<f64>>,
    pub proposals: u64,
    pub delta: f64,
}

pub fn rejection_band(
    spec: &IndepNormalSpec,
    x_min: f64,
    x_max: f64,
    delta: f64,
    proposals: u64,
    seed: u64,
) -> Result<RejectionBand> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    if !(x_min < x_max) {
        return Err(Error::invalid("need x_min < x_max"));
    }
    let p = spec.dim();
    const BLOCK: u64 = 100_000;
    let n_blocks = proposals.div_ceil(BLOCK);
    let mut per_block: Vec<Vec<Vec<f64>>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(b + 1)));
            let todo = BLOCK.min(proposals - b * BLOCK);
            let mut acc = Vec::new();
            let mut x = vec![0.0f64; p];
            for _ in 0..todo {
                let mut mn = f64::INFINITY;
                let mut mx = f64::NEG_INFINITY;
                for (k, xi) in x.iter_mut().enumerate() {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    *xi = spec.means[k] + spec.sds[k] * z;
                    mn = mn.min(*xi);
                    mx = mx.max(*xi);
                }
                if (mn - x_min).abs() < delta && (mx - x_max).abs() < delta {
                    acc.push(x.clone());
                }
            }
            acc
        })
        .collect();
    let mut accepted = Vec::new();
    for block in per_block.iter_mut() {
        accepted.append(block);
    }
    Ok(RejectionBand {
        accepted,
        proposals,
        delta,
    })
}

/// Exact sampler of the conditional law, built from the pair-probability
/// decomposition: draw the (min, max) pair of indices, pin them to the
/// extrema, and draw every other coordinate as an independent truncated
/// normal. Used as the large-p reference where band rejection is infeasible;
/// itself validated against [`rejection_band`] at small p.
pub fn sample_conditional_exact(
    spec: &IndepNormalSpec,
    probs: &ExtremaPairProbs,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let p = spec.dim();
    if probs.p.nrows() != p {
        return Err(Error::invalid("probs computed for a different spec"));
    }
    // Flatten the pair distribution for inverse-CDF index draws.
    let mut cum = Vec::with_capacity(p * p);
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..p {
            acc += probs.p[(i, j)];
            cum.push(acc);
        }
    }
    let total = acc;
    let cdf_lo: Vec<f64> = (0..p)
        .map(|k| norm_cdf(probs.x_min, spec.means[k], spec.sds[k]))
        .collect();
    let cdf_hi: Vec<f64> = (0..p)
        .map(|k| norm_cdf(probs.x_max, spec.means[k], spec.sds[k]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let idx = cum.partition_point(|c| *c < u).min(p * p - 1);
        let (imin, jmax) = (idx / p, idx % p);
        let mut x = vec![0.0f64; p];
        for k in 0..p {
            if k == imin {
                x[k] = probs.x_min;
            } else if k == jmax {
                x[k] = probs.x_max;
            } else {
                let u: f64 = rng.random();
                let c = cdf_lo[k] + u * (cdf_hi[k] - cdf_lo[k]);
                x[k] = spec.means[k] + spec.sds[k] * norm_quantile(c.clamp(1e-300, 1.0 - 1e-16));
            }
        }
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn toy_spec_closed_forms() {
        let spec = toy_spec();
        assert_eq!(spec.dim(), 100);
        // i = 50: sin(2 pi) = 0.
        assert_relative_eq!(spec.means[49], 10.0, epsilon = 1e-12);
        // i = 25: cos^2(pi) = 1.
        assert_relative_eq!(spec.sds[24], 1.1, epsilon = 1e-12);
        // The formula's infimum 0.1 is approached, not attained, at integer i.
        let min_sd = spec.sds.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_sd >= 0.1 && min_sd < 0.105, "{min_sd}");
    }

    #[test]
    fn ln_norm_interval_matches_naive_in_easy_range() {
        for (mu, sd, a, b) in [
            (0.0, 1.0, -1.0, 2.0),
            (3.0, 0.5, 3.1, 4.0),
            (-2.0, 2.0, -9.0, -4.0),
            (10.0, 0.1, 8.8, 12.5),
        ] {
            let naive = (norm_cdf(b, mu, sd) - norm_cdf(a, mu, sd)).ln();
            let stable = ln_norm_interval(mu, sd, a, b);
            assert_relative_eq!(stable, naive, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn ln_norm_interval_survives_far_tails() {
        // Interval 30..40 sigma above the mean; naive difference is 0 - 0.
        let v = ln_norm_interval(0.0, 1.0, 30.0, 40.0);
        // ln Phi-bar(30) ~ -0.5*900 - ln(30 sqrt(2pi)).
        let expect = -0.5 * 900.0 - (30.0f64 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((v - expect).abs() < 0.01, "{v} vs {expect}");
        assert!(ln_erfc(40.0).is_finite());
    }

    #[test]
    fn two_identical_coordinates_split_evenly() {
        let spec = IndepNormalSpec::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let probs = extrema_pair_probs(&spec, -1.0, 1.0).unwrap();
        assert_relative_eq!(probs.p[(0, 1)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(probs.p[(1, 0)], 0.5, epsilon = 1e-12);
        assert_eq!(probs.p[(0, 0)], 0.0);
    }

    #[test]
    fn toy_pair_probs_normalize() {
        let spec = toy_spec();
        let probs = extrema_pair_probs(&spec, TOY_X_MIN, TOY_X_MAX).unwrap();
        let total: f64 = probs.p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
        for i in 0..100 {
            assert_eq!(probs.p[(i, i)], 0.0);
        }
        let sum_min: f64 = probs.p_min.iter().sum();
        let sum_max: f64 = probs.p_max.iter().sum();
        assert_relative_eq!(sum_min, 1.0, epsilon = 1e-12);
        assert_relative_eq!(sum_max, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_support_is_an_error() {
        let spec = IndepNormalSpec::new(vec![0.0, 1e6], vec![1.0, 1.0]).unwrap();
        // Second coordinate has zero mass on the interval.
        assert!(extrema_pair_probs(&spec, -1.0, 1.0).is_err());
        assert!(extrema_pair_probs(&spec, 1.0, -1.0).is_err());
    }

    #[test]
    fn pair_probs_match_rejection_band_p3() {
        let spec =
            IndepNormalSpec::new(vec![0.0, 0.4, -0.3], vec![1.0, 0.7, 1.3]).unwrap();
        let (x_min, x_max) = (-1.6, 1.8);
        let probs = extrema_pair_probs(&spec, x_min, x_max).unwrap();
        let band = rejection_band(&spec, x_min, x_max, 0.02, 10_000_000, 11).unwrap();
        let n = band.accepted.len();
        assert!(n > 500, "only {n} accepted draws");
        let mut counts = vec![vec![0usize; 3]; 3];
        for x in &band.accepted {
            let (mut imin, mut jmax) = (0, 0);
            for k in 1..3 {
                if x[k] < x[imin] {
                    imin = k;
                }
                if x[k] > x[jmax] {
                    jmax = k;
                }
            }
            counts[imin][jmax] += 1;
        }
        for i in 0..3 {
            for j in 0..3 {
                let phat = counts[i][j] as f64 / n as f64;
                let se = (phat * (1.0 - phat) / n as f64).sqrt().max(1e-4);
                let diff = (phat - probs.p[(i, j)]).abs();
                assert!(
                    diff < 3.0 * se + 0.01,
                    "P[{i}][{j}]: analytic {} vs band {phat} (se {se})",
                    probs.p[(i, j)]
                );
            }
        }
    }

    #[test]
    fn cdf_cases_and_monotonicity() {
        let spec = toy_spec();
        let probs = extrema_pair_probs(&spec, TOY_X_MIN, TOY_X_MAX).unwrap();
        for i in [0usize, 22, 49, 51, 99] {
            assert_eq!(conditional_cdf(&spec, &probs, i, 8.0).unwrap(), 0.0);
            assert_eq!(conditional_cdf(&spec, &probs, i, 12.5).unwrap(), 1.0);
            assert_eq!(conditional_cdf(&spec, &probs, i, 13.0).unwrap(), 1.0);
            // Atom at x_min.
            assert_relative_eq!(
                conditional_cdf(&spec, &probs, i, TOY_X_MIN).unwrap(),
                probs.p_min[i],
                epsilon = 1e-12
            );
            // Approaching x_max from the left leaves exactly the max atom.
            assert_relative_eq!(
                conditional_cdf(&spec, &probs, i, TOY_X_MAX - 1e-9).unwrap(),
                1.0 - probs.p_max[i],
                epsilon = 1e-6
            );
            let mut last = -1.0;
            let mut x = TOY_X_MIN;
            while x <= TOY_X_MAX {
                let f = conditional_cdf(&spec, &probs, i, x).unwrap();
                assert!(f >= last - 1e-12);
                last = f;
                x += 0.01;
            }
        }
        assert!(conditional_cdf(&spec, &probs, 100, 9.0).is_err());
    }

    #[test]
    fn quantile_atoms_and_inverse_property() {
        let spec = toy_spec();
        let probs = extrema_pair_probs(&spec, TOY_X_MIN, TOY_X_MAX).unwrap();
        let i = 22;
        let pm = probs.p_min[i];
        if pm > 1e-6 {
            let q = conditional_quantiles(&spec, &probs, i, &[pm * 0.5]).unwrap();
            assert_eq!(q[0], TOY_X_MIN);
        }
        let px = probs.p_max[i];
        let q = conditional_quantiles(&spec, &probs, i, &[1.0 - px * 0.5]).unwrap();
        assert_eq!(q[0], TOY_X_MAX);
        // Interior level: F(Q(q)) ~ q.
        let level = 0.6;
        let q = conditional_quantiles(&spec, &probs, i, &[level]).unwrap()[0];
        let f = conditional_cdf(&spec, &probs, i, q).unwrap();
        assert!((f - level).abs() < 1e-6, "F(Q(0.6)) = {f}");
    }

    #[test]
    fn p2_symmetric_cdf_jumps_to_half() {
        let spec = IndepNormalSpec::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let probs = extrema_pair_probs(&spec, -1.0, 1.0).unwrap();
        let f = conditional_cdf(&spec, &probs, 0, -0.999).unwrap();
        // p_min = 1/2 atom plus a sliver of truncated-normal mass.
        assert!(f >= 0.5 && f < 0.51, "{f}");
    }

    #[test]
    fn shift_equivariance_of_quantiles() {
        let spec = IndepNormalSpec::new(vec![0.0, 0.8, -0.5], vec![1.0, 0.6, 1.2]).unwrap();
        let (a, b) = (-1.5, 1.9);
        let probs = extrema_pair_probs(&spec, a, b).unwrap();
        let c = 7.25;
        let spec2 = spec.shifted(c);
        let probs2 = extrema_pair_probs(&spec2, a + c, b + c).unwrap();
        let qs = [0.1, 0.3, 0.5, 0.7, 0.9];
        for i in 0..3 {
            let q1 = conditional_quantiles(&spec, &probs, i, &qs).unwrap();
            let q2 = conditional_quantiles(&spec2, &probs2, i, &qs).unwrap();
            for (u, v) in q1.iter().zip(&q2) {
                assert!((u + c - v).abs() < 1e-6, "{u} + {c} vs {v}");
            }
        }
    }

    #[test]
    fn pair_joint_masses_sum_to_one() {
        let spec = toy_spec();
        let probs = extrema_pair_probs(&spec, TOY_X_MIN, TOY_X_MAX).unwrap();
        let pj = pair_joint(&spec, &probs, 22, 51).unwrap();
        assert!((pj.total_mass() - 1.0).abs() < 1e-9);

        // Numeric quadrature of interior + slices reproduces the weights.
        let steps = 4000;
        let h = (TOY_X_MAX - TOY_X_MIN) / steps as f64;
        let mut slice_mass = 0.0;
        for s in 0..steps {
            let v = TOY_X_MIN + (s as f64 + 0.5) * h;
            slice_mass += pj.slice_pdf(SliceCase::JMax, v) * h;
        }
        assert!(
            (slice_mass - pj.slice_j_max).abs() < 1e-4,
            "{slice_mass} vs {}",
            pj.slice_j_max
        );
        let mut interior_mass = 0.0;
        let coarse = 600;
        let hc = (TOY_X_MAX - TOY_X_MIN) / coarse as f64;
        for a in 0..coarse {
            let x = TOY_X_MIN + (a as f64 + 0.5) * hc;
            for b in 0..coarse {
                let y = TOY_X_MIN + (b as f64 + 0.5) * hc;
                interior_mass += pj.interior_pdf(x, y) * hc * hc;
            }
        }
        assert!(
            (interior_mass - pj.interior).abs() < 1e-3,
            "{interior_mass} vs {}",
            pj.interior
        );
    }

    #[test]
    fn p2_interior_is_empty() {
        let spec = IndepNormalSpec::new(vec![0.0, 0.2], vec![1.0, 0.9]).unwrap();
        let probs = extrema_pair_probs(&spec, -1.0, 1.0).unwrap();
        let pj = pair_joint(&spec, &probs, 0, 1).unwrap();
        assert!(pj.interior.abs() < 1e-12);
        assert!(pj.interior_pdf(0.0, 0.1).abs() < 1e-12);
        assert!(pair_joint(&spec, &probs, 0, 0).is_err());
    }

    #[test]
    fn exact_sampler_matches_rejection_band_p3() {
        let spec = IndepNormalSpec::new(vec![0.1, -0.2, 0.5], vec![0.8, 1.1, 0.9]).unwrap();
        let (x_min, x_max) = (-1.4, 1.7);
        let probs = extrema_pair_probs(&spec, x_min, x_max).unwrap();
        let exact = sample_conditional_exact(&spec, &probs, 40_000, 3).unwrap();
        let band = rejection_band(&spec, x_min, x_max, 0.02, 8_000_000, 5).unwrap();
        assert!(band.accepted.len() > 400);
        // Compare coordinate-0 CDFs on a grid clear of the delta bands.
        let mut worst = 0.0f64;
        let mut x = x_min + 0.05;
        while x < x_max - 0.05 {
            let fe = exact.iter().filter(|d| d[0] <= x).count() as f64 / exact.len() as f64;
            let fb = band.accepted.iter().filter(|d| d[0] <= x).count() as f64
                / band.accepted.len() as f64;
            worst = worst.max((fe - fb).abs());
            x += 0.1;
        }
        let band_se = 1.0 / (band.accepted.len() as f64).sqrt();
        assert!(worst < 3.0 * band_se + 0.02, "sup {worst}, se {band_se}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn cdf_monotone_for_random_small_specs(
            seed in 0u64..1000,
            shift in -2.0f64..2.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = 4;
            let means: Vec<f64> = (0..p).map(|_| shift + rng.random::<f64>() * 2.0 - 1.0).collect();
            let sds: Vec<f64> = (0..p).map(|_| 0.3 + rng.random::<f64>()).collect();
            let spec = IndepNormalSpec::new(means, sds).unwrap();
            let (a, b) = (shift - 2.5, shift + 2.5);
            let probs = extrema_pair_probs(&spec, a, b).unwrap();
            for i in 0..p {
                let mut last = -1.0;
                let mut x = a - 0.2;
                while x < b + 0.2 {
                    let f = conditional_cdf(&spec, &probs, i, x).unwrap();
                    prop_assert!(f >= last - 1e-12);
                    prop_assert!((0.0..=1.0).contains(&f));
                    last = f;
                    x += 0.05;
                }
            }
        }
    }
}
