//! Kernel statistics behind the discovery stage: Gaussian Gram matrices,
//! HSIC dependence measures, the kernel conditional independence test, and
//! the normalized-HSIC direction score used to orient edges.
//!
//! All functions are pure given their inputs plus an explicit seed; callers
//! may evaluate independent tests in parallel.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::{Error, Result};

/// Gaussian-kernel Gram matrix with the bandwidth it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    bandwidth: f64,
}

impl GramMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }
}

/// How the null distribution of a test statistic is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMethod {
    /// Moment-matched gamma approximation (default; deterministic).
    GammaApprox,
    /// Seeded permutation null; the reference oracle at desk scale.
    Permutation,
}

/// Outcome of an (un)conditional independence test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceResult {
    pub statistic: f64,
    pub p_value: f64,
    pub independent: bool,
    pub alpha: f64,
    pub method: PValueMethod,
    /// Set when a degenerate kernel (all samples identical) short-circuited
    /// the test to independence.
    pub degenerate: bool,
}

/// Configuration for [`kci_test`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KciConfig {
    pub alpha: f64,
    pub method: PValueMethod,
    /// Number of permutations for the permutation null.
    pub permutations: usize,
    /// Ridge parameter for conditioning-Gram regression is
    /// `ridge_scale * n`.
    pub ridge_scale: f64,
    pub seed: u64,
}

impl Default for KciConfig {
    fn default() -> Self {
        KciConfig {
            alpha: 0.05,
            method: PValueMethod::GammaApprox,
            permutations: 500,
            ridge_scale: 1e-3,
            seed: 0,
        }
    }
}

/// Direction plausibility score; lower values favor the hypothesized
/// cause -> effect factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub delta: f64,
}

// ---------------------------------------------------------------------------
// Gram machinery
// ---------------------------------------------------------------------------

fn squared_distance(samples: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..samples.ncols() {
        let d = samples[(i, c)] - samples[(j, c)];
        acc += d * d;
    }
    acc
}

/// Median of pairwise Euclidean distances over distinct pairs; falls back to
/// 1 when the median is 0 (all samples identical).
pub fn median_bandwidth(samples: &DMatrix<f64>) -> Result<f64> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::Data(format!(
            "median_bandwidth needs at least 2 samples, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(squared_distance(samples, i, j).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if median == 0.0 { 1.0 } else { median })
}

/// Gaussian kernel matrix: `K[i][j] = exp(-||x_i - x_j||^2 / (2 bw^2))`.
pub fn gram_gaussian(samples: &DMatrix<f64>, bandwidth: f64) -> Result<GramMatrix> {
    if !(bandwidth > 0.0) {
        return Err(Error::Data(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let n = samples.nrows();
    let denom = 2.0 * bandwidth * bandwidth;
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        entries[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = (-squared_distance(samples, i, j) / denom).exp();
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(GramMatrix { entries, bandwidth })
}

/// Gram matrix with the median-heuristic bandwidth.
pub fn gram_median(samples: &DMatrix<f64>) -> Result<GramMatrix> {
    gram_gaussian(samples, median_bandwidth(samples)?)
}

/// Double centering `H M H` with `H = I - (1/n) 11^T`, computed row/column
/// wise in O(n^2).
fn center(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut row_means = vec![0.0; n];
    let mut col_means = vec![0.0; n];
    let mut grand = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)];
            row_means[i] += v;
            col_means[j] += v;
            grand += v;
        }
    }
    for v in row_means.iter_mut().chain(col_means.iter_mut()) {
        *v /= n as f64;
    }
    grand /= (n * n) as f64;
    DMatrix::from_fn(n, n, |i, j| m[(i, j)] - row_means[i] - col_means[j] + grand)
}

fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// The biased empirical HSIC `(1/n^2) trace(Kx H Ky H)`.
pub fn hsic(kx: &GramMatrix, ky: &GramMatrix) -> Result<f64> {
    let n = kx.len();
    if n != ky.len() {
        return Err(Error::Shape(format!(
            "hsic: Gram sizes differ ({n} vs {})",
            ky.len()
        )));
    }
    if n < 2 {
        return Err(Error::Data("hsic needs at least 2 samples".into()));
    }
    let kc = center(&kx.entries);
    let lc = center(&ky.entries);
    // trace(Kc Lc) = sum_ij Kc[i,j] Lc[j,i]; both symmetric.
    Ok(frobenius_inner(&kc, &lc) / (n * n) as f64)
}

fn all_rows_identical(samples: &DMatrix<f64>) -> bool {
    let n = samples.nrows();
    for i in 1..n {
        for c in 0..samples.ncols() {
            if samples[(i, c)] != samples[(0, c)] {
                return false;
            }
        }
    }
    true
}

fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut offset = 0;
    for b in blocks {
        out.view_mut((0, offset), (n, b.ncols())).copy_from(*b);
        offset += b.ncols();
    }
    out
}

// ---------------------------------------------------------------------------
// KCI test
// ---------------------------------------------------------------------------

fn gamma_p_value(statistic: f64, mean: f64, var: f64) -> f64 {
    if !(mean > 0.0) || !(var > 0.0) || !mean.is_finite() || !var.is_finite() {
        return 1.0;
    }
    let shape = mean * mean / var;
    let rate = mean / var; // statrs parameterizes by rate = 1/scale
    match Gamma::new(shape, rate) {
        Ok(g) => (1.0 - g.cdf(statistic)).clamp(0.0, 1.0),
        Err(_) => 1.0,
    }
}

/// `sum_ij A[i,j] * B[perm(i), perm(j)]`, the statistic of a row/column
/// permutation applied to B without materializing the permuted matrix.
fn permuted_inner(a: &DMatrix<f64>, b: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        let pi = perm[i];
        for j in 0..n {
            acc += a[(i, j)] * b[(pi, perm[j])];
        }
    }
    acc
}

fn permutation_p_value(
    kxc: &DMatrix<f64>,
    kyc: &DMatrix<f64>,
    statistic: f64,
    permutations: usize,
    seed: u64,
) -> f64 {
    let n = kxc.nrows();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut at_least = 0usize;
    for _ in 0..permutations {
        perm.shuffle(&mut rng);
        if permuted_inner(kxc, kyc, &perm) >= statistic {
            at_least += 1;
        }
    }
    (at_least + 1) as f64 / (permutations + 1) as f64
}

/// Unconditional HSIC test with the moment-matched gamma null.
///
/// Mean and variance of the statistic `n * HSIC_b = (1/n) tr(Kc Lc)` under
/// independence follow the standard moment-matching construction.
fn hsic_gamma_test(kx: &DMatrix<f64>, ky: &DMatrix<f64>) -> (f64, f64) {
    let n = kx.nrows();
    let nf = n as f64;
    let kc = center(kx);
    let lc = center(ky);
    let statistic = frobenius_inner(&kc, &lc) / nf;

    // Variance estimate from the elementwise product of the centered Grams.
    let mut sum_all = 0.0;
    let mut sum_diag = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = kc[(i, j)] * lc[(i, j)] / 6.0;
            let v2 = v * v;
            sum_all += v2;
            if i == j {
                sum_diag += v2;
            }
        }
    }
    let mut var_hsic = (sum_all - sum_diag) / (nf * (nf - 1.0));
    var_hsic *= 72.0 * (nf - 4.0) * (nf - 5.0) / (nf * (nf - 1.0) * (nf - 2.0) * (nf - 3.0));

    // Mean estimate from off-diagonal kernel means.
    let mut mu_x = 0.0;
    let mut mu_y = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                mu_x += kx[(i, j)];
                mu_y += ky[(i, j)];
            }
        }
    }
    mu_x /= nf * (nf - 1.0);
    mu_y /= nf * (nf - 1.0);
    let mean_hsic = (1.0 + mu_x * mu_y - mu_x - mu_y) / nf;

    // statistic ~ Gamma(mean^2/var, scale = var*n/mean) under H0.
    let p = gamma_p_value(statistic, nf * mean_hsic, nf * nf * var_hsic);
    (statistic, p)
}

/// Kernel (conditional) independence test.
///
/// Unconditional case: HSIC of x and y against its null. Conditional case:
/// the KCI construction — centered Grams of x and y are residualized on the
/// conditioning Gram via ridge regression, and the trace statistic of the
/// residual Grams is compared against a moment-matched gamma (or seeded
/// permutation) null.
pub fn kci_test(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
    cfg: &KciConfig,
) -> Result<IndependenceResult> {
    let n = x.nrows();
    if y.nrows() != n || z.is_some_and(|z| z.nrows() != n) {
        return Err(Error::Shape("kci_test: sample counts differ".into()));
    }
    if n < 10 {
        return Err(Error::Data(format!(
            "kci_test needs at least 10 samples, got {n}"
        )));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Data(format!("alpha must be in (0,1), got {}", cfg.alpha)));
    }
    if all_rows_identical(x) || all_rows_identical(y) {
        return Ok(IndependenceResult {
            statistic: 0.0,
            p_value: 1.0,
            independent: true,
            alpha: cfg.alpha,
            method: cfg.method,
            degenerate: true,
        });
    }

    let kx = gram_median(x)?.entries;
    let ky = gram_median(y)?.entries;

    let (statistic, p_value) = match z {
        None => match cfg.method {
            PValueMethod::GammaApprox => hsic_gamma_test(&kx, &ky),
            PValueMethod::Permutation => {
                let kc = center(&kx);
                let lc = center(&ky);
                let statistic = frobenius_inner(&kc, &lc) / n as f64;
                let p = permutation_p_value(
                    &kc.scale(1.0 / n as f64),
                    &lc,
                    statistic,
                    cfg.permutations,
                    cfg.seed,
                );
                (statistic, p)
            }
        },
        Some(z) => {
            let kz = gram_median(z)?.entries;
            let kxc = center(&kx);
            let kyc = center(&ky);
            let kzc = center(&kz);
            // R = eps (Kz~ + eps I)^-1 projects onto the kernel-regression
            // residual space of the conditioning variable.
            let eps = cfg.ridge_scale * n as f64;
            let mut reg = kzc;
            for i in 0..n {
                reg[(i, i)] += eps;
            }
            let chol = reg.cholesky().ok_or_else(|| {
                Error::Numerical("kci_test: conditioning Gram not invertible".into())
            })?;
            let r = chol.inverse().scale(eps);
            let kx_res = &r * kxc * &r;
            let ky_res = &r * kyc * &r;
            let statistic = frobenius_inner(&kx_res, &ky_res);
            let p = match cfg.method {
                PValueMethod::GammaApprox => {
                    let mean = kx_res.trace() * ky_res.trace() / n as f64;
                    let var = 2.0
                        * frobenius_inner(&kx_res, &kx_res)
                        * frobenius_inner(&ky_res, &ky_res)
                        / (n * n) as f64;
                    gamma_p_value(statistic, mean, var)
                }
                PValueMethod::Permutation => {
                    permutation_p_value(&kx_res, &ky_res, statistic, cfg.permutations, cfg.seed)
                }
            };
            (statistic, p)
        }
    };

    Ok(IndependenceResult {
        statistic,
        p_value,
        independent: p_value > cfg.alpha,
        alpha: cfg.alpha,
        method: cfg.method,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Direction score
// ---------------------------------------------------------------------------

/// Gram matrix of conditional-distribution embeddings: the smoother
/// `W = K_cond (K_cond + eps I)^-1` maps samples to embedding weights, and
/// the embedding inner products are `W K_target W`.
fn embedding_gram(
    k_cond: &DMatrix<f64>,
    k_target: &DMatrix<f64>,
    ridge_scale: f64,
) -> Result<DMatrix<f64>> {
    let n = k_cond.nrows();
    let eps = ridge_scale * n as f64;
    let mut reg = k_cond.clone();
    for i in 0..n {
        reg[(i, i)] += eps;
    }
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Numerical("direction_score: Gram not invertible".into()))?;
    let w = k_cond * chol.inverse();
    Ok(&w * k_target * w.transpose())
}

/// Normalized HSIC between the kernel embedding of p(cause | U) and of
/// p(effect | cause, U); conditioning on the effective parameters of U is
/// realized by conditioning on the root series directly. Lower values mean
/// the hypothesized direction factorizes into more independently-changing
/// modules.
pub fn direction_score(
    cause: &DMatrix<f64>,
    effect: &DMatrix<f64>,
    surrogate: &DMatrix<f64>,
    ridge_scale: f64,
) -> Result<DirectionScore> {
    let n = cause.nrows();
    if effect.nrows() != n || surrogate.nrows() != n {
        return Err(Error::Shape("direction_score: sample counts differ".into()));
    }
    if n < 2 {
        return Err(Error::Data("direction_score needs at least 2 samples".into()));
    }
    if all_rows_identical(cause) || all_rows_identical(effect) {
        return Err(Error::Data(
            "direction_score: degenerate (constant) sample block".into(),
        ));
    }

    let k_u = gram_median(surrogate)?.entries;
    let k_cause = gram_median(cause)?.entries;
    let k_effect = gram_median(effect)?.entries;
    let joint = hstack(&[cause, surrogate]);
    let k_joint = gram_median(&joint)?.entries;

    // Embeddings of p(cause | U) and p(effect | cause, U) per sample.
    let m_cause = embedding_gram(&k_u, &k_cause, ridge_scale)?;
    let m_effect = embedding_gram(&k_joint, &k_effect, ridge_scale)?;

    let a = center(&m_cause);
    let b = center(&m_effect);
    let cross = frobenius_inner(&a, &b);
    let na = frobenius_inner(&a, &a);
    let nb = frobenius_inner(&b, &b);
    let delta = if na <= 0.0 || nb <= 0.0 {
        0.0
    } else {
        (cross / (na.sqrt() * nb.sqrt())).max(0.0)
    };
    Ok(DirectionScore { delta })
}
