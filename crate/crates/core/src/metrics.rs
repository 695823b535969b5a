//! Scalar losses: cross-entropy, Earth-Mover distance between class
//! distributions (closed form and Sinkhorn), and the Gaussian-kernel MMD
//! between channel sets.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::{softmax_in_place, Tensor};

const PROB_TOL: f64 = 1e-9;

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Empty("ProbDist"));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(invalid("probabilities must be finite and nonnegative"));
        }
        let s: f64 = p.iter().sum();
        if math::abs(s - 1.0) > PROB_TOL {
            return Err(invalid("probabilities must sum to 1"));
        }
        Ok(ProbDist(p))
    }

    /// `softmax(logits / t)`.
    pub fn softmax(logits: &[f64], t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if logits.is_empty() {
            return Err(Error::Empty("ProbDist::softmax"));
        }
        let mut p = logits.to_vec();
        softmax_in_place(&mut p, t);
        Ok(ProbDist(p))
    }

    pub fn uniform(c: usize) -> Self {
        ProbDist(vec![1.0 / c as f64; c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Symmetric nonnegative ground cost with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundCost {
    n: usize,
    cost: Vec<f64>,
}

impl GroundCost {
    pub fn new(n: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != n * n {
            return Err(Error::LengthMismatch {
                op: "GroundCost",
                expected: n * n,
                actual: cost.len(),
            });
        }
        for i in 0..n {
            if cost[i * n + i] != 0.0 {
                return Err(invalid("ground cost diagonal must be zero"));
            }
            for j in 0..n {
                let c = cost[i * n + j];
                if !(c >= 0.0) || c != cost[j * n + i] {
                    return Err(invalid("ground cost must be symmetric and nonnegative"));
                }
            }
        }
        Ok(GroundCost { n, cost })
    }

    /// `cost[i][j] = spacing · |i − j|`.
    pub fn line(n: usize, spacing: f64) -> Self {
        let cost = (0..n * n)
            .map(|k| spacing * math::abs((k / n) as f64 - (k % n) as f64))
            .collect();
        GroundCost { n, cost }
    }

    /// Class-index metric scaled to `[0, 1]`: `|i − j| / (c − 1)`.
    pub fn normalized_line(n: usize) -> Self {
        Self::line(n, default_spacing(n))
    }

    pub fn zeros(n: usize) -> Self {
        GroundCost {
            n,
            cost: vec![0.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }
}

/// Bin spacing of the default class-index metric, `1 / (c − 1)`.
pub fn default_spacing(c: usize) -> f64 {
    if c > 1 {
        1.0 / (c - 1) as f64
    } else {
        1.0
    }
}

/// `-log softmax(logits)[label]`, computed with log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(invalid("label out of range"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + math::ln(logits.iter().map(|&z| math::exp(z - max)).sum::<f64>());
    Ok(lse - logits[label])
}

/// `Σ_{k<c-1} |Σ_{i≤k} (mu_i − eta_i)|`.
pub(crate) fn em_cumsum_l1(mu: &[f64], eta: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut total = 0.0;
    for k in 0..mu.len().saturating_sub(1) {
        acc += mu[k] - eta[k];
        total += math::abs(acc);
    }
    total
}

/// Gradient of [`em_cumsum_l1`] with respect to `eta`, written into `out`.
///
/// At a kink (a cumulative difference of exactly zero) the subgradient 0 is
/// used for that term.
pub(crate) fn em_cumsum_l1_grad_eta(mu: &[f64], eta: &[f64], out: &mut [f64]) {
    let c = mu.len();
    let mut signs = vec![0.0; c];
    let mut acc = 0.0;
    for k in 0..c.saturating_sub(1) {
        acc += mu[k] - eta[k];
        signs[k] = math::signum0(acc);
    }
    // d/d eta_j of Σ_k |D_k| with D_k = Σ_{i≤k}(mu_i − eta_i) is −Σ_{k≥j} sign(D_k).
    let mut tail = 0.0;
    for j in (0..c).rev() {
        tail += signs[j];
        out[j] = -tail;
    }
}

/// Exact Wasserstein-1 distance between two distributions on unit-spaced
/// class indices.
pub fn em_distance_1d(mu: &ProbDist, eta: &ProbDist) -> Result<f64> {
    if mu.len() != eta.len() {
        return Err(Error::LengthMismatch {
            op: "em_distance_1d",
            expected: mu.len(),
            actual: eta.len(),
        });
    }
    Ok(em_cumsum_l1(mu.as_slice(), eta.as_slice()))
}

const SINKHORN_TOL: f64 = 1e-9;

/// Transport cost `⟨P, C⟩` of the entropy-regularized optimal plan,
/// computed with log-domain Sinkhorn iterations. The regularizer is
/// annealed from the largest cost down to `reg` by halving, with the dual
/// potentials carried between stages; `iters` bounds the total sweeps.
///
/// Returns [`Error::SinkhornNotConverged`] (carrying the last iterate's cost)
/// when the L1 marginal violation is still above `1e-9` after `iters`
/// sweeps.
pub fn em_distance_sinkhorn(
    mu: &ProbDist,
    eta: &ProbDist,
    cost: &GroundCost,
    reg: f64,
    iters: usize,
) -> Result<f64> {
    let n = mu.len();
    if eta.len() != n || cost.len() != n {
        return Err(Error::LengthMismatch {
            op: "em_distance_sinkhorn",
            expected: n,
            actual: if eta.len() != n { eta.len() } else { cost.len() },
        });
    }
    if !(reg > 0.0) {
        return Err(invalid("Sinkhorn regularization must be positive"));
    }
    if iters == 0 {
        return Err(invalid("Sinkhorn needs at least one iteration"));
    }
    let log_mu: Vec<f64> = mu.as_slice().iter().map(|&p| ln0(p)).collect();
    let log_eta: Vec<f64> = eta.as_slice().iter().map(|&p| ln0(p)).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];

    // ε-scaling: solve a sequence of problems with the regularizer halved
    // each stage, warm-starting the potentials, down to `reg`.
    let max_cost = (0..n * n).map(|k| cost.get(k / n, k % n)).fold(0.0, f64::max);
    let mut stages = Vec::new();
    let mut r = reg;
    while r < max_cost {
        stages.push(r);
        r *= 2.0;
    }
    stages.push(r);
    stages.reverse();
    let mut budget = iters;
    let mut err = f64::INFINITY;
    for (k, &stage_reg) in stages.iter().enumerate() {
        let last = k + 1 == stages.len();
        let tol = if last { SINKHORN_TOL } else { 1e-6 };
        let cap = if last { budget } else { budget.min(iters / stages.len() + 1) };
        let (e, used) = sinkhorn_sweeps(&mut f, &mut g, &log_mu, &log_eta, mu.as_slice(), cost, stage_reg, cap, tol);
        budget -= used;
        err = e;
        if budget == 0 && !last {
            break;
        }
    }
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            value += plan_entry(&f, &g, cost, reg, i, j) * cost.get(i, j);
        }
    }
    if err < SINKHORN_TOL {
        Ok(value)
    } else {
        Err(Error::SinkhornNotConverged {
            iters,
            error: err,
            value,
        })
    }
}

/// Alternating exact dual updates at a fixed regularizer until the L1 row
/// marginal violation drops below `tol` or `max` sweeps are spent. Returns
/// the violation and the sweeps used.
#[allow(clippy::too_many_arguments)]
fn sinkhorn_sweeps(
    f: &mut [f64],
    g: &mut [f64],
    log_mu: &[f64],
    log_eta: &[f64],
    mu: &[f64],
    cost: &GroundCost,
    reg: f64,
    max: usize,
    tol: f64,
) -> (f64, usize) {
    let n = f.len();
    let mut buf = vec![0.0; n];
    let mut err = f64::INFINITY;
    for sweep in 0..max {
        for i in 0..n {
            for j in 0..n {
                buf[j] = (g[j] - cost.get(i, j)) / reg;
            }
            f[i] = if log_mu[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                reg * (log_mu[i] - log_sum_exp(&buf))
            };
        }
        for j in 0..n {
            for i in 0..n {
                buf[i] = (f[i] - cost.get(i, j)) / reg;
            }
            g[j] = if log_eta[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                reg * (log_eta[j] - log_sum_exp(&buf))
            };
        }
        err = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += plan_entry(f, g, cost, reg, i, j);
            }
            err += math::abs(row - mu[i]);
        }
        if err < tol {
            return (err, sweep + 1);
        }
    }
    (err, max)
}

fn plan_entry(f: &[f64], g: &[f64], cost: &GroundCost, reg: f64, i: usize, j: usize) -> f64 {
    if f[i] == f64::NEG_INFINITY || g[j] == f64::NEG_INFINITY {
        0.0
    } else {
        math::exp((f[i] + g[j] - cost.get(i, j)) / reg)
    }
}

fn ln0(p: f64) -> f64 {
    if p > 0.0 {
        math::ln(p)
    } else {
        f64::NEG_INFINITY
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + math::ln(v.iter().map(|&x| math::exp(x - max)).sum::<f64>())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn gaussian(d2: f64, bandwidth: f64) -> f64 {
    math::exp(-d2 / (2.0 * bandwidth * bandwidth))
}

/// Biased (V-statistic) Gaussian MMD² between the rows of `x` and `y`,
/// both row-major with row length `s`.
pub(crate) fn mmd_kernel_value(x: &[f64], y: &[f64], s: usize, bandwidth: f64) -> f64 {
    let (cs, ck) = (x.len() / s, y.len() / s);
    let mut kxx = 0.0;
    for p in 0..cs {
        let a = &x[p * s..(p + 1) * s];
        for q in 0..cs {
            kxx += gaussian(sq_dist(a, &x[q * s..(q + 1) * s]), bandwidth);
        }
    }
    let mut kyy = 0.0;
    for p in 0..ck {
        let a = &y[p * s..(p + 1) * s];
        for q in 0..ck {
            kyy += gaussian(sq_dist(a, &y[q * s..(q + 1) * s]), bandwidth);
        }
    }
    let mut kxy = 0.0;
    for p in 0..cs {
        let a = &x[p * s..(p + 1) * s];
        for q in 0..ck {
            kxy += gaussian(sq_dist(a, &y[q * s..(q + 1) * s]), bandwidth);
        }
    }
    let (cs, ck) = (cs as f64, ck as f64);
    kxx / (cs * cs) + kyy / (ck * ck) - 2.0 * kxy / (cs * ck)
}

/// Accumulates `scale · ∂MMD/∂x` into `out`.
pub(crate) fn mmd_kernel_grad_x(x: &[f64], y: &[f64], s: usize, bandwidth: f64, scale: f64, out: &mut [f64]) {
    let (cs, ck) = (x.len() / s, y.len() / s);
    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let wxx = scale * 2.0 / (cs * cs) as f64 * inv_bw2;
    let wxy = scale * 2.0 / (cs * ck) as f64 * inv_bw2;
    for p in 0..cs {
        let a = &x[p * s..(p + 1) * s];
        let o = &mut out[p * s..(p + 1) * s];
        for q in 0..cs {
            if q == p {
                continue;
            }
            let b = &x[q * s..(q + 1) * s];
            let k = gaussian(sq_dist(a, b), bandwidth);
            for t in 0..s {
                o[t] -= wxx * k * (a[t] - b[t]);
            }
        }
        for q in 0..ck {
            let b = &y[q * s..(q + 1) * s];
            let k = gaussian(sq_dist(a, b), bandwidth);
            for t in 0..s {
                o[t] += wxy * k * (a[t] - b[t]);
            }
        }
    }
}

/// Gaussian MMD between student channels `[cs, s]` (spatially softmaxed
/// here) and already-softened target channels `[ck, s]`.
pub fn mmd_gaussian(student_channels: &Tensor, vertex_channels: &Tensor, bandwidth: f64) -> Result<f64> {
    let (xs, ys) = (student_channels.shape(), vertex_channels.shape());
    if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[1] {
        return Err(Error::ShapeMismatch {
            op: "mmd_gaussian",
            lhs: xs.to_vec(),
            rhs: ys.to_vec(),
        });
    }
    if !(bandwidth > 0.0) {
        return Err(invalid("kernel bandwidth must be positive"));
    }
    let x = student_channels.softmax_last(1.0)?;
    Ok(mmd_kernel_value(x.data(), vertex_channels.data(), xs[1], bandwidth))
}

/// Median pairwise Euclidean distance, falling back to 1.0 when the median
/// is numerically zero.
pub fn median_heuristic_bandwidth(vectors: &[&[f64]]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(invalid("median heuristic needs at least two vectors"));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(invalid("vectors must share a length"));
    }
    let mut d = Vec::with_capacity(vectors.len() * (vectors.len() - 1) / 2);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            d.push(math::sqrt(sq_dist(vectors[i], vectors[j])));
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    Ok(if median < 1e-12 { 1.0 } else { median })
}
