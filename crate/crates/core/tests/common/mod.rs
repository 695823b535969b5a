#![allow(dead_code)]

pub mod grads;

use graphkd_core::rng::{self, Rng};
use graphkd_core::Tensor;
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    rng::stream(seed, 0)
}

pub fn random_vec(r: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

pub fn random_tensor(r: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(r, n, scale)).unwrap()
}

/// Strictly positive random distribution.
pub fn random_dist(r: &mut Rng, c: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..c).map(|_| r.gen_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// `(a ∗ b)_k = Σ_j a_j b_{(k−j) mod n}` by direct summation.
pub fn direct_circular_convolution(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    (0..n)
        .map(|k| (0..n).map(|j| a[j] * b[(k + n - j) % n]).sum())
        .collect()
}

/// Count sketch by explicit loops over the bucket table.
pub fn direct_count_sketch(x: &[f64], h: &[usize], s: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for j in 0..dim {
        for i in 0..x.len() {
            if h[i] == j {
                out[j] += s[i] * x[i];
            }
        }
    }
    out
}

/// Exact optimal transport cost between `mu` and `eta` under `cost`, solved
/// as a linear program over the `n × n` plan.
pub fn lp_transport(mu: &[f64], eta: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> f64 {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let n = mu.len();
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            vars.push(pb.add_var(cost(i, j), (0.0, f64::INFINITY)));
        }
    }
    for i in 0..n {
        let row: Vec<_> = (0..n).map(|j| (vars[i * n + j], 1.0)).collect();
        pb.add_constraint(&row[..], ComparisonOp::Eq, mu[i]);
    }
    for j in 0..n {
        let col: Vec<_> = (0..n).map(|i| (vars[i * n + j], 1.0)).collect();
        pb.add_constraint(&col[..], ComparisonOp::Eq, eta[j]);
    }
    pb.solve().expect("feasible transport problem").objective()
}

/// Three-term Gaussian MMD² with unit-normalized kernel sums, written out
/// over explicit channel lists.
pub fn hand_mmd(x: &[Vec<f64>], y: &[Vec<f64>], bw: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d2 / (2.0 * bw * bw)).exp()
    };
    let mut xx = 0.0;
    for a in x {
        for b in x {
            xx += k(a, b);
        }
    }
    let mut yy = 0.0;
    for a in y {
        for b in y {
            yy += k(a, b);
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k(a, b);
        }
    }
    let (m, n) = (x.len() as f64, y.len() as f64);
    xx / (m * m) + yy / (n * n) - 2.0 * xy / (m * n)
}

/// Softmax of a slice, by definition.
pub fn softmax(v: &[f64], t: f64) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error when both are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
