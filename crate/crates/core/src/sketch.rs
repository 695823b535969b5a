//! Count Sketch projection and compact bilinear pooling of teacher feature
//! pairs into normalized representation-graph vertices.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::fft;
use crate::math;
use crate::rng;
use crate::tensor::Tensor;

/// Frozen hash buckets and signs of one Count Sketch.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchParams {
    /// Bucket of each input coordinate, in `0..dim`.
    pub h: Vec<usize>,
    /// Sign of each input coordinate, `±1`.
    pub s: Vec<f64>,
    pub dim: usize,
}

impl SketchParams {
    pub fn new(h: Vec<usize>, s: Vec<f64>, dim: usize) -> Result<Self> {
        if h.len() != s.len() {
            return Err(Error::LengthMismatch {
                op: "SketchParams",
                expected: h.len(),
                actual: s.len(),
            });
        }
        if dim == 0 || h.iter().any(|&b| b >= dim) {
            return Err(invalid("sketch buckets must lie in 0..dim"));
        }
        if s.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(invalid("sketch signs must be ±1"));
        }
        Ok(SketchParams { h, s, dim })
    }

    /// Uniform buckets and Rademacher signs.
    pub fn random(input_len: usize, dim: usize, rng: &mut rng::Rng) -> Self {
        let h = (0..input_len).map(|_| rng.gen_range(0..dim)).collect();
        let s = (0..input_len)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        SketchParams { h, s, dim }
    }

    pub fn input_len(&self) -> usize {
        self.h.len()
    }
}

/// `out[j] = Σ_{i : h[i] = j} s[i]·x[i]`.
pub fn count_sketch(x: &[f64], p: &SketchParams) -> Result<Vec<f64>> {
    if x.len() != p.h.len() {
        return Err(Error::LengthMismatch {
            op: "count_sketch",
            expected: p.h.len(),
            actual: x.len(),
        });
    }
    let mut out = vec![0.0; p.dim];
    for ((&v, &b), &sg) in x.iter().zip(&p.h).zip(&p.s) {
        out[b] += sg * v;
    }
    Ok(out)
}

/// Tensor-Sketch approximation of the flattened outer product `r_m ⊗ r_n`:
/// the circular convolution of the two count sketches, evaluated as
/// `IFFT(FFT(Ψ_m) ⊙ FFT(Ψ_n))`.
pub fn compact_bilinear(r_m: &[f64], r_n: &[f64], p1: &SketchParams, p2: &SketchParams) -> Result<Vec<f64>> {
    if p1.dim != p2.dim {
        return Err(Error::LengthMismatch {
            op: "compact_bilinear",
            expected: p1.dim,
            actual: p2.dim,
        });
    }
    let a = count_sketch(r_m, p1)?;
    let b = count_sketch(r_n, p2)?;
    fft::circular_convolve(&a, &b)
}

pub fn signed_sqrt(psi: &[f64]) -> Vec<f64> {
    psi.iter()
        .map(|&v| math::signum0(v) * math::sqrt(math::abs(v)))
        .collect()
}

const NORM_EPS: f64 = 1e-12;

/// `z / ‖z‖₂`; vectors with norm at most `1e-12` are returned unchanged.
pub fn l2_normalize(z: &[f64]) -> Vec<f64> {
    let norm = math::sqrt(z.iter().map(|v| v * v).sum());
    if norm <= NORM_EPS {
        z.to_vec()
    } else {
        z.iter().map(|v| v / norm).collect()
    }
}

/// One vertex of the representation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearVertex {
    /// Position in the lexicographic pair order, `0..C(n, 2)`.
    pub index: usize,
    /// Source teachers `(m, n)` with `m < n`.
    pub pair: (usize, usize),
    /// Unit-norm (or all-zero) vector of length `dim`.
    pub vector: Vec<f64>,
}

/// Unordered teacher pairs `(m, n)`, `m < n`, in lexicographic order.
pub fn teacher_pairs(n_teachers: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for m in 0..n_teachers {
        for n in m + 1..n_teachers {
            pairs.push((m, n));
        }
    }
    pairs
}

/// Sketch parameters for every teacher pair: `p1` sketches the first
/// teacher's feature and `p2` the second's.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchBank {
    pub pairs: Vec<(usize, usize)>,
    pub params: Vec<(SketchParams, SketchParams)>,
}

impl SketchBank {
    /// Draws one independent `(p1, p2)` per pair from `seed`. With `shared`
    /// set, `p2` is a copy of `p1` (requires equal feature lengths).
    pub fn random(feature_lens: &[usize], dim: usize, shared: bool, seed: u64) -> Result<Self> {
        if feature_lens.len() < 2 {
            return Err(invalid("at least two teachers are needed for pairwise pooling"));
        }
        if dim == 0 {
            return Err(invalid("sketch dimension must be positive"));
        }
        let pairs = teacher_pairs(feature_lens.len());
        let mut params = Vec::with_capacity(pairs.len());
        for (k, &(m, n)) in pairs.iter().enumerate() {
            let mut r = rng::stream(rng::derive(seed, 0x5ce7c4), k as u64);
            let p1 = SketchParams::random(feature_lens[m], dim, &mut r);
            let p2 = if shared {
                if feature_lens[m] != feature_lens[n] {
                    return Err(invalid("shared sketches need equal feature lengths"));
                }
                p1.clone()
            } else {
                SketchParams::random(feature_lens[n], dim, &mut r)
            };
            params.push((p1, p2));
        }
        Ok(SketchBank { pairs, params })
    }

    pub fn dim(&self) -> usize {
        self.params[0].0.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.pairs.len()
    }
}

/// `l2_normalize(signed_sqrt(compact_bilinear(R_m, R_n)))` for every teacher
/// pair, in the bank's pair order.
pub fn build_vertices(features: &[&[f64]], bank: &SketchBank) -> Result<Vec<BilinearVertex>> {
    if features.len() < 2 {
        return Err(invalid("at least two teacher features are needed"));
    }
    let expected = features.len() * (features.len() - 1) / 2;
    if bank.pairs.len() != expected {
        return Err(Error::LengthMismatch {
            op: "build_vertices",
            expected,
            actual: bank.pairs.len(),
        });
    }
    bank.pairs
        .iter()
        .zip(&bank.params)
        .enumerate()
        .map(|(index, (&(m, n), (p1, p2)))| {
            let psi = compact_bilinear(features[m], features[n], p1, p2)?;
            Ok(BilinearVertex {
                index,
                pair: (m, n),
                vector: l2_normalize(&signed_sqrt(&psi)),
            })
        })
        .collect()
}

/// Convenience wrapper over [`build_vertices`] for tensor features.
pub fn build_vertices_from_tensors(features: &[Tensor], bank: &SketchBank) -> Result<Vec<BilinearVertex>> {
    let f: Vec<&[f64]> = features.iter().map(Tensor::data).collect();
    build_vertices(&f, bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_sketch_definition() {
        let p = SketchParams::new(alloc::vec![0, 0], alloc::vec![1.0, -1.0], 2).unwrap();
        assert_eq!(count_sketch(&[2.0, 3.0], &p).unwrap(), alloc::vec![-1.0, 0.0]);
        assert_eq!(count_sketch(&[0.0, 0.0], &p).unwrap(), alloc::vec![0.0, 0.0]);
        assert!(count_sketch(&[1.0], &p).is_err());
    }

    #[test]
    fn sketch_param_validation() {
        assert!(SketchParams::new(alloc::vec![2], alloc::vec![1.0], 2).is_err());
        assert!(SketchParams::new(alloc::vec![0], alloc::vec![0.5], 2).is_err());
        assert!(SketchParams::new(alloc::vec![0, 1], alloc::vec![1.0], 2).is_err());
    }

    #[test]
    fn delta_sketch_is_convolution_identity() {
        let mut r = rng::stream(5, 0);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let p1 = SketchParams::random(12, 8, &mut r);
        // Every coordinate of y maps to bucket 0 with sign +1 and y sums to 1,
        // so Ψ(y) is the delta [1, 0, …, 0].
        let p2 = SketchParams::new(alloc::vec![0; 3], alloc::vec![1.0; 3], 8).unwrap();
        let y = [0.25, 0.25, 0.5];
        let out = compact_bilinear(&x, &y, &p1, &p2).unwrap();
        let direct = count_sketch(&x, &p1).unwrap();
        for (a, b) in out.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let zeros = compact_bilinear(&[0.0; 12], &y, &p1, &p2).unwrap();
        assert!(zeros.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn signed_sqrt_and_normalize() {
        assert_eq!(signed_sqrt(&[4.0, -9.0, 0.0]), alloc::vec![2.0, -3.0, 0.0]);
        assert_eq!(signed_sqrt(&[1.0]), alloc::vec![1.0]);
        let n = l2_normalize(&[3.0, 4.0]);
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[0.6, 0.8]), n);
        assert_eq!(l2_normalize(&[0.0, 0.0]), alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn vertex_counts_and_order() {
        for (teachers, expected) in [(2usize, 1usize), (3, 3), (4, 6)] {
            let lens = alloc::vec![10; teachers];
            let bank = SketchBank::random(&lens, 16, false, 7).unwrap();
            let feats: Vec<Vec<f64>> = (0..teachers)
                .map(|t| (0..10).map(|i| ((t * 10 + i) as f64).cos()).collect())
                .collect();
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let v = build_vertices(&refs, &bank).unwrap();
            assert_eq!(v.len(), expected);
            for (k, vert) in v.iter().enumerate() {
                assert_eq!(vert.index, k);
                let norm: f64 = vert.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9);
            }
        }
        let pairs: Vec<_> = teacher_pairs(3);
        assert_eq!(pairs, alloc::vec![(0, 1), (0, 2), (1, 2)]);
        assert!(SketchBank::random(&[10], 16, false, 1).is_err());
        let bank = SketchBank::random(&[4, 4], 8, false, 1).unwrap();
        assert!(build_vertices(&[&[0.0; 4]], &bank).is_err());
    }

    #[test]
    fn shared_sketch_switch() {
        let bank = SketchBank::random(&[6, 6, 6], 8, true, 3).unwrap();
        for (p1, p2) in &bank.params {
            assert_eq!(p1, p2);
        }
        let bank = SketchBank::random(&[6, 6, 6], 8, false, 3).unwrap();
        assert!(bank.params.iter().any(|(p1, p2)| p1 != p2));
        let again = SketchBank::random(&[6, 6, 6], 8, false, 3).unwrap();
        assert_eq!(bank, again);
    }
}
