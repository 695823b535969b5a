//! Dense row-major `f64` tensors and the raw numeric kernels shared by the
//! autodiff tape and by the plain (non-differentiated) code paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid("tensor dimensions must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::LengthMismatch {
                op: "Tensor::new",
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(invalid("transpose2 needs a 2-D tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        transpose(&self.data, &mut out, r, c);
        Tensor::new(vec![c, r], out)
    }

    /// Softmax over the last axis at temperature `t`.
    pub fn softmax_last(&self, t: f64) -> Result<Tensor> {
        if !(t > 0.0) {
            return Err(invalid("softmax temperature must be positive"));
        }
        let c = *self.shape.last().expect("non-empty shape");
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, t);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// FNV-1a over the raw bit patterns; used for bitwise freeze checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// `out += a · b` with explicit row and column strides for each operand.
#[allow(clippy::too_many_arguments)]
fn dgemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the asserts above bound every index reached through the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out += aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    dgemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), out);
}

/// `out += a · bᵀ` where `a` is `[m×k]` and `b` is `[n×k]`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
}

pub(crate) fn transpose(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], t: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = math::exp((*v - max) / t);
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be positive"));
        }
        let g = ConvGeom {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
        };
        if pad >= g.kh || pad >= g.kw {
            return Err(invalid("conv2d padding must be smaller than the kernel"));
        }
        if g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw {
            return Err(invalid("conv2d kernel larger than padded input"));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one image `[c_in, h, w]` into columns `[c_in·kh·kw, oh·ow]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], row_len: usize, offset: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c_in {
        let img = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * row_len + offset..row * row_len + offset + plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back into an image, accumulating overlaps.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64], row_len: usize, offset: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c_in {
        let img = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * row_len + offset..row * row_len + offset + plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Column buffers are capped near this many values; samples are processed
/// in chunks that fit.
const CONV_CHUNK: usize = 1 << 20;

fn conv_chunk(g: &ConvGeom) -> usize {
    (CONV_CHUNK / (g.patch_len() * g.out_plane()).max(1)).clamp(1, g.batch.max(1))
}

/// Lowers samples `n0..n0 + nb` into one `[patch_len, nb · plane]` matrix.
fn im2col_batch(x: &[f64], g: &ConvGeom, n0: usize, nb: usize, cols: &mut [f64]) {
    let img = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    for s in 0..nb {
        let n = n0 + s;
        im2col(&x[n * img..(n + 1) * img], g, cols, nb * plane, s * plane);
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let pl = g.patch_len();
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    let chunk = conv_chunk(g);
    let mut cols = vec![0.0; pl * chunk * plane];
    let mut tmp = vec![0.0; g.c_out * chunk * plane];
    let mut n0 = 0;
    while n0 < g.batch {
        let nb = chunk.min(g.batch - n0);
        let width = nb * plane;
        im2col_batch(x, g, n0, nb, &mut cols);
        let tmp = &mut tmp[..g.c_out * width];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        gemm(k, &cols[..pl * width], tmp, g.c_out, pl, width);
        for s in 0..nb {
            for co in 0..g.c_out {
                let dst = ((n0 + s) * g.c_out + co) * plane;
                out[dst..dst + plane].copy_from_slice(&tmp[co * width + s * plane..co * width + (s + 1) * plane]);
            }
        }
        n0 += nb;
    }
    out
}

/// Returns `(dx, dk)` for upstream gradient `dy` of shape `[batch, c_out, oh, ow]`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.out_plane();
    let pl = g.patch_len();
    let img = g.c_in * g.h * g.w;
    let chunk = conv_chunk(g);
    let mut cols = vec![0.0; pl * chunk * plane];
    let mut dyt = vec![0.0; g.c_out * chunk * plane];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dk = need_dk.then(|| vec![0.0; k.len()]);
    let mut n0 = 0;
    while n0 < g.batch {
        let nb = chunk.min(g.batch - n0);
        let width = nb * plane;
        let dyt = &mut dyt[..g.c_out * width];
        for s in 0..nb {
            for co in 0..g.c_out {
                let src = ((n0 + s) * g.c_out + co) * plane;
                dyt[co * width + s * plane..co * width + (s + 1) * plane].copy_from_slice(&dy[src..src + plane]);
            }
        }
        let cols = &mut cols[..pl * width];
        if let Some(dk) = dk.as_mut() {
            im2col_batch(x, g, n0, nb, cols);
            gemm_nt(dyt, cols, dk, g.c_out, width, pl);
        }
        if let Some(dx) = dx.as_mut() {
            cols.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn(k, dyt, cols, g.c_out, pl, width);
            for s in 0..nb {
                let n = n0 + s;
                col2im(cols, g, &mut dx[n * img..(n + 1) * img], width, s * plane);
            }
        }
        n0 += nb;
    }
    (dx, dk)
}
