//! Discrete Fourier transforms of any length: iterative radix-2 for powers
//! of two, Bluestein's chirp-z reduction otherwise.
//!
//! These are forward-only numeric routines. They are applied to frozen
//! teacher features and have no tape op, so nothing differentiates through
//! them.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::math;

/// In-place forward DFT, `X_k = Σ_j x_j e^{-2πi jk/n}`.
pub fn fft(buf: &mut [Complex64]) {
    transform(buf, false);
}

/// In-place inverse DFT including the `1/n` factor.
pub fn ifft(buf: &mut [Complex64]) {
    transform(buf, true);
    let n = buf.len() as f64;
    buf.iter_mut().for_each(|z| *z /= n);
}

/// Non-redundant half spectrum (`n/2 + 1` bins) of a real signal.
pub fn rfft(v: &[f64]) -> Result<Vec<Complex64>> {
    if v.is_empty() {
        return Err(Error::Empty("rfft"));
    }
    let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft(&mut buf);
    buf.truncate(v.len() / 2 + 1);
    Ok(buf)
}

/// Inverse of [`rfft`] for a real signal of length `n`.
pub fn irfft(half: &[Complex64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || half.len() != n / 2 + 1 {
        return Err(Error::LengthMismatch {
            op: "irfft",
            expected: n / 2 + 1,
            actual: half.len(),
        });
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..half.len()].copy_from_slice(half);
    for k in half.len()..n {
        buf[k] = half[n - k].conj();
    }
    ifft(&mut buf);
    Ok(buf.into_iter().map(|z| z.re).collect())
}

/// Circular convolution `(a ∗ b)_k = Σ_j a_j b_{(k−j) mod n}` through the
/// frequency domain.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            op: "circular_convolve",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let fa = rfft(a)?;
    let fb = rfft(b)?;
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    irfft(&prod, a.len())
}

fn transform(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        bluestein(buf, inverse);
    }
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        // Twiddles computed directly rather than by repeated multiplication
        // to keep round-off independent of the stage length.
        let tw: Vec<Complex64> = (0..half)
            .map(|k| Complex64::new(math::cos(ang * k as f64), math::sin(ang * k as f64)))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * tw[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
}

fn bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // w_k = exp(sign·iπk²/n); k² is reduced mod 2n to keep the angle small.
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            let ang = sign * PI * k2 / n as f64;
            Complex64::new(math::cos(ang), math::sin(ang))
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}
