//! Radix-2 Cooley-Tukey FFT over square power-of-two patches.
//!
//! The transform is separable: rows first, then columns. The forward
//! transform is unnormalized; the inverse carries the full 1/p^2 factor.
//! Butterflies run in 64-bit regardless of the tensor element type so the
//! 32-bit results are correctly rounded rather than accumulation-limited.

use crate::scalar::Scalar;

/// In-place iterative radix-2 FFT of length `n` (power of two).
/// `sign` is -1 for the forward transform, +1 for the inverse (unscaled).
fn fft1d(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let (wps, wpc) = ang.sin_cos();
        let mut i = 0;
        while i < n {
            let mut wr = 1.0f64;
            let mut wi = 0.0f64;
            for k in 0..len / 2 {
                let a = i + k;
                let b = i + k + len / 2;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let nwr = wr * wpc - wi * wps;
                wi = wr * wps + wi * wpc;
                wr = nwr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// 2d FFT of one p*p plane held in separate real/imaginary slices.
/// Forward (`inverse == false`) is unnormalized; inverse divides by p^2.
pub fn fft2_complex<T: Scalar>(
    re_in: &[T],
    im_in: &[T],
    re_out: &mut [T],
    im_out: &mut [T],
    p: usize,
    inverse: bool,
) {
    debug_assert!(p.is_power_of_two());
    debug_assert_eq!(re_in.len(), p * p);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut re: Vec<f64> = re_in.iter().map(|v| v.to_f64()).collect();
    let mut im: Vec<f64> = im_in.iter().map(|v| v.to_f64()).collect();

    for row in 0..p {
        fft1d(&mut re[row * p..(row + 1) * p], &mut im[row * p..(row + 1) * p], sign);
    }
    let mut cr = vec![0.0f64; p];
    let mut ci = vec![0.0f64; p];
    for col in 0..p {
        for row in 0..p {
            cr[row] = re[row * p + col];
            ci[row] = im[row * p + col];
        }
        fft1d(&mut cr, &mut ci, sign);
        for row in 0..p {
            re[row * p + col] = cr[row];
            im[row * p + col] = ci[row];
        }
    }

    let scale = if inverse { 1.0 / (p * p) as f64 } else { 1.0 };
    for i in 0..p * p {
        re_out[i] = T::from_f64(re[i] * scale);
        im_out[i] = T::from_f64(im[i] * scale);
    }
}

/// Forward 2d FFT of a real p*p plane.
pub fn fft2_real<T: Scalar>(x: &[T], re_out: &mut [T], im_out: &mut [T], p: usize) {
    let zeros = vec![T::ZERO; x.len()];
    fft2_complex(x, &zeros, re_out, im_out, p, false);
}

/// Inverse 2d FFT keeping only the real part; returns the largest absolute
/// imaginary residue so callers can assert the spectrum was conjugate
/// symmetric.
pub fn ifft2_real_part<T: Scalar>(re: &[T], im: &[T], out: &mut [T], p: usize) -> f64 {
    let mut ore = vec![T::ZERO; re.len()];
    let mut oim = vec![T::ZERO; re.len()];
    fft2_complex(re, im, &mut ore, &mut oim, p, true);
    out.copy_from_slice(&ore);
    oim.iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
}
