//! Learnable frequency-domain filtering of square feature patches.
//!
//! A feature map is tiled into 8x8 patches, each patch is taken to the
//! frequency domain, multiplied bin-wise by a learnable complex kernel
//! shared per channel across patches and batch, and brought back with the
//! real part of the inverse transform. The kernel starts as the identity
//! filter (1 + 0i everywhere) so a fresh filter is a no-op.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Param, Tensor};

/// Patch edge used throughout the model.
pub const PATCH: usize = 8;

/// Per-channel complex filter over one patch spectrum.
pub struct FrequencyKernel {
    pub re: Param,
    pub im: Param,
    pub patch: usize,
}

impl FrequencyKernel {
    /// Identity filter: multiplies every bin by 1 + 0i.
    pub fn identity(prefix: &str, channels: usize, patch: usize) -> Self {
        FrequencyKernel {
            re: Param::constant(format!("{prefix}.re"), &[channels, patch, patch], 1.0),
            im: Param::zeros(format!("{prefix}.im"), &[channels, patch, patch]),
            patch,
        }
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.re.clone(), self.im.clone()]
    }
}

/// partition -> fft2 -> bin-wise complex multiply -> ifft2 (real part) -> merge.
///
/// With the identity kernel this is the identity map up to FFT round-trip
/// noise (below 1e-5).
pub fn spectral_branch<T: Scalar>(g: &mut Graph<T>, x: &Tensor<T>, kernel: &FrequencyKernel) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape("spectral_branch", format!("expected rank 4, got {}", fmt_shape(xs))));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if c != kernel.channels() {
        return Err(Error::shape(
            "spectral_branch",
            format!("input has {} channels, kernel {}", c, kernel.channels()),
        ));
    }
    if h % kernel.patch != 0 || w % kernel.patch != 0 {
        return Err(Error::Config(format!(
            "spectral_branch needs spatial dims divisible by {}, got {}x{}",
            kernel.patch, h, w
        )));
    }
    let patches = g.partition_patches(x, kernel.patch)?;
    let (sre, sim) = g.fft2(&patches)?;
    let kre = g.param(&kernel.re);
    let kim = g.param(&kernel.im);
    let (fre, fim) = g.complex_mul_bcast(&sre, &sim, &kre, &kim)?;
    let filtered = g.ifft2(&fre, &fim)?;
    g.merge_patches(&filtered, n, h, w)
}
