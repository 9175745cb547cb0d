//! Translation-invariant gradient smoothing: the input gradient is convolved
//! channelwise with a normalized Gaussian kernel before the sign step, which
//! spreads each pixel's influence over its neighborhood.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `k x k` Gaussian kernel with `sigma = k/3`, normalized to sum 1.
pub fn gaussian_kernel(k: usize) -> Result<Vec<f32>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::config(format!("smoothing kernel size must be odd and positive, got {k}")));
    }
    let sigma = k as f64 / 3.0;
    let half = (k / 2) as i64;
    let mut kernel = Vec::with_capacity(k * k);
    let mut total = 0.0f64;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(v as f32);
            total += v;
        }
    }
    for v in &mut kernel {
        *v = (*v as f64 / total) as f32;
    }
    Ok(kernel)
}

/// Convolve a `[N,C,H,W]` gradient channelwise with the size-`k` Gaussian,
/// same spatial extent. Near the border the kernel is renormalized over its
/// in-bounds taps, so a constant field passes through unchanged everywhere.
pub fn smooth_gradient(grad: &Tensor, k: usize) -> Result<Tensor> {
    let kernel = gaussian_kernel(k)?;
    let s = grad.shape();
    if s.len() != 4 {
        return Err(Error::dim("tim_smooth", format!("expected [N,C,H,W], got {s:?}")));
    }
    if k == 1 {
        return Ok(grad.clone());
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let half = (k / 2) as i64;
    let mut out = vec![0.0f32; grad.len()];
    for nc in 0..n * c {
        let plane = &grad.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0f32;
                let mut weight = 0.0f32;
                for dy in -half..=half {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for dx in -half..=half {
                        let sx = x + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let kv = kernel[((dy + half) * k as i64 + dx + half) as usize];
                        acc += kv * plane[(sy * w as i64 + sx) as usize];
                        weight += kv;
                    }
                }
                dst[(y * w as i64 + x) as usize] = acc / weight;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}
