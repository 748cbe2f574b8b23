//! Image quality metrics. Pure functions, f64 accumulation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interprets a tensor as a single image: `[C,H,W]` or `[1,C,H,W]`.
fn image_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [1, c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::dimension(format!(
            "expected an image tensor [C,H,W] or [1,C,H,W], got {other:?}"
        ))),
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images return `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let (av, bv) = (a.data(), b.data());
    let mse = av
        .iter()
        .zip(bv.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / av.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filtering of an `h`x`w` plane; output is
/// `(h-10) x (w-10)`.
fn gauss_valid(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            horiz[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, peak 1.0), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = image_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (av, bv) = (a.data(), b.data());
    let mut total = 0.0;
    for ch in 0..c {
        let base = ch * h * w;
        let x: Vec<f64> = av[base..base + h * w].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = bv[base..base + h * w].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

        let mx = gauss_valid(&x, h, w);
        let my = gauss_valid(&y, h, w);
        let mxx = gauss_valid(&xx, h, w);
        let myy = gauss_valid(&yy, h, w);
        let mxy = gauss_valid(&xy, h, w);

        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Windowed zero-mean normalized cross correlation map on luminance.
pub struct NccMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major per-window values, clamped to [0, 1].
    pub values: Vec<f32>,
}

impl NccMap {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }
}

fn luminance(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = image_dims(t)?;
    let d = t.data();
    let lum = match c {
        1 => d.iter().map(|&v| v as f64).collect(),
        3 => (0..h * w)
            .map(|i| {
                0.299 * d[i] as f64 + 0.587 * d[h * w + i] as f64 + 0.114 * d[2 * h * w + i] as f64
            })
            .collect(),
        other => {
            return Err(Error::dimension(format!(
                "luminance needs 1 or 3 channels, got {other}"
            )))
        }
    };
    Ok((lum, h, w))
}

/// Tiles the images into non-overlapping `window`x`window` blocks and
/// computes zero-mean NCC per block. Constant blocks score 1.0 when both
/// are constant and 0.0 when only one is; negative correlations clamp to 0.
pub fn ncc_map(a: &Tensor, b: &Tensor, window: usize) -> Result<NccMap> {
    check_same_shape(a, b)?;
    if window % 2 == 0 || window < 3 {
        return Err(Error::contract(format!(
            "ncc window must be odd and >= 3, got {window}"
        )));
    }
    let (la, h, w) = luminance(a)?;
    let (lb, _, _) = luminance(b)?;
    if window > h || window > w {
        return Err(Error::contract(format!(
            "ncc window {window} larger than image {h}x{w}"
        )));
    }
    let rows = h / window;
    let cols = w / window;
    let n = (window * window) as f64;
    let var_floor = 1e-10;
    let mut values = Vec::with_capacity(rows * cols);
    for by in 0..rows {
        for bx in 0..cols {
            let mut sa = 0.0;
            let mut sb = 0.0;
            for y in 0..window {
                for x in 0..window {
                    let i = (by * window + y) * w + bx * window + x;
                    sa += la[i];
                    sb += lb[i];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for y in 0..window {
                for x in 0..window {
                    let i = (by * window + y) * w + bx * window + x;
                    let (da, db) = (la[i] - ma, lb[i] - mb);
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let v = if vaa < var_floor && vbb < var_floor {
                1.0
            } else if vaa < var_floor || vbb < var_floor {
                0.0
            } else {
                (vab / (vaa.sqrt() * vbb.sqrt())).clamp(0.0, 1.0)
            };
            values.push(v as f32);
        }
    }
    Ok(NccMap { rows, cols, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, h: usize, w: usize) -> Tensor {
        Tensor::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut crate::rng(seed))
    }

    #[test]
    fn psnr_basics() {
        let a = img(1, 16, 16);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());

        let shifted = Tensor::from_vec(
            a.shape(),
            a.to_vec().iter().map(|v| v + 0.1).collect(),
        )
        .unwrap();
        let db = psnr(&a, &shifted, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-5, "uniform 0.1 diff is 20 dB, got {db}");

        let b = img(2, 16, 16);
        assert!((psnr(&a, &b, 1.0).unwrap() - psnr(&b, &a, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_basics() {
        let a = img(3, 24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);

        // Small luminance shift stays close to 1.
        let c = Tensor::from_vec(a.shape(), a.to_vec().iter().map(|v| v + 0.01).collect())
            .unwrap();
        assert!(ssim(&a, &c).unwrap() > 0.99);

        // Inverted binary image: strongly negative structure.
        let bin: Vec<f32> = (0..3 * 24 * 24)
            .map(|i| if (i / 24 + i % 24) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let x = Tensor::from_vec(&[1, 3, 24, 24], bin.clone()).unwrap();
        let inv = Tensor::from_vec(&[1, 3, 24, 24], bin.iter().map(|v| 1.0 - v).collect())
            .unwrap();
        assert!(ssim(&x, &inv).unwrap() < 0.0);

        // Symmetry.
        let b = img(4, 24, 24);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);

        let tiny = img(5, 8, 8);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Contract(_))));
    }

    #[test]
    fn ncc_identical_is_one() {
        let a = img(6, 33, 33);
        let map = ncc_map(&a, &a, 11).unwrap();
        assert_eq!((map.rows, map.cols), (3, 3));
        assert!(map.values.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!((map.mean() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ncc_shift_drops_interior() {
        // A sharp edge image shifted by half a window: interior NCC < 1.
        let (h, w) = (22, 22);
        let mut av = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    av[c * h * w + y * w + x] = if (x / 3) % 2 == 0 { 1.0 } else { 0.0 };
                }
            }
        }
        let mut bv = vec![0.0f32; 3 * h * w];
        let shift = 5;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x + shift).min(w - 1);
                    bv[c * h * w + y * w + x] = av[c * h * w + y * w + sx];
                }
            }
        }
        let a = Tensor::from_vec(&[1, 3, h, w], av).unwrap();
        let b = Tensor::from_vec(&[1, 3, h, w], bv).unwrap();
        let map = ncc_map(&a, &b, 11).unwrap();
        assert!(map.values.iter().all(|&v| v < 1.0));
    }

    #[test]
    fn ncc_constant_window_rules() {
        let a = Tensor::full(&[1, 3, 9, 9], 0.5);
        let b = Tensor::full(&[1, 3, 9, 9], 0.8);
        // Both constant: 1.0.
        assert_eq!(ncc_map(&a, &b, 9).unwrap().values, vec![1.0]);
        // One constant: 0.0.
        let t = img(7, 9, 9);
        assert_eq!(ncc_map(&a, &t, 9).unwrap().values, vec![0.0]);
        // Window validation.
        assert!(matches!(ncc_map(&a, &b, 4), Err(Error::Contract(_))));
        assert!(matches!(ncc_map(&a, &b, 11), Err(Error::Contract(_))));
    }
}
