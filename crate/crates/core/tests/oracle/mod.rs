//! Brute-force reference implementations, independent of the library's
//! kernels. Everything here is naive nested loops in f64; the only shared
//! vocabulary with the implementation is the NCHW layout convention.

#![allow(dead_code)]

/// Direct 6-nested-loop convolution with zero padding.
pub fn conv2d(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f32],
    (f, _, k, _): (usize, usize, usize, usize),
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[fi] as f64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy < pad || ix < pad {
                                    continue;
                                }
                                let (iy, ix) = (iy - pad, ix - pad);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy) * w + ix] as f64;
                                let wv = wt[((fi * c + ci) * k + ky) * k + kx] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * f + fi) * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
    }
    out
}

/// Align-corners-false bilinear sampling evaluated per output pixel.
pub fn bilinear_resize(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
                    .clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
                    .clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let p = |yy: usize, xx: usize| x[(plane * h + yy) * w + xx] as f64;
                let v = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + p(y0, x1) * (1.0 - fy) * fx
                    + p(y1, x0) * fy * (1.0 - fx)
                    + p(y1, x1) * fy * fx;
                out[(plane * oh + oy) * ow + ox] = v as f32;
            }
        }
    }
    out
}

/// Direct per-pixel dynamic filtering with zero padding; the kernel field
/// is shared across channels.
pub fn dynamic_filter(
    x: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
    kv: &[f32],
    k: usize,
) -> Vec<f32> {
    let r = (k / 2) as i64;
    let mut out = vec![0.0f32; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f64;
                    for a in -r..=r {
                        for b in -r..=r {
                            let (iy, ix) = (i as i64 + a, j as i64 + b);
                            if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let t = ((a + r) * k as i64 + (b + r)) as usize;
                            let kvv = kv[((ni * k * k + t) * h + i) * w + j] as f64;
                            let xv =
                                x[((ni * c + ci) * h + iy as usize) * w + ix as usize] as f64;
                            acc += kvv * xv;
                        }
                    }
                    out[((ni * c + ci) * h + i) * w + j] = acc as f32;
                }
            }
        }
    }
    out
}

/// Scalar-loop PSNR.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> f64 {
    let mut mse = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Direct per-window SSIM: for every valid window position, weighted
/// moments computed by explicit double loops.
pub fn ssim(a: &[f32], b: &[f32], (c, h, w): (usize, usize, usize)) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let mut kern = [[0.0f64; WIN]; WIN];
    let mut ksum = 0.0;
    for (i, row) in kern.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            ksum += *v;
        }
    }
    for row in kern.iter_mut() {
        for v in row.iter_mut() {
            *v /= ksum;
        }
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;

    let mut total = 0.0;
    for ch in 0..c {
        let base = ch * h * w;
        let mut sum = 0.0;
        let mut count = 0usize;
        for oy in 0..h - WIN + 1 {
            for ox in 0..w - WIN + 1 {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut mxx, mut myy, mut mxy) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let av = a[base + (oy + i) * w + ox + j] as f64;
                        let bv = b[base + (oy + i) * w + ox + j] as f64;
                        let kv = kern[i][j];
                        mx += kv * av;
                        my += kv * bv;
                        mxx += kv * av * av;
                        myy += kv * bv * bv;
                        mxy += kv * av * bv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / c as f64
}

/// Multi-scale L1 recomputed directly: bilinear-downsample the target per
/// scale and take plain mean absolute differences.
pub fn l1_multiscale(
    preds: &[(usize, Vec<f32>)], // (scale, data) with [N,3,H/s,W/s] layout
    y: &[f32],
    (n, c, h, w): (usize, usize, usize, usize),
) -> f64 {
    let mut total = 0.0f64;
    for (scale, pred) in preds {
        let target = bilinear_resize(y, (n, c, h, w), h / scale, w / scale);
        let mut term = 0.0f64;
        for i in 0..pred.len() {
            term += (pred[i] as f64 - target[i] as f64).abs();
        }
        total += term / pred.len() as f64;
    }
    total
}
