//! Differentiable tensor ops.
//!
//! Every op takes the tape first, validates shapes, runs the forward pass
//! (parallelized over independent output planes, with a fixed reduction
//! order per output element so results are bit-identical at any thread
//! count), and records a backward node when any input is tracked.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor};

/// `y += a * x`, vectorizable.
#[inline]
pub(crate) fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed 4-lane accumulation order: deterministic and
/// still wide enough for the autovectorizer.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_4d(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::dimension(format!(
            "{what} must be 4-D [N,C,H,W], got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Zero-pads each spatial plane by `p`; returns the input data unchanged
/// when `p == 0`.
fn pad_nchw(data: &[f32], n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    if p == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0f32; n * c * hp * wp];
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for y in 0..h {
            let drow = (y + p) * wp + p;
            dst[drow..drow + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    out
}

/// 2-D convolution, NCHW layout, square odd kernel.
///
/// Output size `(H + 2p - k)/stride + 1` must divide exactly.
pub fn conv2d(
    tape: &GradTape,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, c, h, w] = check_4d(input, "conv2d input")?;
    let [f, wc, k, k2] = check_4d(weight, "conv2d weight")?;
    if k != k2 {
        return Err(Error::dimension(format!(
            "conv2d weight kernel must be square, got {k}x{k2}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::contract(format!("conv2d kernel size {k} is even")));
    }
    if wc != c {
        return Err(Error::dimension(format!(
            "conv2d: input has {c} channels, weight expects {wc}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::dimension(format!(
            "conv2d: bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be >= 1"));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < k || wp < k || (hp - k) % stride != 0 || (wp - k) % stride != 0 {
        return Err(Error::geometry(format!(
            "conv2d: {h}x{w} with pad {padding}, k {k}, stride {stride} has no exact output size"
        )));
    }
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;

    let pad = pad_nchw(&input.data(), n, c, h, w, padding);
    let wv = weight.to_vec();
    let bv = bias.to_vec();

    let mut out = vec![0.0f32; n * f * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(pf, op)| {
        let (ni, fi) = (pf / f, pf % f);
        op.fill(bv[fi]);
        for ci in 0..c {
            let plane = &pad[(ni * c + ci) * hp * wp..(ni * c + ci + 1) * hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = wv[((fi * c + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let irow = (oy * stride + ky) * wp + kx;
                        let orow = &mut op[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            axpy(orow, wgt, &plane[irow..irow + wo]);
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += wgt * plane[irow + ox * stride];
                            }
                        }
                    }
                }
            }
        }
    });

    let result = Tensor::output(
        vec![n, f, ho, wo],
        out,
        tape.tracks(&[input, weight, bias]),
    );

    if tape.tracks(&[input, weight, bias]) {
        let (input, weight, bias, output) =
            (input.clone(), weight.clone(), bias.clone(), result.clone());
        tape.record(move || {
            let Some(g) = output.grad() else { return };
            let pad = pad_nchw(&input.data(), n, c, h, w, padding);
            let wv = weight.to_vec();

            if bias.is_tracked() {
                let db: Vec<f32> = (0..f)
                    .into_par_iter()
                    .map(|fi| {
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            let gp = &g[(ni * f + fi) * ho * wo..(ni * f + fi + 1) * ho * wo];
                            acc += gp.iter().map(|&v| v as f64).sum::<f64>();
                        }
                        acc as f32
                    })
                    .collect();
                bias.accumulate_grad(&db);
            }

            if weight.is_tracked() {
                let mut dw = vec![0.0f32; f * c * k * k];
                dw.par_chunks_mut(c * k * k).enumerate().for_each(|(fi, dwf)| {
                    for ni in 0..n {
                        let gp = &g[(ni * f + fi) * ho * wo..(ni * f + fi + 1) * ho * wo];
                        for ci in 0..c {
                            let plane =
                                &pad[(ni * c + ci) * hp * wp..(ni * c + ci + 1) * hp * wp];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = 0.0f32;
                                    for oy in 0..ho {
                                        let irow = (oy * stride + ky) * wp + kx;
                                        let grow = &gp[oy * wo..(oy + 1) * wo];
                                        if stride == 1 {
                                            acc += dot(grow, &plane[irow..irow + wo]);
                                        } else {
                                            for (ox, gv) in grow.iter().enumerate() {
                                                acc += gv * plane[irow + ox * stride];
                                            }
                                        }
                                    }
                                    dwf[(ci * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                });
                weight.accumulate_grad(&dw);
            }

            if input.is_tracked() {
                let mut dpad = vec![0.0f32; n * c * hp * wp];
                dpad.par_chunks_mut(hp * wp).enumerate().for_each(|(pc, dp)| {
                    let (ni, ci) = (pc / c, pc % c);
                    for fi in 0..f {
                        let gp = &g[(ni * f + fi) * ho * wo..(ni * f + fi + 1) * ho * wo];
                        for ky in 0..k {
                            for kx in 0..k {
                                let wgt = wv[((fi * c + ci) * k + ky) * k + kx];
                                for oy in 0..ho {
                                    let irow = (oy * stride + ky) * wp + kx;
                                    let grow = &gp[oy * wo..(oy + 1) * wo];
                                    if stride == 1 {
                                        axpy(&mut dp[irow..irow + wo], wgt, grow);
                                    } else {
                                        for (ox, gv) in grow.iter().enumerate() {
                                            dp[irow + ox * stride] += wgt * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                // Strip the padding back off.
                let mut dx = vec![0.0f32; n * c * h * w];
                for plane in 0..n * c {
                    let src = &dpad[plane * hp * wp..(plane + 1) * hp * wp];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        let srow = (y + padding) * wp + padding;
                        dst[y * w..(y + 1) * w].copy_from_slice(&src[srow..srow + w]);
                    }
                }
                input.accumulate_grad(&dx);
            }
        });
    }
    Ok(result)
}

/// Per-axis sample positions for align-corners-false bilinear sampling.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f32);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f32)
        })
        .collect()
}

/// Bilinear resize (align-corners-false).
pub fn bilinear_resize(
    tape: &GradTape,
    input: &Tensor,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let [n, c, h, w] = check_4d(input, "bilinear_resize input")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::geometry("bilinear_resize: output size must be >= 1"));
    }
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);

    let src = input.data();
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(plane, op)| {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = &sp[y0 * w..y0 * w + w];
                let r1 = &sp[y1 * w..y1 * w + w];
                let orow = &mut op[oy * out_w..(oy + 1) * out_w];
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                    orow[ox] = top + fy * (bot - top);
                }
            }
        });
    drop(src);

    let result = Tensor::output(vec![n, c, out_h, out_w], out, tape.tracks(&[input]));

    if tape.tracks(&[input]) {
        let (input, output) = (input.clone(), result.clone());
        tape.record(move || {
            let Some(g) = output.grad() else { return };
            let ys = bilinear_axis(h, out_h);
            let xs = bilinear_axis(w, out_w);
            let mut dx = vec![0.0f32; n * c * h * w];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dp)| {
                let gp = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gv = gp[oy * out_w + ox];
                        dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dp[y1 * w + x1] += gv * fy * fx;
                    }
                }
            });
            input.accumulate_grad(&dx);
        });
    }
    Ok(result)
}

/// How two shapes line up for an elementwise op: identical, or one operand
/// broadcast over the leading batch dimension.
enum Broadcast {
    None,
    Left,  // a repeats over b's batch
    Right, // b repeats over a's batch
}

fn broadcast_of(a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Broadcast)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), Broadcast::None));
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() == sb.len() && sa[1..] == sb[1..] {
        if sb[0] == 1 {
            return Ok((sa.to_vec(), Broadcast::Right));
        }
        if sa[0] == 1 {
            return Ok((sb.to_vec(), Broadcast::Left));
        }
    }
    Err(Error::dimension(format!(
        "elementwise op on incompatible shapes {sa:?} vs {sb:?}"
    )))
}

fn reduce_leading(g: &[f32], small_len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; small_len];
    for chunk in g.chunks(small_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

macro_rules! binary_elementwise {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(tape: &GradTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            let (shape, _bc) = broadcast_of(a, b)?;
            let (av, bv) = (a.data(), b.data());
            let numel: usize = shape.iter().product();
            let (an, bn) = (av.len(), bv.len());
            let fwd = $fwd;
            let out: Vec<f32> = (0..numel).map(|i| fwd(av[i % an], bv[i % bn])).collect();
            drop(av);
            drop(bv);
            let result = Tensor::output(shape, out, tape.tracks(&[a, b]));
            if tape.tracks(&[a, b]) {
                let (a, b, output) = (a.clone(), b.clone(), result.clone());
                tape.record(move || {
                    let Some(g) = output.grad() else { return };
                    let (av, bv) = (a.to_vec(), b.to_vec());
                    let bwd = $bwd;
                    if a.is_tracked() {
                        let da: Vec<f32> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| bwd(av[i % an], bv[i % bn]).0 * gv)
                            .collect();
                        if an == g.len() {
                            a.accumulate_grad(&da);
                        } else {
                            a.accumulate_grad(&reduce_leading(&da, an));
                        }
                    }
                    if b.is_tracked() {
                        let db: Vec<f32> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| bwd(av[i % an], bv[i % bn]).1 * gv)
                            .collect();
                        if bn == g.len() {
                            b.accumulate_grad(&db);
                        } else {
                            b.accumulate_grad(&reduce_leading(&db, bn));
                        }
                    }
                });
            }
            Ok(result)
        }
    };
}

binary_elementwise!(add, |x: f32, y: f32| x + y, |_x: f32, _y: f32| (1.0f32, 1.0f32));
binary_elementwise!(sub, |x: f32, y: f32| x - y, |_x: f32, _y: f32| (1.0f32, -1.0f32));
binary_elementwise!(mul, |x: f32, y: f32| x * y, |x: f32, y: f32| (y, x));

/// Leaky ReLU; the subgradient at 0 is the negative-side slope.
pub fn leaky_relu(tape: &GradTape, x: &Tensor, slope: f32) -> Result<Tensor> {
    let out: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    let result = Tensor::output(x.shape().to_vec(), out, tape.tracks(&[x]));
    if tape.tracks(&[x]) {
        let (x, output) = (x.clone(), result.clone());
        tape.record(move || {
            let Some(g) = output.grad() else { return };
            let xv = x.to_vec();
            let dx: Vec<f32> = g
                .iter()
                .zip(&xv)
                .map(|(&gv, &v)| if v > 0.0 { gv } else { slope * gv })
                .collect();
            x.accumulate_grad(&dx);
        });
    }
    Ok(result)
}

/// Concatenation along `axis`; off-axis dims must agree.
pub fn concat(tape: &GradTape, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("concat of zero tensors"));
    }
    let ndim = parts[0].shape().len();
    if axis >= ndim {
        return Err(Error::dimension(format!(
            "concat axis {axis} out of range for {ndim}-D tensors"
        )));
    }
    let mut out_shape = parts[0].shape().to_vec();
    for p in &parts[1..] {
        let s = p.shape();
        if s.len() != ndim
            || s[..axis] != out_shape[..axis]
            || s[axis + 1..] != out_shape[axis + 1..]
        {
            return Err(Error::dimension(format!(
                "concat: shape {s:?} incompatible with {:?} on axis {axis}",
                parts[0].shape()
            )));
        }
        out_shape[axis] += s[axis];
    }

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let out_block: usize = blocks.iter().sum();

    let mut out = vec![0.0f32; outer * out_block];
    for o in 0..outer {
        let mut off = o * out_block;
        for (p, &blk) in parts.iter().zip(&blocks) {
            let pd = p.data();
            out[off..off + blk].copy_from_slice(&pd[o * blk..(o + 1) * blk]);
            off += blk;
        }
    }

    let tracked = tape.is_active() && parts.iter().any(|p| p.is_tracked());
    let result = Tensor::output(out_shape, out, tracked);
    if tracked {
        let parts: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        let output = result.clone();
        tape.record(move || {
            let Some(g) = output.grad() else { return };
            for (pi, p) in parts.iter().enumerate() {
                if !p.is_tracked() {
                    continue;
                }
                let blk = blocks[pi];
                let skip: usize = blocks[..pi].iter().sum();
                let mut dp = vec![0.0f32; outer * blk];
                for o in 0..outer {
                    let src = o * out_block + skip;
                    dp[o * blk..(o + 1) * blk].copy_from_slice(&g[src..src + blk]);
                }
                p.accumulate_grad(&dp);
            }
        });
    }
    Ok(result)
}

pub fn scalar_mul(tape: &GradTape, x: &Tensor, s: f32) -> Result<Tensor> {
    let out: Vec<f32> = x.data().iter().map(|&v| s * v).collect();
    let result = Tensor::output(x.shape().to_vec(), out, tape.tracks(&[x]));
    if tape.tracks(&[x]) {
        let (x, output) = (x.clone(), result.clone());
        tape.record(move || {
            let Some(g) = output.grad() else { return };
            let dx: Vec<f32> = g.iter().map(|&gv| s * gv).collect();
            x.accumulate_grad(&dx);
        });
    }
    Ok(result)
}

/// Mean over all elements, as a scalar tensor. Accumulates in f64.
pub fn mean(tape: &GradTape, x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    if n == 0 {
        return Err(Error::contract("mean of an empty tensor"));
    }
    let sum: f64 = x.data().iter().map(|&v| v as f64).sum();
    let result = Tensor::output(vec![1], vec![(sum / n as f64) as f32], tape.tracks(&[x]));
    if tape.tracks(&[x]) {
        let (x, output) = (x.clone(), result.clone());
        tape.record(move || {
            let Some(g) = output.grad() else { return };
            let dx = vec![g[0] / n as f32; n];
            x.accumulate_grad(&dx);
        });
    }
    Ok(result)
}

/// Sum of absolute values, as a scalar tensor. The subgradient of |.| at 0
/// is taken as 0. Accumulates in f64.
pub fn abs_sum(tape: &GradTape, x: &Tensor) -> Result<Tensor> {
    let sum: f64 = x.data().iter().map(|&v| v.abs() as f64).sum();
    let result = Tensor::output(vec![1], vec![sum as f32], tape.tracks(&[x]));
    if tape.tracks(&[x]) {
        let (x, output) = (x.clone(), result.clone());
        tape.record(move || {
            let Some(g) = output.grad() else { return };
            let xv = x.to_vec();
            let dx: Vec<f32> = xv
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        g[0]
                    } else if v < 0.0 {
                        -g[0]
                    } else {
                        0.0
                    }
                })
                .collect();
            x.accumulate_grad(&dx);
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_scalar_scaling() {
        let tape = GradTape::disabled();
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = t(&[1, 1, 1, 1], vec![2.0]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&tape, &x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.to_vec().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_bias_only() {
        let tape = GradTape::disabled();
        let x = Tensor::rand_uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut crate::rng(3));
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = t(&[1], vec![5.0]);
        let y = conv2d(&tape, &x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 5.0);
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let tape = GradTape::disabled();
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        // (5 - 3) % 2 == 0 is fine; (5 + 0 - 3) % 3 != 0 is not.
        assert!(matches!(
            conv2d(&tape, &x, &w, &b, 3, 0),
            Err(Error::Geometry(_))
        ));
        let w2 = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&tape, &x, &w2, &b, 1, 1),
            Err(Error::Dimension(_))
        ));
        let w3 = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            conv2d(&tape, &x, &w3, &b, 1, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn resize_constant_and_identity() {
        let tape = GradTape::disabled();
        let x = Tensor::full(&[1, 2, 5, 7], 0.7);
        let y = bilinear_resize(&tape, &x, 9, 3).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let x = Tensor::rand_uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut crate::rng(1));
        let y = bilinear_resize(&tape, &x, 6, 6).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_2x2_to_4x4_matches_formula() {
        let tape = GradTape::disabled();
        let x = t(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_resize(&tape, &x, 4, 4).unwrap();
        // Evaluate the align-corners-false sampling formula per pixel.
        let src = [[0.0f32, 1.0], [2.0, 3.0]];
        let sample = |o: usize| -> (usize, usize, f32) {
            let s = ((o as f32 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(1), s - i0 as f32)
        };
        let yv = y.to_vec();
        for oy in 0..4 {
            let (y0, y1, fy) = sample(oy);
            for ox in 0..4 {
                let (x0, x1, fx) = sample(ox);
                let top = src[y0][x0] * (1.0 - fx) + src[y0][x1] * fx;
                let bot = src[y1][x0] * (1.0 - fx) + src[y1][x1] * fx;
                let want = top * (1.0 - fy) + bot * fy;
                assert!((yv[oy * 4 + ox] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn elementwise_identities() {
        let tape = GradTape::disabled();
        let x = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut crate::rng(2));
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(add(&tape, &x, &z).unwrap().to_vec(), x.to_vec());

        let v = t(&[1], vec![-1.0]);
        assert_eq!(leaky_relu(&tape, &v, 0.2).unwrap().item(), -0.2);

        let m = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean(&tape, &m).unwrap().item(), 2.5);
        assert_eq!(abs_sum(&tape, &m).unwrap().item(), 10.0);
    }

    #[test]
    fn add_shape_mismatch_errors() {
        let tape = GradTape::disabled();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(add(&tape, &a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_and_backward_split() {
        let tape = GradTape::new();
        let a = t(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).requires_grad();
        let b = t(&[1, 1, 1, 2], vec![5.0, 6.0]).requires_grad();
        let c = concat(&tape, &[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 1, 2]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = mean(&tape, &c).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0 / 6.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0 / 6.0; 2]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = GradTape::new();
        let a = Tensor::zeros(&[2, 2]).requires_grad();
        let b = add(&tape, &a, &a).unwrap();
        assert!(matches!(tape.backward(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_leaf_gets_no_grad() {
        let tape = GradTape::new();
        let w = Tensor::zeros(&[3]).requires_grad();
        let x = Tensor::full(&[3], 2.0).requires_grad();
        let loss = mean(&tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(w.grad().is_none());
        assert!(x.grad().is_some());
    }

    #[test]
    fn weighted_mean_grad_matches_hand_formula() {
        // loss = mean(w * x) with x fixed: d loss / d w = x / n.
        let tape = GradTape::new();
        let w = t(&[4], vec![0.5, -0.25, 1.0, 2.0]).requires_grad();
        let x = t(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let prod = mul(&tape, &w, &x).unwrap();
        let loss = mean(&tape, &prod).unwrap();
        tape.backward(&loss).unwrap();
        let g = w.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.to_vec()) {
            assert!((gi - xi / 4.0).abs() < 1e-7);
        }
    }
}
