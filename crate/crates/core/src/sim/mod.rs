//! Physical defocus-blur simulator.
//!
//! Produces (defocused, all-in-focus) pairs in two domains:
//! conventional-camera blur (thin-lens circle of confusion, one disk-like
//! PSF lobe) and light-field synthetic-aperture blur (shift-and-sum of
//! sub-aperture views, multi-impulse PSF), plus a misalignment model
//! emulating two-shot capture.

pub mod psf;
mod scene;

pub use scene::{generate_scene, Layer, SceneSpec};

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thin-lens camera description.
#[derive(Debug, Clone, PartialEq)]
pub struct LensSpec {
    pub focal_mm: f32,
    pub f_number: f32,
    pub focus_m: f32,
    pub pitch_mm: f32,
}

impl Default for LensSpec {
    fn default() -> Self {
        LensSpec {
            focal_mm: 50.0,
            f_number: 8.0,
            focus_m: 2.0,
            pitch_mm: 0.02,
        }
    }
}

impl LensSpec {
    pub fn validate(&self) -> Result<()> {
        if self.f_number <= 0.0 {
            return Err(Error::contract("f-number must be positive"));
        }
        if self.focus_m * 1000.0 <= self.focal_mm {
            return Err(Error::contract(
                "focus distance must exceed the focal length",
            ));
        }
        if self.pitch_mm <= 0.0 {
            return Err(Error::contract("pixel pitch must be positive"));
        }
        Ok(())
    }
}

/// Synthetic-aperture description: an odd U x V angular grid and the
/// disparity (pixels per unit defocus `1/z - 1/focus`) of one view step.
#[derive(Debug, Clone, PartialEq)]
pub struct LightFieldSpec {
    pub views: (usize, usize),
    pub baseline_px: f32,
    pub focus_m: f32,
}

impl Default for LightFieldSpec {
    fn default() -> Self {
        LightFieldSpec {
            views: (7, 7),
            baseline_px: 4.0,
            focus_m: 2.0,
        }
    }
}

impl LightFieldSpec {
    pub fn validate(&self) -> Result<()> {
        let (u, v) = self.views;
        if u % 2 == 0 || v % 2 == 0 || u == 0 || v == 0 {
            return Err(Error::contract(format!(
                "light-field grid {u}x{v} must be odd so a central view exists"
            )));
        }
        if self.focus_m <= 0.0 {
            return Err(Error::contract("refocus distance must be positive"));
        }
        Ok(())
    }
}

/// Which kind of pair to synthesize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairDomain {
    /// Light-field blur with pixel-perfect ground truth.
    LfAligned,
    /// Conventional blur with a misaligned, gain-shifted ground truth.
    TwoShotMisaligned,
}

impl PairDomain {
    pub fn parse(s: &str) -> Result<PairDomain> {
        match s {
            "lf" => Ok(PairDomain::LfAligned),
            "two-shot" => Ok(PairDomain::TwoShotMisaligned),
            other => Err(Error::config(format!(
                "unknown domain '{other}', expected 'lf' or 'two-shot'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PairDomain::LfAligned => "lf",
            PairDomain::TwoShotMisaligned => "two-shot",
        }
    }
}

/// Two-shot misalignment model: random sub-pixel translation and gain.
#[derive(Debug, Clone, PartialEq)]
pub struct MisalignParams {
    pub max_translation_px: f32,
    pub max_gain_dev: f32,
}

impl Default for MisalignParams {
    fn default() -> Self {
        MisalignParams {
            max_translation_px: 2.0,
            max_gain_dev: 0.02,
        }
    }
}

/// Circle-of-confusion diameter in pixels for a point at depth `z_m`.
pub fn coc_diameter(z_m: f32, lens: &LensSpec) -> Result<f32> {
    lens.validate()?;
    if z_m <= 0.0 {
        return Err(Error::contract(format!("depth {z_m} must be positive")));
    }
    let f = lens.focal_mm as f64 / 1000.0;
    let s1 = lens.focus_m as f64;
    let z = z_m as f64;
    let c_m = f * f / (lens.f_number as f64 * (s1 - f)) * (z - s1).abs() / z;
    Ok((c_m * 1000.0 / lens.pitch_mm as f64) as f32)
}

/// Antialiased disk tap weight at integer offset (dy, dx) for radius `r`.
#[inline]
fn disk_weight(dy: i64, dx: i64, r: f32) -> f32 {
    let d = ((dy * dy + dx * dx) as f32).sqrt();
    (r + 0.5 - d).clamp(0.0, 1.0)
}

/// Blurs one plane with a disk whose radius can vary per target pixel.
/// Weights renormalize over in-bounds taps, conserving energy on
/// constants including at the borders.
fn disk_blur_plane(src: &[f32], h: usize, w: usize, radius_of: impl Fn(usize) -> f32) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = radius_of(i);
            if r < 1e-6 {
                out[i] = src[i];
                continue;
            }
            let b = (r + 0.5).floor() as i64;
            let mut acc = 0.0f32;
            let mut wsum = 0.0f32;
            for dy in -b..=b {
                let sy = y as i64 + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for dx in -b..=b {
                    let sx = x as i64 + dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let wgt = disk_weight(dy, dx, r);
                    if wgt > 0.0 {
                        acc += wgt * src[sy as usize * w + sx as usize];
                        wsum += wgt;
                    }
                }
            }
            out[i] = acc / wsum;
        }
    }
    out
}

/// Conventional-camera defocus: each layer is blurred with the disk kernel
/// of its circle of confusion and composited back to front, so blur does
/// not bleed across depth discontinuities.
pub fn blur_conventional(scene: &SceneSpec, lens: &LensSpec) -> Result<Tensor> {
    scene.validate()?;
    lens.validate()?;
    let (h, w) = (scene.h, scene.w);
    let max_r = (h.min(w) / 2) as f32;

    let mut radii_err: Option<Error> = None;
    let out = SceneSpec::composite(&scene.layers, h, w, |layer| {
        let radius: Box<dyn Fn(usize) -> f32> = match layer.constant_depth {
            Some(z) => {
                let r = match coc_diameter(z, lens) {
                    Ok(c) => (c / 2.0).min(max_r),
                    Err(e) => {
                        radii_err = Some(e);
                        0.0
                    }
                };
                Box::new(move |_| r)
            }
            None => {
                let rs: Vec<f32> = layer
                    .depth
                    .iter()
                    .map(|&z| match coc_diameter(z, lens) {
                        Ok(c) => (c / 2.0).min(max_r),
                        Err(e) => {
                            radii_err = Some(e);
                            0.0
                        }
                    })
                    .collect();
                Box::new(move |i| rs[i])
            }
        };
        let mut premult = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            let plane: Vec<f32> = (0..h * w)
                .map(|i| layer.color[c * h * w + i] * layer.mask[i])
                .collect();
            let blurred = disk_blur_plane(&plane, h, w, &radius);
            premult[c * h * w..(c + 1) * h * w].copy_from_slice(&blurred);
        }
        let alpha = disk_blur_plane(&layer.mask, h, w, &radius);
        (premult, alpha)
    });
    if let Some(e) = radii_err {
        return Err(e);
    }
    Tensor::from_vec(&[1, 3, h, w], out)
}

#[inline]
fn bilinear_sample(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let yc = y.clamp(0.0, (h - 1) as f32);
    let xc = x.clamp(0.0, (w - 1) as f32);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (yc - y0 as f32, xc - x0 as f32);
    let top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
    let bot = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
    top + fy * (bot - top)
}

/// Light-field synthetic-aperture defocus: for each sub-aperture view the
/// sharp image is shifted per pixel by `disparity(p) * (u, v)` and all
/// views are averaged. Shifts leaving the frame clamp to the border
/// (edge replication) with a warning.
pub fn blur_lightfield(scene: &SceneSpec, lf: &LightFieldSpec) -> Result<Tensor> {
    scene.validate()?;
    lf.validate()?;
    let (h, w) = (scene.h, scene.w);
    let (uc, vc) = (lf.views.0 as i64 / 2, lf.views.1 as i64 / 2);
    let sharp = scene.sharp.data();
    let disparity: Vec<f32> = scene
        .depth
        .iter()
        .map(|&z| lf.baseline_px * (1.0 / z - 1.0 / lf.focus_m))
        .collect();

    let mut clipped = false;
    let mut out = vec![0.0f32; 3 * h * w];
    let total_views = (lf.views.0 * lf.views.1) as f32;
    for v in -vc..=vc {
        for u in -uc..=uc {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let d = disparity[i];
                    let sy = y as f32 + d * v as f32;
                    let sx = x as f32 + d * u as f32;
                    if sy < 0.0 || sy > (h - 1) as f32 || sx < 0.0 || sx > (w - 1) as f32 {
                        clipped = true;
                    }
                    for c in 0..3 {
                        out[c * h * w + i] +=
                            bilinear_sample(&sharp[c * h * w..(c + 1) * h * w], h, w, sy, sx);
                    }
                }
            }
        }
    }
    if clipped {
        static WARN_ONCE: std::sync::Once = std::sync::Once::new();
        WARN_ONCE.call_once(|| {
            log::warn!(
                "light-field shifts left the frame; clamped with edge replication \
                 (warning emitted once per process)"
            );
        });
    }
    for o in &mut out {
        *o /= total_views;
    }
    drop(sharp);
    Tensor::from_vec(&[1, 3, h, w], out)
}

/// Metadata recorded per generated pair (one manifest row).
#[derive(Debug, Clone)]
pub struct PairMeta {
    pub domain: PairDomain,
    pub lens: LensSpec,
    pub lf: LightFieldSpec,
    pub shift: (f32, f32),
    pub gain: f32,
}

/// Warps by a sub-pixel translation with edge replication.
fn translate(t: &Tensor, dy: f32, dx: f32) -> Result<Tensor> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let d = t.data();
    let mut out = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let plane = &d[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] =
                    bilinear_sample(plane, h, w, y as f32 + dy, x as f32 + dx);
            }
        }
    }
    drop(d);
    Tensor::from_vec(&[1, 3, h, w], out)
}

/// Synthesizes one training pair from a scene.
///
/// `LfAligned` pairs are pixel-perfect; `TwoShotMisaligned` pairs blur with
/// the conventional model and perturb the ground truth by a random
/// sub-pixel translation and gain, emulating two-shot capture.
pub fn make_pair(
    scene: &SceneSpec,
    lens: &LensSpec,
    lf: &LightFieldSpec,
    domain: PairDomain,
    misalign: &MisalignParams,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor, PairMeta)> {
    let mut meta = PairMeta {
        domain,
        lens: lens.clone(),
        lf: lf.clone(),
        shift: (0.0, 0.0),
        gain: 1.0,
    };
    match domain {
        PairDomain::LfAligned => {
            let x = blur_lightfield(scene, lf)?;
            Ok((x, scene.sharp.clone(), meta))
        }
        PairDomain::TwoShotMisaligned => {
            let x = blur_conventional(scene, lens)?;
            let t = misalign.max_translation_px;
            let (dy, dx) = if t > 0.0 {
                (rng.gen_range(-t..=t), rng.gen_range(-t..=t))
            } else {
                (0.0, 0.0)
            };
            let g = misalign.max_gain_dev;
            let gain = if g > 0.0 {
                rng.gen_range(1.0 - g..=1.0 + g)
            } else {
                1.0
            };
            meta.shift = (dy, dx);
            meta.gain = gain;
            let warped = translate(&scene.sharp, dy, dx)?;
            let y: Vec<f32> = warped
                .to_vec()
                .iter()
                .map(|&v| (v * gain).clamp(0.0, 1.0))
                .collect();
            Ok((x, Tensor::from_vec(warped.shape(), y)?, meta))
        }
    }
}

/// Training-time augmentation: with independent probability 0.3 each,
/// Gaussian noise on the defocused input only, gray-scale conversion of
/// both, and a random rescale with crop/pad back (same geometry for both).
pub fn augment(x: &Tensor, y: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let mut x = x.clone();
    let mut y = y.clone();

    if rng.gen_bool(0.3) {
        let sigma = rng.gen_range(0.0..0.01f32);
        let normal = Normal::new(0.0f32, sigma.max(1e-6)).unwrap();
        let noisy: Vec<f32> = x
            .to_vec()
            .iter()
            .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
            .collect();
        x = Tensor::from_vec(x.shape(), noisy)?;
    }

    if rng.gen_bool(0.3) {
        x = to_gray(&x)?;
        y = to_gray(&y)?;
    }

    if rng.gen_bool(0.3) {
        let s = rng.gen_range(0.75..1.25f32);
        x = rescale_keep_size(&x, s)?;
        y = rescale_keep_size(&y, s)?;
    }
    Ok((x, y))
}

fn to_gray(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let d = t.data();
    let mut out = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let g = 0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i];
        for c in 0..3 {
            out[c * h * w + i] = g;
        }
    }
    drop(d);
    Tensor::from_vec(&[1, 3, h, w], out)
}

/// Uniform rescale by `s`, then center-crop (when larger) or center-pad
/// with edge replication (when smaller) back to the original size.
fn rescale_keep_size(t: &Tensor, s: f32) -> Result<Tensor> {
    let sh = t.shape();
    let (h, w) = (sh[2], sh[3]);
    let nh = ((h as f32 * s).round() as usize).max(1);
    let nw = ((w as f32 * s).round() as usize).max(1);
    let tape = crate::tensor::GradTape::disabled();
    let resized = crate::tensor::ops::bilinear_resize(&tape, t, nh, nw)?;
    let rd = resized.data();
    let mut out = vec![0.0f32; 3 * h * w];
    // Offsets of the output window inside the resized image (or negative
    // padding when the resized image is smaller).
    let oy = nh as i64 / 2 - h as i64 / 2;
    let ox = nw as i64 / 2 - w as i64 / 2;
    for c in 0..3 {
        for y in 0..h {
            let sy = (y as i64 + oy).clamp(0, nh as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 + ox).clamp(0, nw as i64 - 1) as usize;
                out[c * h * w + y * w + x] = rd[c * nh * nw + sy * nw + sx];
            }
        }
    }
    drop(rd);
    Tensor::from_vec(&[1, 3, h, w], out)
}

fn fmt_f32(v: f32) -> String {
    format!("{:.8e}", v)
}

/// Generates `count` pairs of `size` x `size` images into `out_dir`:
/// `NNNN_x.png`, `NNNN_y.png` and a `manifest.tsv`. Fully reproducible
/// from the seed; each pair derives its own RNG stream from (seed, index).
pub fn gen_dataset(
    count: usize,
    size: usize,
    domain: PairDomain,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PairMeta>> {
    if size % 8 != 0 {
        return Err(Error::geometry(format!(
            "dataset image size {size} must be divisible by 8"
        )));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let lens = LensSpec::default();
    let lf = LightFieldSpec::default();
    let misalign = MisalignParams::default();

    let mut manifest = String::from(
        "index\tdomain\tfocal_mm\tf_number\tfocus_m\tpitch_mm\tlf_views\tlf_baseline\tshift_y\tshift_x\tgain\n",
    );
    let mut metas = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(seed.wrapping_add(i as u64), size, size, lens.focus_m)?;
        let mut rng = crate::stream_rng(seed, "pair", i as u64);
        let (x, y, meta) = make_pair(&scene, &lens, &lf, domain, &misalign, &mut rng)?;
        crate::data::save_png(out_dir.join(format!("{i:04}_x.png")), &x)?;
        crate::data::save_png(out_dir.join(format!("{i:04}_y.png")), &y)?;
        manifest.push_str(&format!(
            "{i:04}\t{}\t{}\t{}\t{}\t{}\t{}x{}\t{}\t{}\t{}\t{}\n",
            meta.domain.as_str(),
            fmt_f32(meta.lens.focal_mm),
            fmt_f32(meta.lens.f_number),
            fmt_f32(meta.lens.focus_m),
            fmt_f32(meta.lens.pitch_mm),
            meta.lf.views.0,
            meta.lf.views.1,
            fmt_f32(meta.lf.baseline_px),
            fmt_f32(meta.shift.0),
            fmt_f32(meta.shift.1),
            fmt_f32(meta.gain),
        ));
        metas.push(meta);
    }
    let mut f = std::fs::File::create(out_dir.join("manifest.tsv"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(metas)
}

/// In-memory variant of [`gen_dataset`] returning the scenes as well, used
/// by diagnostics that need depth maps alongside the pairs.
pub fn gen_pairs_with_scenes(
    count: usize,
    size: usize,
    domain: PairDomain,
    seed: u64,
) -> Result<Vec<(Tensor, Tensor, PairMeta, SceneSpec)>> {
    let lens = LensSpec::default();
    let lf = LightFieldSpec::default();
    let misalign = MisalignParams::default();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(seed.wrapping_add(i as u64), size, size, lens.focus_m)?;
        let mut rng = crate::stream_rng(seed, "pair", i as u64);
        let (x, y, meta) = make_pair(&scene, &lens, &lf, domain, &misalign, &mut rng)?;
        out.push((x, y, meta, scene));
    }
    Ok(out)
}
