//! Training losses: multi-scale L1, feature-space L1 against a frozen
//! extractor, and their weighted mix. All losses apply to every pyramid
//! scale with equal weights.

use std::collections::BTreeMap;
use std::path::Path;

use crate::drb::ScalePyramid;
use crate::error::{Error, Result};
use crate::tensor::{kaiming_uniform, ops, GradTape, Tensor};

/// Seed for the default fixed random feature extractor; independent of the
/// run seed so the loss is identical across runs.
const PHI_SEED: u64 = 0x0fea;

struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    /// Bilinear half-resize applied after the activation.
    downsample: bool,
}

/// Frozen convolutional feature extractor with tap points.
///
/// The default is a fixed-seed 6-layer stack (widths 16/32/64) with taps
/// after layers 2, 4 and 6, each tap at half the resolution of the
/// previous one. Weights are never updated; gradients flow only to the
/// image being compared. Alternative weights can be imported from a DRBT
/// container for fidelity experiments.
pub struct FeatureExtractor {
    layers: Vec<FrozenConv>,
    /// 1-based layer indices after which a tap is taken; `0` taps the input.
    taps: Vec<usize>,
    slope: f32,
}

impl FeatureExtractor {
    pub fn fixed_random() -> FeatureExtractor {
        let mut rng = crate::rng(PHI_SEED);
        let plan: [(usize, usize, bool); 6] = [
            (3, 16, false),
            (16, 16, true),
            (16, 32, false),
            (32, 32, true),
            (32, 64, false),
            (64, 64, true),
        ];
        let layers = plan
            .iter()
            .map(|&(cin, cout, downsample)| FrozenConv {
                weight: kaiming_uniform(&[cout, cin, 3, 3], 0.2, &mut rng),
                bias: Tensor::zeros(&[cout]),
                downsample,
            })
            .collect();
        FeatureExtractor {
            layers,
            taps: vec![2, 4, 6],
            slope: 0.2,
        }
    }

    /// Degenerate extractor whose single tap is the input itself; the
    /// feature loss then reduces exactly to the multi-scale L1.
    pub fn identity() -> FeatureExtractor {
        FeatureExtractor {
            layers: Vec::new(),
            taps: vec![0],
            slope: 0.2,
        }
    }

    /// Imports an extractor from a DRBT container with entries
    /// `phi.layerI.weight` / `phi.layerI.bias`, plus `phi.downsample` and
    /// `phi.taps` descriptor tensors.
    pub fn import(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
        let entries = crate::train::read_container(path)?;
        let downsample = entries
            .get("phi.downsample")
            .ok_or_else(|| Error::format("feature import: missing phi.downsample"))?
            .to_vec();
        let taps: Vec<usize> = entries
            .get("phi.taps")
            .ok_or_else(|| Error::format("feature import: missing phi.taps"))?
            .to_vec()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let mut layers = Vec::new();
        for (i, ds) in downsample.iter().enumerate() {
            let weight = entries
                .get(&format!("phi.layer{i}.weight"))
                .ok_or_else(|| Error::format(format!("feature import: missing layer {i}")))?
                .detach();
            let bias = entries
                .get(&format!("phi.layer{i}.bias"))
                .ok_or_else(|| Error::format(format!("feature import: missing bias {i}")))?
                .detach();
            layers.push(FrozenConv {
                weight,
                bias,
                downsample: *ds != 0.0,
            });
        }
        if taps.iter().any(|&t| t > layers.len()) {
            return Err(Error::format("feature import: tap index out of range"));
        }
        Ok(FeatureExtractor {
            layers,
            taps,
            slope: 0.2,
        })
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    /// Feature maps at every tap point.
    pub fn forward(&self, tape: &GradTape, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::with_capacity(self.taps.len());
        if self.taps.contains(&0) {
            taps.push(x.clone());
        }
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = ops::conv2d(tape, &cur, &layer.weight, &layer.bias, 1, 1)?;
            cur = ops::leaky_relu(tape, &y, self.slope)?;
            if layer.downsample {
                let s = cur.shape();
                cur = ops::bilinear_resize(tape, &cur, (s[2] / 2).max(1), (s[3] / 2).max(1))?;
            }
            if self.taps.contains(&(i + 1)) {
                taps.push(cur.clone());
            }
        }
        Ok(taps)
    }
}

/// A differentiable total plus per-term diagnostics. The total always
/// equals the documented weighted sum of the parts.
pub struct LossReport {
    pub total: Tensor,
    /// (scale factor, L1 term) for the pixel loss.
    pub per_scale: Vec<(usize, f32)>,
    /// (scale factor, tap index, term) for the feature loss.
    pub per_tap: Vec<(usize, usize, f32)>,
}

impl LossReport {
    pub fn value(&self) -> f32 {
        self.total.item()
    }
}

fn mean_abs_diff(tape: &GradTape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = ops::sub(tape, a, b)?;
    let s = ops::abs_sum(tape, &d)?;
    ops::scalar_mul(tape, &s, 1.0 / a.numel() as f32)
}

/// Mean absolute error between each pyramid level and the ground truth
/// downsampled to that scale; equal weights across scales.
pub fn l1_multiscale(tape: &GradTape, pyramid: &ScalePyramid, y: &Tensor) -> Result<LossReport> {
    let s = y.shape();
    if s.len() != 4 || s[2] % 8 != 0 || s[3] % 8 != 0 {
        return Err(Error::geometry(format!(
            "ground truth {s:?} must be [N,3,H,W] divisible by 8"
        )));
    }
    let mut per_scale = Vec::new();
    let mut total: Option<Tensor> = None;
    for (scale, pred) in &pyramid.levels {
        let target = ops::bilinear_resize(tape, y, s[2] / scale, s[3] / scale)?;
        let term = mean_abs_diff(tape, pred, &target)?;
        per_scale.push((*scale, term.item()));
        total = Some(match total {
            None => term,
            Some(t) => ops::add(tape, &t, &term)?,
        });
    }
    Ok(LossReport {
        total: total.ok_or_else(|| Error::contract("empty pyramid"))?,
        per_scale,
        per_tap: Vec::new(),
    })
}

/// Feature-space L1: mean absolute distance between extractor taps of the
/// prediction and of the ground truth, summed over scales and taps.
/// Gradient flows to the prediction only.
pub fn feature_loss(
    tape: &GradTape,
    pyramid: &ScalePyramid,
    y: &Tensor,
    phi: &FeatureExtractor,
) -> Result<LossReport> {
    if phi.tap_count() == 0 {
        return Err(Error::config("feature extractor has no taps"));
    }
    let s = y.shape();
    let mut per_tap = Vec::new();
    let mut total: Option<Tensor> = None;
    let frozen = GradTape::disabled();
    for (scale, pred) in &pyramid.levels {
        let target = ops::bilinear_resize(&frozen, y, s[2] / scale, s[3] / scale)?;
        let pred_taps = phi.forward(tape, pred)?;
        let gt_taps = phi.forward(&frozen, &target)?;
        for (ti, (pt, gt)) in pred_taps.iter().zip(&gt_taps).enumerate() {
            let term = mean_abs_diff(tape, pt, gt)?;
            per_tap.push((*scale, ti, term.item()));
            total = Some(match total {
                None => term,
                Some(t) => ops::add(tape, &t, &term)?,
            });
        }
    }
    Ok(LossReport {
        total: total.ok_or_else(|| Error::contract("empty pyramid"))?,
        per_scale: Vec::new(),
        per_tap,
    })
}

/// `l1 + lambda * feature`.
pub fn mixed_loss(
    tape: &GradTape,
    pyramid: &ScalePyramid,
    y: &Tensor,
    phi: &FeatureExtractor,
    lambda: f32,
) -> Result<LossReport> {
    if lambda < 0.0 {
        return Err(Error::config("mixed loss lambda must be >= 0"));
    }
    let l1 = l1_multiscale(tape, pyramid, y)?;
    let feat = feature_loss(tape, pyramid, y, phi)?;
    let scaled = ops::scalar_mul(tape, &feat.total, lambda)?;
    let total = ops::add(tape, &l1.total, &scaled)?;
    Ok(LossReport {
        total,
        per_scale: l1.per_scale,
        per_tap: feat.per_tap,
    })
}

/// Writes the default extractor to a DRBT container, usable as a template
/// for imported weights.
pub fn export_feature_extractor(phi: &FeatureExtractor, path: impl AsRef<Path>) -> Result<()> {
    let mut entries: BTreeMap<String, Tensor> = BTreeMap::new();
    let downsample: Vec<f32> = phi
        .layers
        .iter()
        .map(|l| if l.downsample { 1.0 } else { 0.0 })
        .collect();
    entries.insert(
        "phi.downsample".into(),
        Tensor::from_vec(&[downsample.len()], downsample)?,
    );
    let taps: Vec<f32> = phi.taps.iter().map(|&t| t as f32).collect();
    entries.insert("phi.taps".into(), Tensor::from_vec(&[taps.len()], taps)?);
    for (i, layer) in phi.layers.iter().enumerate() {
        entries.insert(format!("phi.layer{i}.weight"), layer.weight.clone());
        entries.insert(format!("phi.layer{i}.bias"), layer.bias.clone());
    }
    crate::train::write_container(path, &entries)
}
