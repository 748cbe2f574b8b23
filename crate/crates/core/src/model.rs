//! The full restoration network: encoder, decoder, and the four-block
//! dynamic residual cascade, plus parameter bookkeeping and tiled
//! inference for arbitrary image sizes.

use std::collections::BTreeMap;

use crate::drb::{cascade, DrbBlock, DrbState, ScalePyramid};
use crate::error::{Error, Result};
use crate::nn::{Decoder, Encoder};
use crate::tensor::{GradTape, Tensor};

pub const KERNEL_SIZES: [usize; 4] = [5, 7, 9, 11];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Base channel width; per-scale widths are {1, 2, 4, 8} multiples.
    pub base_width: usize,
    /// Dynamic kernel size, one of {5, 7, 9, 11}.
    pub kernel_size: usize,
    /// Negative slope of the leaky-relu activations.
    pub slope: f32,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            kernel_size: 7,
            slope: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Width configuration sized to land near the published parameter
    /// count of the full-scale network.
    pub fn paper_scale(seed: u64) -> ModelConfig {
        ModelConfig {
            base_width: 52,
            seed,
            ..ModelConfig::default()
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::config("model width must be positive"));
        }
        if !KERNEL_SIZES.contains(&self.kernel_size) {
            return Err(Error::config(format!(
                "dynamic kernel size must be one of {KERNEL_SIZES:?}, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub drbs: Vec<DrbBlock>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = crate::rng(config.seed);
        let widths = config.widths();
        let encoder = Encoder::new(&widths, config.slope, &mut rng);
        let decoder = Decoder::new(&widths, config.slope, &mut rng);
        // Decoder features arrive coarsest first: scales 8, 4, 2, 1.
        let drbs = (0..4)
            .map(|i| {
                DrbBlock::new(
                    config.base_width,
                    widths[3 - i],
                    config.kernel_size,
                    config.slope,
                    &mut rng,
                )
            })
            .collect();
        Ok(Model {
            config,
            encoder,
            decoder,
            drbs,
        })
    }

    /// Full forward pass: `[N,3,H,W]` (H, W divisible by 8) to the output
    /// pyramid at scales {8,4,2,1}. Outputs are not clamped here; clamping
    /// happens only at inference.
    pub fn forward(&self, tape: &GradTape, x: &Tensor) -> Result<ScalePyramid> {
        Ok(self.forward_with_states(tape, x)?.0)
    }

    pub fn forward_with_states(
        &self,
        tape: &GradTape,
        x: &Tensor,
    ) -> Result<(ScalePyramid, Vec<DrbState>)> {
        let feats = self.encoder.forward(tape, x)?;
        let dec = self.decoder.forward(tape, &feats)?;
        cascade(tape, &self.drbs, x, &dec)
    }

    /// Inference on a divisible-by-8 input: restored image clamped to [0,1].
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let tape = GradTape::disabled();
        let pyramid = self.forward(&tape, x)?;
        let mut data = pyramid.finest().to_vec();
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::from_vec(pyramid.finest().shape(), data)
    }

    /// Inference on an arbitrary-size image: reflection-pads to
    /// divisibility, splits into overlapping tiles, and feather-blends.
    /// Output size equals input size.
    pub fn infer_tiled(&self, x: &Tensor, tile: usize, overlap: usize) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::dimension(format!(
                "tiled inference expects [1,3,H,W], got {s:?}"
            )));
        }
        if tile % 8 != 0 {
            return Err(Error::config(format!("tile {tile} must be divisible by 8")));
        }
        if overlap < 16 {
            return Err(Error::config(format!("overlap {overlap} must be >= 16")));
        }
        if tile <= 2 * overlap {
            return Err(Error::config(format!(
                "tile {tile} must exceed twice the overlap {overlap}"
            )));
        }
        let (h, w) = (s[2], s[3]);

        // Reflection-pad up to at least one tile and to divisibility by 8.
        let ph = pad_target(h, tile);
        let pw = pad_target(w, tile);
        let padded = reflect_pad_nchw(&x.to_vec(), h, w, ph, pw);

        let mut acc = vec![0.0f64; 3 * ph * pw];
        let mut wsum = vec![0.0f64; ph * pw];
        let step = tile - overlap;
        let ys = tile_starts(ph, tile, step);
        let xs = tile_starts(pw, tile, step);
        for &ty in &ys {
            for &tx in &xs {
                let mut patch = vec![0.0f32; 3 * tile * tile];
                for c in 0..3 {
                    for y in 0..tile {
                        let src = c * ph * pw + (ty + y) * pw + tx;
                        let dst = c * tile * tile + y * tile;
                        patch[dst..dst + tile].copy_from_slice(&padded[src..src + tile]);
                    }
                }
                let t = Tensor::from_vec(&[1, 3, tile, tile], patch)?;
                let restored = self.infer(&t)?;
                let rv = restored.data();
                for y in 0..tile {
                    let wy = feather(y, tile, overlap);
                    for xo in 0..tile {
                        let wgt = (wy * feather(xo, tile, overlap)) as f64;
                        let pi = (ty + y) * pw + (tx + xo);
                        wsum[pi] += wgt;
                        for c in 0..3 {
                            acc[c * ph * pw + pi] +=
                                wgt * rv[c * tile * tile + y * tile + xo] as f64;
                        }
                    }
                }
            }
        }

        let mut out = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for xo in 0..w {
                    let pi = y * pw + xo;
                    out[c * h * w + y * w + xo] = (acc[c * ph * pw + pi] / wsum[pi]) as f32;
                }
            }
        }
        Tensor::from_vec(&[1, 3, h, w], out)
    }

    /// Named parameters in a fixed deterministic order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut params = Vec::new();
        {
            let mut push = |name: String, t: &Tensor| params.push((name, t.clone()));
            self.encoder.visit_params(&mut push);
            self.decoder.visit_params(&mut push);
            for (i, drb) in self.drbs.iter().enumerate() {
                let scale = 8 >> i;
                drb.visit_params(&format!("drb.scale{scale}"), &mut push);
            }
        }
        params
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.named_parameters())
    }

    /// Loads named tensors into the registry; unknown or missing names are
    /// rejected.
    pub fn load_named(&self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let params = self.named_parameters();
        let mut known: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in &params {
            known.insert(name.as_str(), t);
        }
        for name in entries.keys() {
            if !known.contains_key(name.as_str()) {
                return Err(Error::format(format!("unknown parameter '{name}'")));
            }
        }
        for (name, t) in &params {
            let src = entries
                .get(name)
                .ok_or_else(|| Error::format(format!("missing parameter '{name}'")))?;
            if src.shape() != t.shape() {
                return Err(Error::format(format!(
                    "parameter '{name}': shape {:?} in file, model wants {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.load_data(&src.data())?;
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_parameters() {
            t.zero_grad();
        }
    }

    /// Test hook: configure every DRB as a pass-through so the cascade
    /// reduces to the chain of bilinear upsamples.
    pub fn make_identity_cascade(&self) {
        for drb in &self.drbs {
            drb.zero_residual_paths();
        }
    }
}

pub fn count_params(params: &[(String, Tensor)]) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

fn pad_target(n: usize, tile: usize) -> usize {
    let m = n.max(tile);
    m.div_ceil(8) * 8
}

fn tile_starts(total: usize, tile: usize, step: usize) -> Vec<usize> {
    let mut starts = vec![0];
    while starts.last().unwrap() + tile < total {
        starts.push((starts.last().unwrap() + step).min(total - tile));
    }
    starts
}

/// Linear feathering weight across a tile axis; flat in the interior,
/// ramping down inside the overlap margins.
fn feather(i: usize, tile: usize, overlap: usize) -> f32 {
    let d = i.min(tile - 1 - i);
    if d >= overlap {
        1.0
    } else {
        (d + 1) as f32 / (overlap + 1) as f32
    }
}

fn reflect_pad_nchw(src: &[f32], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let reflect = |i: usize, n: usize| -> usize {
        // Reflect without repeating the edge sample, as long as the pad is
        // smaller than the image; clamp beyond that.
        if i < n {
            i
        } else {
            let over = i - n + 1;
            n.saturating_sub(1).saturating_sub(over.min(n - 1))
        }
    };
    let mut out = vec![0.0f32; 3 * ph * pw];
    for c in 0..3 {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                let sx = reflect(x, w);
                out[c * ph * pw + y * pw + x] = src[c * h * w + sy * w + sx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            base_width: 4,
            kernel_size: 5,
            slope: 0.2,
            seed,
        }
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let model = Model::new(small_config(1)).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let tape = GradTape::disabled();
        let pyr = model.forward(&tape, &x).unwrap();
        let sizes: Vec<_> = pyr
            .levels
            .iter()
            .map(|(s, t)| (*s, t.shape()[2]))
            .collect();
        assert_eq!(sizes, vec![(8, 2), (4, 4), (2, 8), (1, 16)]);
        for (_, t) in &pyr.levels {
            assert!(t.to_vec().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut crate::rng(3));
        let run = || {
            let model = Model::new(small_config(7)).unwrap();
            let tape = GradTape::disabled();
            model
                .forward(&tape, &x)
                .unwrap()
                .finest()
                .to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_cascade_is_upsample_chain() {
        let model = Model::new(small_config(2)).unwrap();
        model.make_identity_cascade();
        let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut crate::rng(4));
        let tape = GradTape::disabled();
        let pyr = model.forward(&tape, &x).unwrap();

        // Expected: x8 upsampled back through x2 steps.
        let t2 = GradTape::disabled();
        let mut expect = ops::bilinear_resize(&t2, &x, 2, 2).unwrap();
        for s in [4, 8, 16] {
            expect = ops::bilinear_resize(&t2, &expect, s, s).unwrap();
        }
        for (a, b) in pyr.finest().to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn param_names_unique_and_count_scales() {
        let model = Model::new(small_config(0)).unwrap();
        let names: Vec<String> = model
            .named_parameters()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        assert!(names.iter().any(|n| n == "encoder.level0.conv0.weight"));
        assert!(names.iter().any(|n| n.starts_with("drb.scale8.")));

        let small = Model::new(small_config(0)).unwrap().count_params();
        let big = Model::new(ModelConfig {
            base_width: 8,
            ..small_config(0)
        })
        .unwrap()
        .count_params();
        let ratio = big as f64 / small as f64;
        assert!(
            (3.2..4.2).contains(&ratio),
            "doubling widths should roughly 4x conv params, ratio {ratio}"
        );
        assert_eq!(count_params(&[]), 0);
    }

    #[test]
    fn paper_scale_param_count_in_range() {
        let model = Model::new(ModelConfig::paper_scale(0)).unwrap();
        let count = model.count_params() as f64;
        let target = 11.69e6;
        assert!(
            (count - target).abs() / target <= 0.20,
            "paper-scale parameter count {count} outside 20% of {target}"
        );
    }

    #[test]
    fn tiled_config_validation() {
        let model = Model::new(small_config(0)).unwrap();
        let x = Tensor::zeros(&[1, 3, 40, 40]);
        assert!(matches!(
            model.infer_tiled(&x, 64, 32),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            model.infer_tiled(&x, 60, 16),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            model.infer_tiled(&x, 64, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tiled_matches_forward_on_exact_tile() {
        let model = Model::new(small_config(5)).unwrap();
        let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut crate::rng(6));
        let direct = model.infer(&x).unwrap();
        let tiled = model.infer_tiled(&x, 64, 16).unwrap();
        for (a, b) in direct.to_vec().iter().zip(tiled.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
