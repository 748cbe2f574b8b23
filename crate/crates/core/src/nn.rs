//! Reusable network building blocks: conv blocks, residual blocks, and the
//! multi-scale encoder/decoder with additive skip connections.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{kaiming_uniform, ops, GradTape, Tensor};

/// One convolution layer with optional leaky-relu activation.
/// Padding is always `k/2` so stride-1 blocks preserve spatial size.
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
    activation: Option<f32>,
}

impl ConvBlock {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        activation: Option<f32>,
        rng: &mut impl Rng,
    ) -> ConvBlock {
        let slope = activation.unwrap_or(0.0);
        ConvBlock {
            weight: kaiming_uniform(&[out_c, in_c, k, k], slope, rng).requires_grad(),
            bias: Tensor::zeros(&[out_c]).requires_grad(),
            stride,
            padding: k / 2,
            activation,
        }
    }

    pub fn forward(&self, tape: &GradTape, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(tape, x, &self.weight, &self.bias, self.stride, self.padding)?;
        match self.activation {
            Some(slope) => ops::leaky_relu(tape, &y, slope),
            None => Ok(y),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

/// Two 3x3 convolutions with a residual connection; zeroing the second
/// conv makes the block an exact identity.
pub struct ResidualBlock {
    conv0: ConvBlock,
    conv1: ConvBlock,
}

impl ResidualBlock {
    pub fn new(channels: usize, slope: f32, rng: &mut impl Rng) -> ResidualBlock {
        let block = ResidualBlock {
            conv0: ConvBlock::new(channels, channels, 3, 1, Some(slope), rng),
            conv1: ConvBlock::new(channels, channels, 3, 1, None, rng),
        };
        // Without normalization layers, stacked residual blocks compound
        // sqrt(2) growth per block; a damped second conv keeps the stack
        // near-identity at init.
        block
            .conv1
            .weight
            .update_data(|d| d.iter_mut().for_each(|v| *v *= 0.1));
        block
    }

    pub fn forward(&self, tape: &GradTape, x: &Tensor) -> Result<Tensor> {
        let h = self.conv0.forward(tape, x)?;
        let h = self.conv1.forward(tape, &h)?;
        ops::add(tape, x, &h)
    }

    /// Test hook: make this block an identity map.
    pub fn zero_second_conv(&self) {
        self.conv1.weight.update_data(|d| d.fill(0.0));
        self.conv1.bias.update_data(|d| d.fill(0.0));
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv0.visit_params(&format!("{prefix}.conv0"), f);
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
    }
}

/// Pyramid feature extractor: four levels at resolutions
/// {1, 1/2, 1/4, 1/8}, two convs per level. Levels downsample by a
/// bilinear half-resize before the convs (a stride-2 odd-kernel conv
/// cannot halve even sizes under the exact-geometry contract).
pub struct Encoder {
    levels: Vec<[ConvBlock; 2]>,
}

impl Encoder {
    pub fn new(widths: &[usize; 4], slope: f32, rng: &mut impl Rng) -> Encoder {
        let mut levels = Vec::with_capacity(4);
        let mut in_c = 3;
        for &w in widths {
            levels.push([
                ConvBlock::new(in_c, w, 3, 1, Some(slope), rng),
                ConvBlock::new(w, w, 3, 1, Some(slope), rng),
            ]);
            in_c = w;
        }
        Encoder { levels }
    }

    /// Returns feature maps at spatial sizes H/2^i for i = 0..=3.
    pub fn forward(&self, tape: &GradTape, x: &Tensor) -> Result<Vec<Tensor>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dimension(format!(
                "encoder expects [N,3,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::geometry(format!(
                "encoder input {h}x{w} must be divisible by 8"
            )));
        }
        let mut feats = Vec::with_capacity(4);
        let mut cur = x.clone();
        for (i, level) in self.levels.iter().enumerate() {
            if i > 0 {
                let s = cur.shape();
                cur = ops::bilinear_resize(tape, &cur, s[2] / 2, s[3] / 2)?;
            }
            cur = level[0].forward(tape, &cur)?;
            cur = level[1].forward(tape, &cur)?;
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, level) in self.levels.iter().enumerate() {
            for (j, conv) in level.iter().enumerate() {
                conv.visit_params(&format!("encoder.level{i}.conv{j}"), f);
            }
        }
    }
}

struct DecoderStage {
    up: ConvBlock,
    res: [ResidualBlock; 2],
}

/// Mirror of the encoder: consumes the four encoder maps via additive skip
/// connections and emits decoder features d at scales {8, 4, 2, 1}.
pub struct Decoder {
    bottom_res: [ResidualBlock; 2],
    // Stages towards finer scales: 4, 2, 1.
    stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn new(widths: &[usize; 4], slope: f32, rng: &mut impl Rng) -> Decoder {
        let bottom_res = [
            ResidualBlock::new(widths[3], slope, rng),
            ResidualBlock::new(widths[3], slope, rng),
        ];
        let mut stages = Vec::with_capacity(3);
        for i in (0..3).rev() {
            stages.push(DecoderStage {
                up: ConvBlock::new(widths[i + 1], widths[i], 3, 1, Some(slope), rng),
                res: [
                    ResidualBlock::new(widths[i], slope, rng),
                    ResidualBlock::new(widths[i], slope, rng),
                ],
            });
        }
        Decoder { stages, bottom_res }
    }

    /// `enc_feats` as produced by [`Encoder::forward`]; returns
    /// `[d8, d4, d2, d1]` (coarsest first).
    pub fn forward(&self, tape: &GradTape, enc_feats: &[Tensor]) -> Result<Vec<Tensor>> {
        if enc_feats.len() != 4 {
            return Err(Error::dimension(format!(
                "decoder expects 4 encoder maps, got {}",
                enc_feats.len()
            )));
        }
        let mut d = enc_feats[3].clone();
        for rb in &self.bottom_res {
            d = rb.forward(tape, &d)?;
        }
        let mut outs = vec![d.clone()];
        for (stage, skip) in self.stages.iter().zip(enc_feats[..3].iter().rev()) {
            let s = skip.shape();
            let up = ops::bilinear_resize(tape, &d, s[2], s[3])?;
            let up = stage.up.forward(tape, &up)?;
            d = ops::add(tape, &up, skip)?;
            for rb in &stage.res {
                d = rb.forward(tape, &d)?;
            }
            outs.push(d.clone());
        }
        Ok(outs)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (j, rb) in self.bottom_res.iter().enumerate() {
            rb.visit_params(&format!("decoder.scale8.res{j}"), f);
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let scale = 4 >> i; // 4, 2, 1
            stage.up.visit_params(&format!("decoder.scale{scale}.up"), f);
            for (j, rb) in stage.res.iter().enumerate() {
                rb.visit_params(&format!("decoder.scale{scale}.res{j}"), f);
            }
        }
    }

    /// Test hook: zero every residual block's second conv.
    pub fn make_residuals_identity(&self) {
        for rb in &self.bottom_res {
            rb.zero_second_conv();
        }
        for stage in &self.stages {
            for rb in &stage.res {
                rb.zero_second_conv();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_shapes_halve() {
        let mut rng = crate::rng(0);
        let enc = Encoder::new(&[16, 32, 64, 128], 0.2, &mut rng);
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let tape = GradTape::disabled();
        let feats = enc.forward(&tape, &x).unwrap();
        let sizes: Vec<_> = feats.iter().map(|f| (f.shape()[2], f.shape()[3])).collect();
        assert_eq!(sizes, vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        let chans: Vec<_> = feats.iter().map(|f| f.shape()[1]).collect();
        assert_eq!(chans, vec![16, 32, 64, 128]);
        for f in feats {
            assert!(f.to_vec().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encoder_rejects_indivisible() {
        let mut rng = crate::rng(0);
        let enc = Encoder::new(&[4, 8, 16, 32], 0.2, &mut rng);
        let x = Tensor::zeros(&[1, 3, 60, 64]);
        let tape = GradTape::disabled();
        assert!(matches!(
            enc.forward(&tape, &x),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn paper_patch_size_deepest_map() {
        let mut rng = crate::rng(0);
        let enc = Encoder::new(&[4, 8, 16, 32], 0.2, &mut rng);
        let x = Tensor::zeros(&[1, 3, 320, 320]);
        let tape = GradTape::disabled();
        let feats = enc.forward(&tape, &x).unwrap();
        assert_eq!(feats[3].shape()[2], 40);
        assert_eq!(feats[3].shape()[3], 40);
    }

    #[test]
    fn residual_block_zeroed_is_identity() {
        let mut rng = crate::rng(5);
        let rb = ResidualBlock::new(8, 0.2, &mut rng);
        rb.zero_second_conv();
        let x = Tensor::rand_uniform(&[1, 8, 6, 6], -1.0, 1.0, &mut rng);
        let tape = GradTape::disabled();
        let y = rb.forward(&tape, &x).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn decoder_mirrors_encoder_shapes() {
        let mut rng = crate::rng(0);
        let widths = [4, 8, 16, 32];
        let enc = Encoder::new(&widths, 0.2, &mut rng);
        let dec = Decoder::new(&widths, 0.2, &mut rng);
        let x = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let tape = GradTape::disabled();
        let feats = enc.forward(&tape, &x).unwrap();
        let d = dec.forward(&tape, &feats).unwrap();
        let sizes: Vec<_> = d.iter().map(|f| (f.shape()[1], f.shape()[2])).collect();
        assert_eq!(sizes, vec![(32, 4), (16, 8), (8, 16), (4, 32)]);
    }
}
