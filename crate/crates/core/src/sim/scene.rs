//! Synthetic scene generation: layered fronto-parallel regions with
//! procedural textures over a smooth-depth background, so ground truth
//! depth and sharp images are exact.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One compositing layer. The color canvas covers the full frame (content
/// exists behind occluders, which matters once blur spreads edges).
pub struct Layer {
    pub color: Vec<f32>, // 3*H*W
    pub mask: Vec<f32>,  // H*W, 1 inside the region
    pub depth: Vec<f32>, // H*W, meters
    /// Set when the layer is fronto-parallel (constant depth).
    pub constant_depth: Option<f32>,
}

/// A scene: sharp composite, per-pixel depth, and the layer stack
/// (back to front, `layers[0]` is the full-frame background).
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub sharp: Tensor, // [1,3,H,W]
    pub depth: Vec<f32>,
    pub layers: Vec<Layer>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth.iter().any(|&z| z <= 0.0) {
            return Err(Error::contract("scene depth must be strictly positive"));
        }
        Ok(())
    }

    /// Composite of premultiplied-color/alpha pairs, back to front.
    pub(crate) fn composite(
        layers: &[Layer],
        h: usize,
        w: usize,
        mut per_layer: impl FnMut(&Layer) -> (Vec<f32>, Vec<f32>),
    ) -> Vec<f32> {
        let mut out = vec![0.0f32; 3 * h * w];
        for layer in layers {
            let (premult, alpha) = per_layer(layer);
            for c in 0..3 {
                for i in 0..h * w {
                    let o = c * h * w + i;
                    out[o] = premult[o] + (1.0 - alpha[i]) * out[o];
                }
            }
        }
        out
    }

    /// Builds the scene from layers: composites the sharp image and the
    /// depth map front-most-wins.
    pub fn from_layers(layers: Vec<Layer>, h: usize, w: usize, seed: u64) -> Result<SceneSpec> {
        if layers.is_empty() {
            return Err(Error::contract("scene needs at least a background layer"));
        }
        let sharp_data = SceneSpec::composite(&layers, h, w, |layer| {
            let mut premult = vec![0.0f32; 3 * h * w];
            for c in 0..3 {
                for i in 0..h * w {
                    premult[c * h * w + i] = layer.color[c * h * w + i] * layer.mask[i];
                }
            }
            (premult, layer.mask.clone())
        });
        let mut depth = layers[0].depth.clone();
        for layer in &layers[1..] {
            for i in 0..h * w {
                if layer.mask[i] > 0.5 {
                    depth[i] = layer.depth[i];
                }
            }
        }
        let scene = SceneSpec {
            h,
            w,
            sharp: Tensor::from_vec(&[1, 3, h, w], sharp_data)?,
            depth,
            layers,
            seed,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Single constant-depth layer holding one bright pixel at the center;
    /// blurring it exposes the point spread function.
    pub fn point_source(size: usize, depth_m: f32) -> Result<SceneSpec> {
        let (h, w) = (size, size);
        let mut color = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            color[c * h * w + (h / 2) * w + w / 2] = 1.0;
        }
        let layer = Layer {
            color,
            mask: vec![1.0; h * w],
            depth: vec![depth_m; h * w],
            constant_depth: Some(depth_m),
        };
        SceneSpec::from_layers(vec![layer], h, w, 0)
    }
}

/// Band-limited procedural texture: base color plus random sinusoids with
/// a bias towards a few high frequencies so blur is measurable.
fn texture(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * h * w];
    let base: [f32; 3] = [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
    ];
    struct Wave {
        fx: f32,
        fy: f32,
        phase: f32,
        amp: f32,
        chan: [f32; 3],
    }
    let waves: Vec<Wave> = (0..7)
        .map(|i| {
            let freq = if i < 3 {
                rng.gen_range(0.10..0.35) // high frequency: fine texture
            } else {
                rng.gen_range(0.01..0.08)
            };
            let theta = rng.gen_range(0.0..std::f32::consts::TAU);
            Wave {
                fx: freq * theta.cos() * std::f32::consts::TAU,
                fy: freq * theta.sin() * std::f32::consts::TAU,
                phase: rng.gen_range(0.0..std::f32::consts::TAU),
                amp: rng.gen_range(0.04..0.14),
                chan: [
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                ],
            }
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut v = [0.0f32; 3];
            for wv in &waves {
                let s = (wv.fx * x as f32 + wv.fy * y as f32 + wv.phase).sin() * wv.amp;
                for c in 0..3 {
                    v[c] += s * wv.chan[c];
                }
            }
            for c in 0..3 {
                out[c * h * w + y * w + x] = (base[c] + v[c]).clamp(0.02, 0.98);
            }
        }
    }
    out
}

/// Filled random convex polygon mask.
fn polygon_mask(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f32> {
    let cx = rng.gen_range(0.2..0.8) * w as f32;
    let cy = rng.gen_range(0.2..0.8) * h as f32;
    let radius = rng.gen_range(0.15..0.35) * h.min(w) as f32;
    let nv = rng.gen_range(3..=8);
    let mut angles: Vec<f32> = (0..nv)
        .map(|_| rng.gen_range(0.0..std::f32::consts::TAU))
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let verts: Vec<(f32, f32)> = angles
        .iter()
        .map(|&a| {
            let r = radius * rng.gen_range(0.6..1.0);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();

    let inside = |px: f32, py: f32| -> bool {
        // Even-odd rule.
        let mut hit = false;
        for i in 0..verts.len() {
            let (x1, y1) = verts[i];
            let (x2, y2) = verts[(i + 1) % verts.len()];
            if (y1 > py) != (y2 > py) {
                let t = (py - y1) / (y2 - y1);
                if px < x1 + t * (x2 - x1) {
                    hit = !hit;
                }
            }
        }
        hit
    };
    let mut mask = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                mask[y * w + x] = 1.0;
            }
        }
    }
    mask
}

/// Generates a layered scene focused at `focus_m`: a smooth-gradient
/// background plus 2..=5 fronto-parallel polygon layers, one of them
/// exactly on the focal plane.
pub fn generate_scene(seed: u64, h: usize, w: usize, focus_m: f32) -> Result<SceneSpec> {
    let mut rng = crate::stream_rng(seed, "scene", 0);

    // Background: smooth depth ramp behind the focal plane.
    let bg_color = texture(&mut rng, h, w);
    let z0 = focus_m * rng.gen_range(1.4..2.0);
    let z1 = focus_m * rng.gen_range(2.2..3.2);
    let dirx = rng.gen_range(-1.0f32..1.0);
    let diry = rng.gen_range(-1.0f32..1.0);
    let norm = (dirx * dirx + diry * diry).sqrt().max(1e-3);
    let mut bg_depth = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + 0.5 * (dirx * (x as f32 / w as f32 - 0.5) + diry * (y as f32 / h as f32 - 0.5)) / norm;
            bg_depth[y * w + x] = z0 + (z1 - z0) * t;
        }
    }
    let mut layers = vec![Layer {
        color: bg_color,
        mask: vec![1.0; h * w],
        depth: bg_depth,
        constant_depth: None,
    }];

    let count = rng.gen_range(2..=5usize);
    let focus_layer = rng.gen_range(0..count);
    let mut polys: Vec<(f32, Vec<f32>, Vec<f32>)> = (0..count)
        .map(|i| {
            let z = if i == focus_layer {
                focus_m
            } else if rng.gen_bool(0.5) {
                focus_m * rng.gen_range(0.60..0.85)
            } else {
                focus_m * rng.gen_range(1.35..2.8)
            };
            (z, texture(&mut rng, h, w), polygon_mask(&mut rng, h, w))
        })
        .collect();
    // Back to front: farther layers composited first.
    polys.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (z, color, mask) in polys {
        layers.push(Layer {
            color,
            mask,
            depth: vec![z; h * w],
            constant_depth: Some(z),
        });
    }
    SceneSpec::from_layers(layers, h, w, seed)
}
