//! PNG image I/O and the paired-folder dataset loader.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a `[1,3,H,W]` or `[3,H,W]` tensor as an 8-bit RGB PNG,
/// clamping to [0,1].
pub fn save_png(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        other => {
            return Err(Error::dimension(format!(
                "save_png expects [1,3,H,W], got {other:?}"
            )))
        }
    };
    let d = t.data();
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                quantize(d[y * w + x]),
                quantize(d[h * w + y * w + x]),
                quantize(d[2 * h * w + y * w + x]),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path.as_ref())?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an RGB PNG into a `[1,3,H,W]` tensor with values in [0,1].
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Paired (defocused, all-in-focus) images on disk: `NNNN_x.png` next to
/// `NNNN_y.png`, ordered by the manifest when present, otherwise by name.
pub struct PairedDataset {
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl PairedDataset {
    pub fn scan(dir: impl AsRef<Path>) -> Result<PairedDataset> {
        let dir = dir.as_ref();
        let manifest = dir.join("manifest.tsv");
        let mut stems: Vec<String> = if manifest.is_file() {
            let text = std::fs::read_to_string(&manifest)?;
            text.lines()
                .skip(1)
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.split('\t')
                        .next()
                        .map(|idx| idx.trim().to_string())
                        .ok_or_else(|| Error::format("manifest row without index"))
                })
                .collect::<Result<_>>()?
        } else {
            let mut found = Vec::new();
            for entry in std::fs::read_dir(dir)? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if let Some(stem) = name.strip_suffix("_x.png") {
                    found.push(stem.to_string());
                }
            }
            found.sort();
            found
        };
        stems.dedup();
        let mut pairs = Vec::with_capacity(stems.len());
        for stem in stems {
            let x = dir.join(format!("{stem}_x.png"));
            let y = dir.join(format!("{stem}_y.png"));
            if !x.is_file() || !y.is_file() {
                return Err(Error::format(format!(
                    "dataset pair '{stem}' is incomplete in {}",
                    dir.display()
                )));
            }
            pairs.push((x, y));
        }
        if pairs.is_empty() {
            return Err(Error::config(format!(
                "no image pairs found in {}",
                dir.display()
            )));
        }
        Ok(PairedDataset { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<(Tensor, Tensor)> {
        let (x, y) = &self.pairs[index];
        Ok((load_png(x)?, load_png(y)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        // Values on the 1/255 grid survive the round trip exactly.
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i % 256) as f32 / 255.0).collect();
        let t = Tensor::from_vec(&[1, 3, 4, 5], data.clone()).unwrap();
        save_png(&path, &t).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), &[1, 3, 4, 5]);
        for (a, b) in back.to_vec().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scan_pairs_and_reject_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::zeros(&[1, 3, 8, 8]);
        save_png(dir.path().join("0000_x.png"), &t).unwrap();
        save_png(dir.path().join("0000_y.png"), &t).unwrap();
        save_png(dir.path().join("0001_x.png"), &t).unwrap();
        save_png(dir.path().join("0001_y.png"), &t).unwrap();
        let ds = PairedDataset::scan(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);

        save_png(dir.path().join("0002_x.png"), &t).unwrap();
        assert!(PairedDataset::scan(dir.path()).is_err());
    }
}
