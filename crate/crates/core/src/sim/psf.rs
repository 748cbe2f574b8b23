//! Point-spread-function probing: push a point source through either
//! simulator and characterize the response. The conventional camera
//! produces one disk-like lobe; the synthetic aperture produces a grid of
//! impulses, one per sub-aperture view.

use crate::error::Result;
use crate::sim::{blur_conventional, blur_lightfield, LensSpec, LightFieldSpec, SceneSpec};

/// Luminance PSF image of a centered point source at constant depth.
pub struct PsfImage {
    pub size: usize,
    pub data: Vec<f32>,
}

impl PsfImage {
    pub fn max(&self) -> f32 {
        self.data.iter().cloned().fold(0.0, f32::max)
    }

    /// Horizontal line profile through the center.
    pub fn center_profile(&self) -> Vec<f32> {
        let row = self.size / 2;
        self.data[row * self.size..(row + 1) * self.size].to_vec()
    }

    /// Number of 4-connected regions strictly above half of the peak.
    pub fn half_max_regions(&self) -> usize {
        let thr = self.max() * 0.5;
        let n = self.size;
        let mut seen = vec![false; n * n];
        let mut regions = 0;
        for start in 0..n * n {
            if seen[start] || self.data[start] <= thr {
                continue;
            }
            regions += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / n, i % n);
                let mut push = |j: usize| {
                    if !seen[j] && self.data[j] > thr {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(i - n);
                }
                if y + 1 < n {
                    push(i + n);
                }
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < n {
                    push(i + 1);
                }
            }
        }
        regions
    }

    /// Number of strict 8-neighborhood local maxima above 5% of the peak.
    pub fn local_maxima(&self) -> usize {
        let n = self.size;
        let floor = self.max() * 0.05;
        let mut count = 0;
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let v = self.data[y * n + x];
                if v <= floor {
                    continue;
                }
                let mut is_max = true;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let j = ((y as i64 + dy) * n as i64 + x as i64 + dx) as usize;
                        if self.data[j] >= v {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    count += 1;
                }
            }
        }
        count
    }
}

fn luminance_of(t: &crate::tensor::Tensor, size: usize) -> Vec<f32> {
    let d = t.data();
    let hw = size * size;
    (0..hw)
        .map(|i| (d[i] + d[hw + i] + d[2 * hw + i]) / 3.0)
        .collect()
}

/// PSF of the conventional (thin-lens disk) simulator at `depth_m`.
pub fn probe_conventional(lens: &LensSpec, depth_m: f32, size: usize) -> Result<PsfImage> {
    let scene = SceneSpec::point_source(size, depth_m)?;
    let blurred = blur_conventional(&scene, lens)?;
    Ok(PsfImage {
        size,
        data: luminance_of(&blurred, size),
    })
}

/// PSF of the light-field synthetic-aperture simulator at `depth_m`.
pub fn probe_lightfield(lf: &LightFieldSpec, depth_m: f32, size: usize) -> Result<PsfImage> {
    let scene = SceneSpec::point_source(size, depth_m)?;
    let blurred = blur_lightfield(&scene, lf)?;
    Ok(PsfImage {
        size,
        data: luminance_of(&blurred, size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conventional_psf_is_one_lobe() {
        let lens = LensSpec::default();
        let psf = probe_conventional(&lens, 5.0, 33).unwrap();
        assert_eq!(psf.half_max_regions(), 1);
    }

    #[test]
    fn lightfield_psf_is_impulse_grid() {
        // Depth chosen so the per-view spacing is ~2.4 px and fractional,
        // keeping the 49 impulses distinct.
        let lf = LightFieldSpec {
            views: (7, 7),
            baseline_px: 4.0,
            focus_m: 2.0,
        };
        let depth = 1.0 / (1.0 / lf.focus_m + 2.37 / lf.baseline_px);
        let psf = probe_lightfield(&lf, depth, 33).unwrap();
        let maxima = psf.local_maxima();
        assert!(maxima >= 25, "expected a grid of impulses, got {maxima}");
        // The conventional PSF at the same depth stays a single blob.
        let lens = LensSpec::default();
        let conv = probe_conventional(&lens, depth, 33).unwrap();
        assert_eq!(conv.half_max_regions(), 1);
    }
}
