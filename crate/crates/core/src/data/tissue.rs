//! Background elimination for RGB slide images and patch sampling inside tissue.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageInstance;
use crate::error::{Error, Result};

/// Foreground is `saturation > saturation_floor` with hue outside `[hue_low, hue_high]`.
/// Hue is in `[0, 1)`, so the default band excludes greens and yellow-greens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub hue_low: f64,
    pub hue_high: f64,
    pub saturation_floor: f64,
    pub min_region_area: usize,
}

impl Default for TissueParams {
    fn default() -> Self {
        Self {
            hue_low: 0.25,
            hue_high: 0.45,
            saturation_floor: 0.05,
            min_region_area: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub height: usize,
    pub width: usize,
    /// Row-major foreground flags.
    pub mask: Vec<bool>,
    pub min_region_area: usize,
}

impl TissueMask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Hexcone RGB→HSV with every component in `[0, 1]` (hue wraps at 1).
pub fn hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        let h = (g - b) / delta;
        if h < 0.0 {
            h + 6.0
        } else {
            h
        }
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}

/// Thresholds hue and saturation per pixel, then drops 4-connected foreground components
/// smaller than `params.min_region_area`.
pub fn tissue_mask(image: &ImageInstance, params: &TissueParams) -> Result<TissueMask> {
    if image.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: image.channels,
        });
    }
    let (h, w) = (image.height, image.width);
    let mut mask: Vec<bool> = image
        .pixels
        .chunks_exact(3)
        .map(|px| {
            let (hue, sat, _) = hsv(px[0] as f64, px[1] as f64, px[2] as f64);
            sat > params.saturation_floor && !(params.hue_low..=params.hue_high).contains(&hue)
        })
        .collect();

    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if component.len() < params.min_region_area {
            for &p in &component {
                mask[p] = false;
            }
        }
    }
    Ok(TissueMask {
        height: h,
        width: w,
        mask,
        min_region_area: params.min_region_area,
    })
}

/// Draws `count` square patches (with replacement) whose center pixel lies on tissue and
/// whose extent stays inside the image. The center of an even-sized patch is the pixel
/// just below and right of the geometric center.
pub fn sample_patches(
    image: &ImageInstance,
    mask: &TissueMask,
    count: usize,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<ImageInstance>> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::shape(
            "tissue mask",
            (image.height, image.width),
            (mask.height, mask.width),
        ));
    }
    if patch_size == 0 || patch_size > image.height || patch_size > image.width {
        return Err(Error::EmptyTissue);
    }
    let half = patch_size / 2;
    let anchors: Vec<(usize, usize)> = (half..=image.height - (patch_size - half))
        .flat_map(|y| (half..=image.width - (patch_size - half)).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .collect();
    if anchors.is_empty() {
        return Err(Error::EmptyTissue);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = image.channels;
    Ok((0..count)
        .map(|id| {
            let (cy, cx) = anchors[rng.random_range(0..anchors.len())];
            let (top, left) = (cy - half, cx - half);
            let mut pixels = Vec::with_capacity(patch_size * patch_size * c);
            for y in top..top + patch_size {
                let row = (y * image.width + left) * c;
                pixels.extend_from_slice(&image.pixels[row..row + patch_size * c]);
            }
            ImageInstance {
                id,
                height: patch_size,
                width: patch_size,
                channels: c,
                pixels,
                true_label: None,
            }
        })
        .collect())
}

pub fn read_rgb_png(path: impl AsRef<Path>, id: usize) -> Result<ImageInstance> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageInstance {
        id,
        height: h as usize,
        width: w as usize,
        channels: 3,
        pixels: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
        true_label: None,
    })
}

/// Writes a grayscale or RGB instance as 8-bit PNG.
pub fn write_png(image: &ImageInstance, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (image.width as u32, image.height as u32);
    match image.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path.as_ref())),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path.as_ref())),
        c => {
            return Err(Error::Channels {
                expected: 3,
                actual: c,
            })
        }
    }
    .ok_or_else(|| Error::shape("png buffer", (h, w, image.channels), image.pixels.len()))??;
    Ok(())
}
