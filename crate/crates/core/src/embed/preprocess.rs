use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    Nearest,
    Bilinear,
    Bicubic,
}

impl From<Resample> for FilterType {
    fn from(r: Resample) -> Self {
        match r {
            Resample::Nearest => FilterType::Nearest,
            Resample::Bilinear => FilterType::Triangle,
            Resample::Bicubic => FilterType::CatmullRom,
        }
    }
}

/// Image constants recorded by the exporter: shortest-edge resize, center
/// crop, rescale, then per-channel `(x - mean) / std`, laid out as NCHW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePreprocessing {
    pub resize_shortest_edge: u32,
    pub crop_size: u32,
    pub resample: Resample,
    pub rescale: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ImagePreprocessing {
    /// Returns a `3 * crop * crop` channel-major buffer.
    pub fn apply(&self, img: &DynamicImage) -> Vec<f32> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let target = self.resize_shortest_edge;
        let (nw, nh) = if w <= h {
            (target, ((h as u64 * target as u64 + w as u64 / 2) / w as u64).max(1) as u32)
        } else {
            (((w as u64 * target as u64 + h as u64 / 2) / h as u64).max(1) as u32, target)
        };
        let resized = if (nw, nh) == (w, h) {
            rgb
        } else {
            image::imageops::resize(&rgb, nw, nh, self.resample.into())
        };
        let crop = self.crop_size;
        let left = nw.saturating_sub(crop) / 2;
        let top = nh.saturating_sub(crop) / 2;
        let plane = (crop * crop) as usize;
        let mut out = vec![0f32; 3 * plane];
        for y in 0..crop {
            for x in 0..crop {
                let (sx, sy) = (left + x, top + y);
                let px = if sx < nw && sy < nh {
                    resized.get_pixel(sx, sy).0
                } else {
                    [0, 0, 0]
                };
                let idx = (y * crop + x) as usize;
                for c in 0..3 {
                    out[c * plane + idx] = (px[c] as f32 * self.rescale - self.mean[c]) / self.std[c];
                }
            }
        }
        out
    }
}
