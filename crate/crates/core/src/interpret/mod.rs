//! Grad-CAM and occlusion heatmaps, plus display rendering.

mod gradcam;
mod occlusion;

pub use gradcam::{
    gradcam, gradcam_in, gradcam_nodes, model_gradcam_nodes, upsample_factor, GradCamNodes,
    GradCamOptions,
};
pub use occlusion::{occlusion_map, OcclusionConfig, OcclusionMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Sum1,
    Max1,
    Raw,
}

/// Nonnegative `height x width` map, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class: usize,
    pub norm: Normalization,
    /// The map was all zero before normalization.
    pub degenerate: bool,
}

impl Heatmap {
    /// Normalizes `raw` (negative entries are clamped to 0) to sum one.
    pub fn from_raw_sum1(raw: &[f64], height: usize, width: usize, class: usize) -> Result<Self> {
        Self::normalized(raw, height, width, class, Normalization::Sum1)
    }

    fn normalized(raw: &[f64], height: usize, width: usize, class: usize, norm: Normalization) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {height}x{width} heatmap",
                raw.len()
            )));
        }
        let clamped: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
        let denom = match norm {
            Normalization::Sum1 => clamped.iter().sum::<f64>(),
            Normalization::Max1 => clamped.iter().cloned().fold(0.0, f64::max),
            Normalization::Raw => 1.0,
        };
        let degenerate = clamped.iter().all(|&v| v == 0.0);
        let values = if degenerate {
            vec![0.0; clamped.len()]
        } else {
            clamped.iter().map(|&v| v / denom).collect()
        };
        Ok(Heatmap {
            values,
            height,
            width,
            class,
            norm,
            degenerate,
        })
    }

    /// Uniform sum-one map.
    pub fn uniform(height: usize, width: usize, class: usize) -> Self {
        let n = height * width;
        Heatmap {
            values: vec![1.0 / n as f64; n],
            height,
            width,
            class,
            norm: Normalization::Sum1,
            degenerate: false,
        }
    }

    /// The same map rescaled so its maximum is one.
    pub fn to_max1(&self) -> Heatmap {
        Self::normalized(&self.values, self.height, self.width, self.class, Normalization::Max1)
            .expect("own dimensions are consistent")
    }

    pub fn to_sum1(&self) -> Heatmap {
        Self::normalized(&self.values, self.height, self.width, self.class, Normalization::Sum1)
            .expect("own dimensions are consistent")
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn display_values(&self) -> Vec<f32> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        self.values
            .iter()
            .map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
            .collect()
    }

    /// 8-bit grayscale PGM, max-normalized for display.
    pub fn to_pgm(&self) -> Vec<u8> {
        imageio::encode_pgm(&self.display_values(), self.width, self.height)
            .expect("dimensions match")
    }

    /// Color PPM through [`imageio::colormap`], max-normalized for display.
    pub fn to_color_ppm(&self) -> Vec<u8> {
        let cm = imageio::colormap();
        let rgb: Vec<u8> = self
            .display_values()
            .iter()
            .flat_map(|&v| cm[(v.clamp(0.0, 1.0) * 255.0).round() as usize])
            .collect();
        imageio::encode_ppm_rgb(&rgb, self.width, self.height).expect("dimensions match")
    }

    /// Half-and-half blend of the colormapped heatmap over `image`.
    pub fn overlay(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != self.height || s[2] != self.width {
            return Err(Error::ResolutionMismatch((s[1], s[2]), (self.height, self.width)));
        }
        let cm = imageio::colormap();
        let plane = self.height * self.width;
        let mut out = image.clone();
        let d = out.data_mut();
        for (i, &v) in self.display_values().iter().enumerate() {
            let rgb = cm[(v.clamp(0.0, 1.0) * 255.0).round() as usize];
            for c in 0..3 {
                d[c * plane + i] = 0.5 * d[c * plane + i] + 0.5 * rgb[c] as f32 / 255.0;
            }
        }
        Ok(out)
    }
}
