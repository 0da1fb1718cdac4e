use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Heatmap;
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub size: usize,
    pub stride: usize,
    /// Pixel value of the occluding square (0 is a black box).
    pub fill: f32,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            size: 11,
            stride: 4,
            fill: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMap {
    /// Per-pixel average drop, sum-normalized.
    pub heatmap: Heatmap,
    /// `max(0, y_c(clean) - y_c(occluded))` per placement, row-major over
    /// the `grid_height x grid_width` placement grid.
    pub drops: Vec<f64>,
    pub grid_height: usize,
    pub grid_width: usize,
}

fn placements(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..=extent - size).step_by(stride).collect()
}

/// Slides a `size x size` fill square over the image and records how much
/// the score of `class` drops at each placement.
///
/// Placements are evaluated in parallel on the current rayon pool; the
/// result does not depend on the number of threads.
pub fn occlusion_map(model: &Model, image: &Tensor<f32>, class: usize, cfg: &OcclusionConfig) -> Result<OcclusionMap> {
    model.check_image(image)?;
    model.check_class(class)?;
    let [channels, h, w] = model.input_shape;
    if cfg.size == 0 || cfg.size > h || cfg.size > w {
        return Err(Error::InvalidArgument(format!(
            "occluder size {} must be in 1..={}",
            cfg.size,
            h.min(w)
        )));
    }
    if cfg.stride == 0 {
        return Err(Error::InvalidArgument("occluder stride must be at least 1".into()));
    }
    let ys = placements(h, cfg.size, cfg.stride);
    let xs = placements(w, cfg.size, cfg.stride);
    let grid: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();

    let build = || -> Result<(Graph<f32>, crate::diff::NodeId)> {
        let mut g = Graph::new();
        let x = g.input("x", image.shape())?;
        let nodes = model.build(&mut g, x)?;
        let score = g.pick(nodes.logits, class)?;
        Ok((g, score))
    };
    let (mut g0, score0) = build()?;
    let clean = g0.eval(&[("x", image)], score0)?.item() as f64;

    let plane = h * w;
    let scores: Vec<Result<f64>> = grid
        .par_iter()
        .map_init(build, |state, &(top, left)| {
            let (g, score) = state.as_mut().map_err(|e| Error::InvalidModel(e.to_string()))?;
            let mut occluded = image.clone();
            let d = occluded.data_mut();
            for c in 0..channels {
                for y in top..top + cfg.size {
                    let row = c * plane + y * w + left;
                    d[row..row + cfg.size].fill(cfg.fill);
                }
            }
            Ok(g.eval(&[("x", &occluded)], *score)?.item() as f64)
        })
        .collect();

    let mut drops = Vec::with_capacity(grid.len());
    let mut sum = vec![0.0f64; plane];
    let mut count = vec![0u32; plane];
    for (&(top, left), s) in grid.iter().zip(scores) {
        let drop = (clean - s?).max(0.0);
        drops.push(drop);
        for y in top..top + cfg.size {
            for x in left..left + cfg.size {
                sum[y * w + x] += drop;
                count[y * w + x] += 1;
            }
        }
    }
    let avg: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok(OcclusionMap {
        heatmap: Heatmap::from_raw_sum1(&avg, h, w, class)?,
        drops,
        grid_height: ys.len(),
        grid_width: xs.len(),
    })
}
