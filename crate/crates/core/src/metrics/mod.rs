//! Heatmap metrics and the batch evaluation sweep.

mod suite;

pub use suite::{evaluate_suite, Aggregates, ImageRecord, InterpretMethod, MetricsReport, SuiteAttack, SuiteConfig};

use serde::{Deserialize, Serialize};

use crate::attack::Rect;
use crate::error::{Error, Result};
use crate::interpret::Heatmap;
use crate::model::BBox;

/// Fraction of a sum-normalized heatmap's mass inside `rect`. Degenerate
/// maps give 0.
pub fn energy_ratio(heatmap: &Heatmap, rect: Rect) -> Result<f64> {
    rect.check_within(heatmap.width, heatmap.height)?;
    if heatmap.degenerate {
        return Ok(0.0);
    }
    let mut e = 0.0;
    for y in rect.y0..rect.y0 + rect.height {
        let row = y * heatmap.width;
        e += heatmap.values[row + rect.x0..row + rect.x0 + rect.width].iter().sum::<f64>();
    }
    Ok(e)
}

/// `sum(min(h1, h2))` of two sum-normalized maps; 0 if either is degenerate.
pub fn histogram_intersection(h1: &Heatmap, h2: &Heatmap) -> Result<f64> {
    if (h1.height, h1.width) != (h2.height, h2.width) {
        return Err(Error::ResolutionMismatch((h1.height, h1.width), (h2.height, h2.width)));
    }
    if h1.degenerate || h2.degenerate {
        return Ok(0.0);
    }
    Ok(h1.values.iter().zip(&h2.values).map(|(a, b)| a.min(*b)).sum())
}

pub const LOCALIZATION_THRESHOLD: f64 = 0.15;
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Tight box of pixels above the threshold; `None` for degenerate maps.
    pub pred_box: Option<BBox>,
    pub iou: f64,
    /// `iou < 0.5`.
    pub error: bool,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersect(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Boxes the pixels whose max-normalized value exceeds `threshold` and
/// scores the box against `gt_box`.
pub fn localization(heatmap: &Heatmap, gt_box: &BBox, threshold: f64) -> Localization {
    if heatmap.degenerate {
        return Localization {
            pred_box: None,
            iou: 0.0,
            error: true,
        };
    }
    let m = heatmap.to_max1();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) > threshold {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let pred = BBox { x0, y0, x1, y1 };
    let v = iou(&pred, gt_box);
    Localization {
        pred_box: Some(pred),
        iou: v,
        error: v < IOU_THRESHOLD,
    }
}

/// Median of a slice (mean of the middle pair for even lengths); `None`
/// when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
