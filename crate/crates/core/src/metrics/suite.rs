use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{energy_ratio, histogram_intersection, localization, median, LOCALIZATION_THRESHOLD};
use crate::attack::{compose, run_attack, AttackConfig, Mode, PatchSpec};
use crate::error::{Error, Result};
use crate::interpret::{gradcam, occlusion_map, Heatmap, OcclusionConfig};
use crate::model::{LabeledImage, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum SuiteAttack {
    None,
    /// Run this attack on every image. Image `i` uses seed `cfg.seed + i`.
    PerImage(AttackConfig),
    /// Paste a fixed patch; images labeled `target` are skipped.
    Universal { patch: PatchSpec, target: usize },
}

impl SuiteAttack {
    fn describe(&self) -> String {
        match self {
            SuiteAttack::None => "none".into(),
            SuiteAttack::PerImage(cfg) => format!("{} (lambda {})", cfg.mode.name(), cfg.lambda),
            SuiteAttack::Universal { target, .. } => format!("universal (target {target})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpretMethod {
    Gradcam,
    Occlusion(OcclusionConfig),
}

impl InterpretMethod {
    fn name(&self) -> &'static str {
        match self {
            InterpretMethod::Gradcam => "gradcam",
            InterpretMethod::Occlusion(_) => "occlusion",
        }
    }

    fn heatmap(&self, model: &Model, image: &Tensor<f32>, class: usize) -> Result<Heatmap> {
        match self {
            InterpretMethod::Gradcam => gradcam(model, image, class),
            InterpretMethod::Occlusion(cfg) => Ok(occlusion_map(model, image, class, cfg)?.heatmap),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    /// Row label in the text table.
    pub label: String,
    pub attack: SuiteAttack,
    pub method: InterpretMethod,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub label: usize,
    pub clean_class: usize,
    pub final_class: Option<usize>,
    pub target_class: Option<usize>,
    pub success: Option<bool>,
    /// Class whose heatmap the metrics use.
    pub heatmap_class: Option<usize>,
    pub energy_ratio: Option<f64>,
    /// Heatmap mass in the decoy rectangle (uniform mode).
    pub decoy_energy: Option<f64>,
    /// Against the clean image's heatmap of the same class.
    pub histogram_intersection: Option<f64>,
    pub iou: Option<f64>,
    pub localization_error: Option<bool>,
    pub degenerate: Option<bool>,
    /// Set when this image could not be processed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub images: usize,
    pub failed: usize,
    pub degenerate: usize,
    /// Fraction whose final prediction equals the label.
    pub accuracy: f64,
    /// Fraction of successful attacks; absent without a targeted attack.
    pub target_accuracy: Option<f64>,
    /// Fraction whose prediction left the clean class (non-targeted mode).
    pub fooling_rate: Option<f64>,
    pub mean_energy_ratio: Option<f64>,
    pub median_energy_ratio: Option<f64>,
    pub mean_decoy_energy: Option<f64>,
    pub mean_histogram_intersection: Option<f64>,
    pub localization_error_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub attack: String,
    pub method: String,
    pub records: Vec<ImageRecord>,
    pub aggregates: Aggregates,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Aggregates {
    /// Recomputes every aggregate from per-image records. Failed images
    /// are counted but excluded; degenerate heatmaps are excluded from the
    /// energy and intersection statistics.
    pub fn from_records(records: &[ImageRecord], mode: Option<Mode>) -> Self {
        let ok: Vec<&ImageRecord> = records.iter().filter(|r| r.error.is_none()).collect();
        let n = ok.len().max(1) as f64;
        let live: Vec<&&ImageRecord> = ok.iter().filter(|r| r.degenerate != Some(true)).collect();
        let energies: Vec<f64> = live.iter().filter_map(|r| r.energy_ratio).collect();
        let decoys: Vec<f64> = live.iter().filter_map(|r| r.decoy_energy).collect();
        let hists: Vec<f64> = live.iter().filter_map(|r| r.histogram_intersection).collect();
        let rate = |f: &dyn Fn(&ImageRecord) -> bool| ok.iter().filter(|r| f(r)).count() as f64 / n;
        let targeted = matches!(
            mode,
            Some(Mode::Targeted | Mode::Uniform | Mode::FullImage | Mode::Universal)
        );
        Aggregates {
            images: records.len(),
            failed: records.len() - ok.len(),
            degenerate: ok.iter().filter(|r| r.degenerate == Some(true)).count(),
            accuracy: rate(&|r| r.final_class == Some(r.label)),
            target_accuracy: targeted.then(|| rate(&|r| r.success == Some(true))),
            fooling_rate: (mode == Some(Mode::Nontargeted)).then(|| rate(&|r| r.success == Some(true))),
            mean_energy_ratio: mean(&energies),
            median_energy_ratio: median(&energies),
            mean_decoy_energy: mean(&decoys),
            mean_histogram_intersection: mean(&hists),
            localization_error_rate: rate(&|r| r.localization_error == Some(true)),
        }
    }
}

struct Outcome {
    adversarial: Tensor<f32>,
    clean_class: usize,
    final_class: usize,
    target: Option<usize>,
    success: Option<bool>,
    patch: Option<crate::attack::Rect>,
}

fn evaluate_one(model: &Model, index: usize, img: &LabeledImage, cfg: &SuiteConfig) -> Result<ImageRecord> {
    let clean_class = model.predict(&img.pixels)?;
    let outcome = match &cfg.attack {
        SuiteAttack::None => Outcome {
            adversarial: img.pixels.clone(),
            clean_class,
            final_class: clean_class,
            target: None,
            success: None,
            patch: None,
        },
        SuiteAttack::PerImage(acfg) => {
            let mut acfg = acfg.clone();
            acfg.seed = acfg.seed.wrapping_add(index as u64);
            let r = run_attack(model, &img.pixels, &acfg)?;
            Outcome {
                clean_class: r.original_class,
                final_class: r.final_class,
                target: r.target_class,
                success: Some(r.success),
                patch: r.patch.as_ref().map(|p| p.rect),
                adversarial: r.adversarial,
            }
        }
        SuiteAttack::Universal { patch, target } => {
            let adv = compose(&img.pixels, patch)?;
            let final_class = model.predict(&adv)?;
            Outcome {
                adversarial: adv,
                clean_class,
                final_class,
                target: Some(*target),
                success: Some(final_class == *target),
                patch: Some(patch.rect),
            }
        }
    };
    let mode = match &cfg.attack {
        SuiteAttack::PerImage(a) => Some(a.mode),
        SuiteAttack::Universal { .. } => Some(Mode::Universal),
        SuiteAttack::None => None,
    };
    // target class for targeted patches, current top-1 for non-targeted,
    // the clean prediction for full-image attacks and clean images
    let class = match mode {
        Some(Mode::Targeted | Mode::Uniform | Mode::Universal) => outcome.target.expect("targeted mode"),
        Some(Mode::Nontargeted) => outcome.final_class,
        Some(Mode::FullImage) | None => outcome.clean_class,
    };
    let attacked = cfg.method.heatmap(model, &outcome.adversarial, class)?;
    let clean = if outcome.adversarial == img.pixels {
        attacked.clone()
    } else {
        cfg.method.heatmap(model, &img.pixels, class)?
    };
    let loc = localization(&attacked, &img.gt_box, LOCALIZATION_THRESHOLD);
    let decoy = match &cfg.attack {
        SuiteAttack::PerImage(a) if a.mode == Mode::Uniform => a.decoy,
        _ => None,
    };
    Ok(ImageRecord {
        index,
        label: img.label,
        clean_class: outcome.clean_class,
        final_class: Some(outcome.final_class),
        target_class: outcome.target,
        success: outcome.success,
        heatmap_class: Some(class),
        energy_ratio: outcome.patch.map(|r| energy_ratio(&attacked, r)).transpose()?,
        decoy_energy: decoy.map(|r| energy_ratio(&attacked, r)).transpose()?,
        histogram_intersection: Some(histogram_intersection(&attacked, &clean)?),
        iou: Some(loc.iou),
        localization_error: Some(loc.error),
        degenerate: Some(attacked.degenerate),
        error: None,
    })
}

/// Attacks (optionally) and interprets every image, then aggregates.
///
/// Per-image failures are recorded in the report rather than aborting.
pub fn evaluate_suite(model: &Model, images: &[LabeledImage], cfg: &SuiteConfig) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let selected: Vec<(usize, &LabeledImage)> = images
        .iter()
        .enumerate()
        .filter(|(_, img)| match &cfg.attack {
            SuiteAttack::Universal { target, .. } => img.label != *target,
            _ => true,
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let records: Vec<ImageRecord> = pool.install(|| {
        selected
            .par_iter()
            .map(|&(i, img)| {
                evaluate_one(model, i, img, cfg).unwrap_or_else(|e| ImageRecord {
                    index: i,
                    label: img.label,
                    clean_class: usize::MAX,
                    final_class: None,
                    target_class: None,
                    success: None,
                    heatmap_class: None,
                    energy_ratio: None,
                    decoy_energy: None,
                    histogram_intersection: None,
                    iou: None,
                    localization_error: None,
                    degenerate: None,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    });
    let mode = match &cfg.attack {
        SuiteAttack::PerImage(a) => Some(a.mode),
        SuiteAttack::Universal { .. } => Some(Mode::Universal),
        SuiteAttack::None => None,
    };
    Ok(MetricsReport {
        label: cfg.label.clone(),
        attack: cfg.attack.describe(),
        method: cfg.method.name().into(),
        aggregates: Aggregates::from_records(&records, mode),
        records,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

impl MetricsReport {
    /// Aligned text table, one row per report.
    pub fn table(reports: &[&MetricsReport]) -> String {
        let header = [
            "Method",
            "Interp",
            "Acc (%)",
            "Target Acc (%)",
            "Energy Ratio (%)",
            "Median ER (%)",
            "Hist. Int.",
            "Loc. Err (%)",
            "N",
        ];
        let rows: Vec<[String; 9]> = reports
            .iter()
            .map(|r| {
                let a = &r.aggregates;
                [
                    r.label.clone(),
                    r.method.clone(),
                    pct(Some(a.accuracy)),
                    pct(a.target_accuracy.or(a.fooling_rate)),
                    pct(a.mean_energy_ratio),
                    pct(a.median_energy_ratio),
                    a.mean_histogram_intersection.map_or_else(|| "-".into(), |v| format!("{v:.3}")),
                    pct(Some(a.localization_error_rate)),
                    (a.images - a.failed).to_string(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: Vec<&str>| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).expect("write to String");
        };
        line(&mut out, header.to_vec());
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, rule.iter().map(String::as_str).collect());
        for row in &rows {
            line(&mut out, row.iter().map(String::as_str).collect());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_default_model, gen_dataset, DatasetConfig};

    fn data() -> (Model, Vec<LabeledImage>) {
        let m = build_default_model(4, 8).unwrap();
        (m, gen_dataset(&DatasetConfig::new(6, 2)).unwrap().images)
    }

    #[test]
    fn clean_suite_has_no_target_accuracy() {
        let (m, imgs) = data();
        let cfg = SuiteConfig {
            label: "clean".into(),
            attack: SuiteAttack::None,
            method: InterpretMethod::Gradcam,
            jobs: 1,
        };
        let r = evaluate_suite(&m, &imgs, &cfg).unwrap();
        assert!(r.aggregates.target_accuracy.is_none());
        assert_eq!(r.records.len(), 6);
        let clean_errors = imgs
            .iter()
            .filter(|i| localization(&gradcam(&m, &i.pixels, m.predict(&i.pixels).unwrap()).unwrap(), &i.gt_box, 0.15).error)
            .count();
        assert_eq!(r.aggregates.localization_error_rate, clean_errors as f64 / 6.0);
        for rec in &r.records {
            if rec.degenerate == Some(false) {
                assert!((rec.histogram_intersection.unwrap() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn jobs_do_not_change_results() {
        let (m, imgs) = data();
        let mut acfg = AttackConfig::preset(Mode::Targeted, 64);
        acfg.iterations = 3;
        let mut cfg = SuiteConfig {
            label: "t".into(),
            attack: SuiteAttack::PerImage(acfg),
            method: InterpretMethod::Gradcam,
            jobs: 1,
        };
        let a = evaluate_suite(&m, &imgs, &cfg).unwrap();
        cfg.jobs = 3;
        let b = evaluate_suite(&m, &imgs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(Aggregates::from_records(&a.records, Some(Mode::Targeted)), a.aggregates);
        let table = MetricsReport::table(&[&a]);
        assert_eq!(table.lines().count(), 3);
    }
}
