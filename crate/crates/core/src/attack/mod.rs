//! Adversarial patches that also steer the Grad-CAM heatmap.
//!
//! All optimizers share one update rule, [`pgd_step`]: a signed gradient
//! step followed by clipping to the allowed pixel range. The losses live in
//! [`Objective`]; the heatmap term is differentiated through the Grad-CAM
//! gradient graph.

mod objective;
mod optim;

pub use objective::{Evaluation, Objective, ObjectiveFunction, ObjectiveKind};
pub use optim::{
    attack_full_image, attack_nontargeted, attack_targeted, attack_uniform, attack_universal, run_attack,
    UniversalResult,
};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::model::default_patch_side;
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, width: usize, height: usize) -> Self {
        Rect {
            x0,
            y0,
            width,
            height,
        }
    }

    /// Top-left square covering ~8.2% of a `size x size` image.
    pub fn default_patch(size: usize) -> Self {
        let p = default_patch_side(size);
        Rect::new(0, 0, p, p)
    }

    /// Top-right square of the same size as [`default_patch`](Self::default_patch).
    pub fn default_decoy(size: usize) -> Self {
        let p = default_patch_side(size);
        Rect::new(size - p, 0, p, p)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Rect::new(0, 0, width, height)
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x0 + other.width
            && other.x0 < self.x0 + self.width
            && self.y0 < other.y0 + other.height
            && other.y0 < self.y0 + self.height
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 + self.width > width || self.y0 + self.height > height {
            return Err(Error::RectOutOfBounds {
                rect: (self.x0, self.y0, self.width, self.height),
                width,
                height,
            });
        }
        Ok(())
    }
}

/// Patch geometry plus its pixels `z` (`C x height x width`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    pub rect: Rect,
    pub pixels: Tensor<f32>,
}

impl PatchSpec {
    pub fn new(rect: Rect, pixels: Tensor<f32>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[1] != rect.height || s[2] != rect.width {
            return Err(Error::InvalidArgument(format!(
                "patch pixels {s:?} do not match a {}x{} rectangle",
                rect.height, rect.width
            )));
        }
        Ok(PatchSpec { rect, pixels })
    }

    /// Writes `<stem>.ppm` and `<stem>.json`.
    pub fn save(&self, stem: &Path, sidecar: &PatchSidecar) -> Result<()> {
        imageio::write_ppm(&stem.with_extension("ppm"), &self.pixels)?;
        imageio::write_atomic(&stem.with_extension("json"), &serde_json::to_vec_pretty(sidecar)?)
    }

    /// Reads a patch written by [`save`](Self::save).
    pub fn load(stem: &Path) -> Result<(Self, PatchSidecar)> {
        let json_path = stem.with_extension("json");
        let raw = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: PatchSidecar = serde_json::from_slice(&raw)?;
        let pixels = imageio::read_ppm(&stem.with_extension("ppm"))?;
        let rect = Rect::new(sidecar.x0, sidecar.y0, sidecar.w, sidecar.h);
        Ok((PatchSpec::new(rect, pixels)?, sidecar))
    }
}

/// JSON written next to a patch image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub target: Option<usize>,
    pub seed: u64,
    pub cfg: AttackConfig,
}

impl PatchSidecar {
    pub fn new(rect: Rect, target: Option<usize>, cfg: &AttackConfig) -> Self {
        PatchSidecar {
            x0: rect.x0,
            y0: rect.y0,
            w: rect.width,
            h: rect.height,
            target,
            seed: cfg.seed,
            cfg: cfg.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Targeted,
    Nontargeted,
    Uniform,
    FullImage,
    Universal,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Targeted => "targeted",
            Mode::Nontargeted => "nontargeted",
            Mode::Uniform => "uniform",
            Mode::FullImage => "full-image",
            Mode::Universal => "universal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    /// Uniform over every class except the clean prediction.
    StepRnd,
    LeastLikely,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub eta: f64,
    /// Optimizer steps; epochs for the universal attack.
    pub iterations: usize,
    pub target: TargetPolicy,
    /// L-infinity budget, full-image mode only.
    pub epsilon: Option<f64>,
    pub patch: Rect,
    /// Region whose heatmap mass is encouraged, uniform mode only.
    pub decoy: Option<Rect>,
    pub seed: u64,
    /// Treat the Grad-CAM channel weights as constants.
    pub stop_alpha: bool,
    /// Images per step, universal mode only.
    pub batch_size: usize,
}

impl AttackConfig {
    /// Default hyperparameters of each mode for a square image of side
    /// `image_size`.
    pub fn preset(mode: Mode, image_size: usize) -> Self {
        let base = AttackConfig {
            mode,
            lambda: 0.05,
            eta: 0.005,
            iterations: 750,
            target: TargetPolicy::StepRnd,
            epsilon: None,
            patch: Rect::default_patch(image_size),
            decoy: None,
            seed: 0,
            stop_alpha: false,
            batch_size: 32,
        };
        match mode {
            Mode::Targeted => base,
            Mode::Nontargeted => AttackConfig {
                lambda: 0.001,
                ..base
            },
            Mode::Uniform => AttackConfig {
                lambda: 0.75,
                eta: 0.007,
                iterations: 1000,
                decoy: Some(Rect::default_decoy(image_size)),
                ..base
            },
            Mode::FullImage => AttackConfig {
                lambda: 0.05,
                eta: 0.001,
                iterations: 150,
                epsilon: Some(8.0 / 255.0),
                patch: Rect::full(image_size, image_size),
                ..base
            },
            Mode::Universal => AttackConfig {
                lambda: 0.09,
                eta: 0.05,
                iterations: 10,
                target: TargetPolicy::Fixed(0),
                ..base
            },
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be > 0", self.eta));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        match (self.mode, self.epsilon) {
            (Mode::FullImage, None) => return bad("full-image mode needs epsilon".into()),
            (Mode::FullImage, Some(e)) if !(e > 0.0 && e <= 1.0) => {
                return bad(format!("epsilon {e} must be in (0, 1]"))
            }
            _ => {}
        }
        if self.mode != Mode::FullImage {
            self.patch.check_within(width, height)?;
            if self.patch.area() == 0 {
                return bad("patch rectangle is empty".into());
            }
        }
        if self.mode == Mode::Uniform {
            match self.decoy {
                None => return bad("uniform mode needs a decoy rectangle".into()),
                Some(d) => {
                    d.check_within(width, height)?;
                    if d.intersects(&self.patch) {
                        return bad(format!("decoy {d:?} overlaps the patch {:?}", self.patch));
                    }
                }
            }
        }
        if self.mode == Mode::Universal {
            if self.batch_size == 0 {
                return bad("batch size must be at least 1".into());
            }
            if !matches!(self.target, TargetPolicy::Fixed(_)) {
                return bad("the universal attack needs a fixed target class".into());
            }
        }
        Ok(())
    }
}

/// One optimizer step's loss terms, recorded before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub total: f64,
    pub ce: f64,
    pub heat: f64,
    /// Current top-1 class; absent for batch steps of the universal attack.
    pub top1: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub mode: Mode,
    pub original_class: usize,
    /// Absent for the non-targeted attack.
    pub target_class: Option<usize>,
    pub final_class: usize,
    pub success: bool,
    /// Final patch (patch modes).
    pub patch: Option<PatchSpec>,
    /// The final attacked image.
    pub adversarial: Tensor<f32>,
    pub trace: Vec<TraceEntry>,
}

/// Serializable view of an [`AttackResult`] without pixel data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub mode: Mode,
    pub original_class: usize,
    pub target_class: Option<usize>,
    pub final_class: usize,
    pub success: bool,
    pub patch: Option<Rect>,
    pub trace: Vec<TraceEntry>,
}

impl AttackResult {
    pub fn summary(&self) -> AttackSummary {
        AttackSummary {
            mode: self.mode,
            original_class: self.original_class,
            target_class: self.target_class,
            final_class: self.final_class,
            success: self.success,
            patch: self.patch.as_ref().map(|p| p.rect),
            trace: self.trace.clone(),
        }
    }
}

/// `x * (1 - m) + z * m` for the rectangular mask of `patch`.
pub fn compose(x: &Tensor<f32>, patch: &PatchSpec) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 3 || patch.pixels.shape()[0] != s[0] {
        return Err(Error::InvalidArgument(format!(
            "cannot paste {:?} into {s:?}",
            patch.pixels.shape()
        )));
    }
    let (h, w) = (s[1], s[2]);
    let r = patch.rect;
    r.check_within(w, h)?;
    let mut out = x.clone();
    let src = patch.pixels.data();
    let dst = out.data_mut();
    for c in 0..s[0] {
        for y in 0..r.height {
            let d = (c * h + r.y0 + y) * w + r.x0;
            let p = (c * r.height + y) * r.width;
            dst[d..d + r.width].copy_from_slice(&src[p..p + r.width]);
        }
    }
    Ok(out)
}

/// Clip range of a PGD step.
#[derive(Clone, Copy, Debug)]
pub enum Bounds<'a> {
    Range(f32, f32),
    PerElement { lower: &'a [f32], upper: &'a [f32] },
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(z - eta * sign(grad), lower, upper)` with `sign(0) = 0`.
pub fn pgd_step(z: &Tensor<f32>, grad: &Tensor<f32>, eta: f32, bounds: Bounds) -> Tensor<f32> {
    debug_assert_eq!(z.shape(), grad.shape());
    let mut out = z.clone();
    for (i, (v, &g)) in out.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let (lo, hi) = match bounds {
            Bounds::Range(lo, hi) => (lo, hi),
            Bounds::PerElement { lower, upper } => (lower[i], upper[i]),
        };
        *v = (*v - eta * sign(g)).clamp(lo, hi);
    }
    out
}

/// Chooses the attack's target class.
pub fn select_target(logits: &[f32], policy: TargetPolicy, original: usize, rng: &mut impl Rng) -> Result<usize> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    match policy {
        TargetPolicy::StepRnd => {
            let r = rng.gen_range(0..k - 1);
            Ok(if r >= original { r + 1 } else { r })
        }
        TargetPolicy::LeastLikely => {
            let t = Tensor::from_parts(vec![k], logits.to_vec());
            Ok(t.argmin())
        }
        TargetPolicy::Fixed(t) => {
            if t >= k {
                return Err(Error::InvalidClass {
                    class: t,
                    num_classes: k,
                });
            }
            if t == original {
                return Err(Error::InvalidArgument(format!(
                    "target class {t} equals the original prediction"
                )));
            }
            Ok(t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker() -> Tensor<f32> {
        let data = (0..3 * 64 * 64).map(|i| ((i % 64 + i / 64) % 2) as f32).collect();
        Tensor::new(&[3, 64, 64], data).unwrap()
    }

    #[test]
    fn compose_replaces_only_the_rectangle() {
        let x = checker();
        let p = PatchSpec::new(Rect::default_patch(64), Tensor::full(&[3, 18, 18], 0.5)).unwrap();
        let xt = compose(&x, &p).unwrap();
        for c in 0..3 {
            for y in 0..64 {
                for xx in 0..64 {
                    let i = (c * 64 + y) * 64 + xx;
                    if y < 18 && xx < 18 {
                        assert_eq!(xt.data()[i], 0.5);
                    } else {
                        assert_eq!(xt.data()[i].to_bits(), x.data()[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn compose_edge_cases() {
        let x = checker();
        let empty = PatchSpec::new(Rect::new(5, 5, 0, 0), Tensor::zeros(&[3, 0, 0])).unwrap();
        assert_eq!(compose(&x, &empty).unwrap(), x);
        let z = Tensor::full(&[3, 64, 64], 0.25);
        let full = PatchSpec::new(Rect::full(64, 64), z.clone()).unwrap();
        assert_eq!(compose(&x, &full).unwrap(), z);
        let out = PatchSpec::new(Rect::new(60, 0, 8, 8), Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(compose(&x, &out).is_err());
    }

    #[test]
    fn pgd_step_examples() {
        let z = Tensor::new(&[3], vec![0.5f32, 0.001, 0.3]).unwrap();
        let g = Tensor::new(&[3], vec![3.7f32, 1.0, 0.0]).unwrap();
        let out = pgd_step(&z, &g, 0.005, Bounds::Range(0.0, 1.0));
        assert_eq!(out.data(), &[0.495, 0.0, 0.3]);
    }

    #[test]
    fn target_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(select_target(&[0.0, 1.0], TargetPolicy::StepRnd, 0, &mut rng).unwrap(), 1);
        }
        let ll = select_target(&[5.0, 1.0, -2.0, 0.0], TargetPolicy::LeastLikely, 0, &mut rng).unwrap();
        assert_eq!(ll, 2);
        assert!(select_target(&[0.0, 1.0], TargetPolicy::Fixed(0), 0, &mut rng).is_err());
        let logits = vec![0.0f32; 1000];
        let a = select_target(&logits, TargetPolicy::StepRnd, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = select_target(&logits, TargetPolicy::StepRnd, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, 3);
    }

    #[test]
    fn presets_validate() {
        for mode in [Mode::Targeted, Mode::Nontargeted, Mode::Uniform, Mode::FullImage, Mode::Universal] {
            AttackConfig::preset(mode, 64).validate(64, 64).unwrap();
        }
        let mut cfg = AttackConfig::preset(Mode::Uniform, 64);
        cfg.decoy = Some(Rect::new(10, 10, 18, 18));
        assert!(cfg.validate(64, 64).is_err());
        let json = serde_json::to_string(&AttackConfig::preset(Mode::Universal, 64)).unwrap();
        assert!(json.contains("\"fixed\":0"), "{json}");
    }

    #[test]
    fn default_geometry() {
        assert_eq!(Rect::default_patch(64), Rect::new(0, 0, 18, 18));
        assert_eq!(Rect::default_decoy(64), Rect::new(46, 0, 18, 18));
        assert!(!Rect::default_patch(64).intersects(&Rect::default_decoy(64)));
    }
}
