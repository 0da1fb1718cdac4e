use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    compose, pgd_step, select_target, AttackConfig, AttackResult, Bounds, Mode, Objective, ObjectiveKind,
    PatchSpec, TargetPolicy, TraceEntry,
};
use crate::error::{Error, Result};
use crate::model::{LabeledImage, Model};
use crate::tensor::Tensor;

fn check_mode(cfg: &AttackConfig, expected: Mode) -> Result<()> {
    if cfg.mode != expected {
        return Err(Error::InvalidArgument(format!(
            "config is for mode `{}`, expected `{}`",
            cfg.mode.name(),
            expected.name()
        )));
    }
    Ok(())
}

fn random_patch(rng: &mut ChaCha8Rng, channels: usize, cfg: &AttackConfig) -> Tensor<f32> {
    let (h, w) = (cfg.patch.height, cfg.patch.width);
    let data = (0..channels * h * w).map(|_| rng.gen::<f32>()).collect();
    Tensor::from_parts(vec![channels, h, w], data)
}

fn entry(ev: &super::Evaluation, step: usize) -> Result<TraceEntry> {
    if !(ev.total.is_finite() && ev.ce.is_finite() && ev.heat.is_finite()) {
        return Err(Error::Divergence { epoch: 0, step });
    }
    Ok(TraceEntry {
        total: ev.total,
        ce: ev.ce,
        heat: ev.heat,
        top1: Some(ev.top1),
    })
}

struct Prepared {
    original: usize,
    logits: Tensor<f32>,
    rng: ChaCha8Rng,
}

fn prepare(model: &Model, image: &Tensor<f32>, cfg: &AttackConfig) -> Result<Prepared> {
    model.check_image(image)?;
    let [_, h, w] = model.input_shape;
    cfg.validate(w, h)?;
    let logits = model.logits(image)?;
    Ok(Prepared {
        original: logits.argmax(),
        logits,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

/// Shared optimizer of the patch modes: random init, then `iterations`
/// PGD-sign steps on the objective within `[0, 1]`.
fn optimize_patch(
    model: &Model,
    image: &Tensor<f32>,
    cfg: &AttackConfig,
    kind: ObjectiveKind,
    mut rng: ChaCha8Rng,
) -> Result<(PatchSpec, Vec<TraceEntry>, usize)> {
    let mut z = random_patch(&mut rng, model.input_shape[0], cfg);
    let mut obj = Objective::<f32>::new(model, cfg.patch, kind, cfg.lambda, cfg.stop_alpha)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let ev = obj.evaluate(Some(image), &z)?;
        trace.push(entry(&ev, step)?);
        let grad = obj.gradient()?;
        z = pgd_step(&z, &grad, cfg.eta as f32, Bounds::Range(0.0, 1.0));
    }
    let final_class = obj.evaluate(Some(image), &z)?.top1;
    Ok((PatchSpec::new(cfg.patch, z)?, trace, final_class))
}

fn patch_result(
    image: &Tensor<f32>,
    mode: Mode,
    original: usize,
    target: Option<usize>,
    (patch, trace, final_class): (PatchSpec, Vec<TraceEntry>, usize),
) -> Result<AttackResult> {
    let success = match target {
        Some(t) => final_class == t,
        None => final_class != original,
    };
    Ok(AttackResult {
        mode,
        original_class: original,
        target_class: target,
        final_class,
        success,
        adversarial: compose(image, &patch)?,
        patch: Some(patch),
        trace,
    })
}

/// Targeted patch whose Grad-CAM for the target avoids the patch.
pub fn attack_targeted(model: &Model, image: &Tensor<f32>, cfg: &AttackConfig) -> Result<AttackResult> {
    check_mode(cfg, Mode::Targeted)?;
    let mut p = prepare(model, image, cfg)?;
    let target = select_target(p.logits.data(), cfg.target, p.original, &mut p.rng)?;
    let out = optimize_patch(model, image, cfg, ObjectiveKind::Targeted { target }, p.rng)?;
    patch_result(image, Mode::Targeted, p.original, Some(target), out)
}

/// Non-targeted patch: pushes the clean class's cross-entropy above chance
/// level while hiding the patch from the current top-1 class's Grad-CAM.
pub fn attack_nontargeted(model: &Model, image: &Tensor<f32>, cfg: &AttackConfig) -> Result<AttackResult> {
    check_mode(cfg, Mode::Nontargeted)?;
    let p = prepare(model, image, cfg)?;
    let kind = ObjectiveKind::Nontargeted { original: p.original };
    let out = optimize_patch(model, image, cfg, kind, p.rng)?;
    patch_result(image, Mode::Nontargeted, p.original, None, out)
}

/// Targeted patch that pulls Grad-CAM mass into the decoy region.
pub fn attack_uniform(model: &Model, image: &Tensor<f32>, cfg: &AttackConfig) -> Result<AttackResult> {
    check_mode(cfg, Mode::Uniform)?;
    let mut p = prepare(model, image, cfg)?;
    let decoy = cfg.decoy.expect("validated");
    let target = select_target(p.logits.data(), cfg.target, p.original, &mut p.rng)?;
    let out = optimize_patch(model, image, cfg, ObjectiveKind::Uniform { target, decoy }, p.rng)?;
    patch_result(image, Mode::Uniform, p.original, Some(target), out)
}

/// Epsilon-bounded perturbation of the whole image towards a target while
/// suppressing the unnormalized Grad-CAM of the original class.
pub fn attack_full_image(model: &Model, image: &Tensor<f32>, cfg: &AttackConfig) -> Result<AttackResult> {
    check_mode(cfg, Mode::FullImage)?;
    let mut p = prepare(model, image, cfg)?;
    let target = select_target(p.logits.data(), cfg.target, p.original, &mut p.rng)?;
    let eps = cfg.epsilon.expect("validated") as f32;
    let lower: Vec<f32> = image.data().iter().map(|&v| (v - eps).max(0.0)).collect();
    let upper: Vec<f32> = image.data().iter().map(|&v| (v + eps).min(1.0)).collect();
    let kind = ObjectiveKind::FullImage {
        target,
        original: p.original,
    };
    let mut obj = Objective::<f32>::new(model, cfg.patch, kind, cfg.lambda, cfg.stop_alpha)?;
    let mut z = image.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let ev = obj.evaluate(None, &z)?;
        trace.push(entry(&ev, step)?);
        let grad = obj.gradient()?;
        z = pgd_step(
            &z,
            &grad,
            cfg.eta as f32,
            Bounds::PerElement {
                lower: &lower,
                upper: &upper,
            },
        );
    }
    let final_class = obj.evaluate(None, &z)?.top1;
    Ok(AttackResult {
        mode: Mode::FullImage,
        original_class: p.original,
        target_class: Some(target),
        final_class,
        success: final_class == target,
        patch: None,
        adversarial: z,
        trace,
    })
}

/// Runs the single-image attack selected by `cfg.mode`.
pub fn run_attack(model: &Model, image: &Tensor<f32>, cfg: &AttackConfig) -> Result<AttackResult> {
    match cfg.mode {
        Mode::Targeted => attack_targeted(model, image, cfg),
        Mode::Nontargeted => attack_nontargeted(model, image, cfg),
        Mode::Uniform => attack_uniform(model, image, cfg),
        Mode::FullImage => attack_full_image(model, image, cfg),
        Mode::Universal => Err(Error::InvalidArgument(
            "the universal attack runs over a dataset, not a single image".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniversalResult {
    pub patch: PatchSpec,
    pub target: usize,
    /// One entry per batch step; loss terms are summed over the batch.
    pub trace: Vec<TraceEntry>,
    pub train_images: usize,
    pub held_out_images: usize,
    /// Fraction of held-out images classified as the target with the patch.
    pub held_out_target_accuracy: f64,
}

/// One patch for a fixed target, optimized over `train` by mini-batch
/// PGD-sign steps on the summed per-image losses, then scored on
/// `held_out`. Images labeled with the target class are skipped in both
/// sets.
pub fn attack_universal(
    model: &Model,
    train: &[LabeledImage],
    held_out: &[LabeledImage],
    cfg: &AttackConfig,
) -> Result<UniversalResult> {
    check_mode(cfg, Mode::Universal)?;
    let [channels, h, w] = model.input_shape;
    cfg.validate(w, h)?;
    let TargetPolicy::Fixed(target) = cfg.target else {
        unreachable!("validated")
    };
    model.check_class(target)?;
    let train: Vec<&LabeledImage> = train.iter().filter(|i| i.label != target).collect();
    let held_out: Vec<&LabeledImage> = held_out.iter().filter(|i| i.label != target).collect();
    if train.is_empty() {
        return Err(Error::EmptySplit("universal training"));
    }
    if held_out.is_empty() {
        return Err(Error::EmptySplit("universal held-out"));
    }
    for img in train.iter().chain(&held_out) {
        model.check_image(&img.pixels)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = random_patch(&mut rng, channels, cfg);
    let mut obj = Objective::<f32>::new(model, cfg.patch, ObjectiveKind::Targeted { target }, cfg.lambda, cfg.stop_alpha)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();
    for epoch in 0..cfg.iterations {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = Tensor::zeros(z.shape());
            let mut sums = TraceEntry {
                total: 0.0,
                ce: 0.0,
                heat: 0.0,
                top1: None,
            };
            for &i in batch {
                let ev = obj.evaluate(Some(&train[i].pixels), &z)?;
                sums.total += ev.total;
                sums.ce += ev.ce;
                sums.heat += ev.heat;
                grad.add_assign(&obj.gradient()?);
            }
            if !sums.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: trace.len(),
                });
            }
            trace.push(sums);
            z = pgd_step(&z, &grad, cfg.eta as f32, Bounds::Range(0.0, 1.0));
        }
    }
    let patch = PatchSpec::new(cfg.patch, z)?;
    let mut hits = 0;
    for img in &held_out {
        if model.predict(&compose(&img.pixels, &patch)?)? == target {
            hits += 1;
        }
    }
    Ok(UniversalResult {
        patch,
        target,
        trace,
        train_images: train.len(),
        held_out_images: held_out.len(),
        held_out_target_accuracy: hits as f64 / held_out.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_default_model;

    fn setup() -> (Model, Tensor<f32>) {
        let m = build_default_model(4, 4).unwrap();
        let data = (0..3 * 64 * 64).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
        (m, Tensor::new(&[3, 64, 64], data).unwrap())
    }

    fn short(mode: Mode) -> AttackConfig {
        AttackConfig {
            iterations: 4,
            ..AttackConfig::preset(mode, 64)
        }
    }

    #[test]
    fn patch_modes_keep_outside_pixels_and_range() {
        let (m, x) = setup();
        for mode in [Mode::Targeted, Mode::Nontargeted, Mode::Uniform] {
            let r = run_attack(&m, &x, &short(mode)).unwrap();
            assert_eq!(r.trace.len(), 4);
            let p = r.patch.as_ref().unwrap();
            assert!(p.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for (i, (a, b)) in r.adversarial.data().iter().zip(x.data()).enumerate() {
                let (yy, xx) = ((i / 64) % 64, i % 64);
                if !p.rect.contains(xx, yy) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn full_image_stays_in_epsilon_ball() {
        let (m, x) = setup();
        let cfg = short(Mode::FullImage);
        let r = run_attack(&m, &x, &cfg).unwrap();
        let eps = (8.0f32 / 255.0) + 1e-7;
        for (a, b) in r.adversarial.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps && (0.0..=1.0).contains(a));
        }
        assert!(r.patch.is_none());
    }

    #[test]
    fn attacks_are_deterministic() {
        let (m, x) = setup();
        let cfg = short(Mode::Targeted);
        assert_eq!(run_attack(&m, &x, &cfg).unwrap(), run_attack(&m, &x, &cfg).unwrap());
    }

    #[test]
    fn nontargeted_margin_is_ln_k() {
        let (m, x) = setup();
        let mut obj = Objective::<f64>::new(
            &m,
            crate::attack::Rect::default_patch(64),
            ObjectiveKind::Nontargeted { original: 0 },
            0.0,
            false,
        )
        .unwrap();
        let z = Tensor::full(&[3, 18, 18], 0.5);
        let ev = obj.evaluate(Some(&x.cast()), &z).unwrap();
        let ce = crate::diff::kernels::cross_entropy(obj.logits().unwrap().data(), 0);
        assert!((ev.ce - (4f64.ln() - ce).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn mode_mismatch_and_universal_dispatch() {
        let (m, x) = setup();
        assert!(attack_targeted(&m, &x, &short(Mode::Uniform)).is_err());
        assert!(run_attack(&m, &x, &short(Mode::Universal)).is_err());
    }
}
