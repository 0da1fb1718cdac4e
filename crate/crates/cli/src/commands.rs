use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use patchcam::attack::{
    attack_universal, run_attack, AttackConfig, Mode, PatchSidecar, PatchSpec, Rect, TargetPolicy,
};
use patchcam::imageio::{quantize_image, read_ppm, write_atomic, write_ppm};
use patchcam::interpret::{gradcam, occlusion_map, Heatmap, OcclusionConfig};
use patchcam::metrics::{evaluate_suite, InterpretMethod, MetricsReport, SuiteAttack, SuiteConfig};
use patchcam::model::{
    build_model, gen_dataset, load_dataset, load_model, save_dataset, save_model, train, Architecture,
    DatasetConfig, LabeledImage, Model, ShapeKind, TrainConfig,
};
use patchcam::Tensor;
use serde::Serialize;

use crate::manifest::{self, RunManifest};
use crate::{
    AttackArgs, AttackCmdArgs, AttackFailed, Cli, Command, EvalModeArg, EvaluateArgs, GenDataArgs, InterpretArgs,
    MethodArg, ModeArg, RerunArgs, TrainArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Attack(a) => attack(a, argv),
        Command::Evaluate(a) => evaluate(a, argv),
        Command::Interpret(a) => interpret(a, argv),
        Command::Rerun(a) => rerun(a),
    }
}

fn rerun(a: RerunArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    let argv = match &a.out {
        Some(out) => {
            let abs = std::env::current_dir()?.join(out);
            manifest::replace_out(&m.argv, &abs)
        }
        None => m.argv.clone(),
    };
    if argv.first().map(String::as_str) == Some("rerun") {
        return Err(usage("a rerun manifest cannot be re-run"));
    }
    let cli = <Cli as clap::Parser>::try_parse_from(std::iter::once("patchcam".to_string()).chain(argv.clone()))
        .map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd.display()))?;
    dispatch(cli.command, &argv)
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let classes = a
        .classes
        .iter()
        .map(|c| ShapeKind::parse(c.trim()).map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let cfg = DatasetConfig {
        n: a.n,
        classes,
        image_size: a.size,
        seed: a.seed,
    };
    let ds = gen_dataset(&cfg).map_err(|e| usage(e.to_string()))?;
    save_dataset(&ds, &a.out)?;
    let mut m = RunManifest::new("gen-data", argv)?;
    m.config = serde_json::to_value(&cfg)?;
    m.seeds = vec![a.seed];
    m.outputs = vec![a.out.clone()];
    m.finish(start.elapsed(), &manifest::in_dir(&a.out))?;
    eprintln!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn split_tail<T>(items: &[T], fraction: f64) -> Result<(&[T], &[T])> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(usage(format!("held-out fraction {fraction} must be in [0, 1)")));
    }
    let held = (items.len() as f64 * fraction).round() as usize;
    Ok(items.split_at(items.len() - held))
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let ds = load_dataset(&a.data)?;
    let size = ds.images.first().map_or(64, |i| i.pixels.shape()[1]);
    let (train_set, held_out) = split_tail(&ds.images, a.held_out)?;
    let arch = Architecture {
        input_size: size,
        ..Architecture::default()
    };
    let mut model = build_model(arch, ds.class_names.clone(), a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        momentum: a.momentum,
        cosine: !a.constant_lr,
        seed: a.seed,
    };
    let report = train(&mut model, train_set, held_out, &cfg)?;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.3}  held-out {:.3}",
            e.epoch, e.loss, e.train_accuracy, e.held_out_accuracy
        );
    }
    save_model(&model, &a.out)?;
    let report_path = with_suffix(&a.out, ".report.json");
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    let mut m = RunManifest::new("train", argv)?;
    m.config = serde_json::json!({
        "train": cfg,
        "held_out_fraction": a.held_out,
        "train_images": train_set.len(),
        "held_out_images": held_out.len(),
        "channels": arch.channels,
        "input_size": size,
    });
    m.seeds = vec![a.seed];
    m.inputs = vec![a.data.clone()];
    m.outputs = vec![a.out.clone(), report_path];
    m.finish(start.elapsed(), &manifest::beside(&a.out))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_target(s: &str) -> Result<TargetPolicy> {
    match s {
        "step-rnd" => Ok(TargetPolicy::StepRnd),
        "least-likely" => Ok(TargetPolicy::LeastLikely),
        n => n
            .parse()
            .map(TargetPolicy::Fixed)
            .map_err(|_| usage(format!("target `{n}` is not step-rnd, least-likely or a class index"))),
    }
}

fn rect(v: &[usize]) -> Rect {
    Rect::new(v[0], v[1], v[2], v[3])
}

fn mode_of(m: ModeArg) -> Mode {
    match m {
        ModeArg::Targeted => Mode::Targeted,
        ModeArg::Nontargeted => Mode::Nontargeted,
        ModeArg::Uniform => Mode::Uniform,
        ModeArg::FullImage => Mode::FullImage,
        ModeArg::Universal => Mode::Universal,
    }
}

fn attack_config(a: &AttackArgs, model: &Model) -> Result<AttackConfig> {
    let [_, h, w] = model.input_shape;
    let mut cfg = AttackConfig::preset(mode_of(a.mode), w);
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if a.eps.is_some() {
        if cfg.mode != Mode::FullImage {
            return Err(usage("--eps only applies to full-image mode"));
        }
        cfg.epsilon = a.eps;
    }
    if let Some(p) = &a.patch {
        if cfg.mode == Mode::FullImage {
            return Err(usage("full-image mode perturbs the whole image; --patch does not apply"));
        }
        cfg.patch = rect(p);
    }
    if let Some(d) = &a.decoy {
        if cfg.mode != Mode::Uniform {
            return Err(usage("--decoy only applies to uniform mode"));
        }
        cfg.decoy = Some(rect(d));
    }
    // universal presets a fixed target of class 0; step-rnd is the generic default
    if !(cfg.mode == Mode::Universal && a.target == "step-rnd") {
        cfg.target = parse_target(&a.target)?;
    }
    cfg.stop_alpha = a.stop_alpha;
    cfg.seed = a.seed;
    cfg.validate(w, h).map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_image(model: &Model, image: &Option<PathBuf>, data: &Option<PathBuf>, index: Option<usize>) -> Result<(Tensor<f32>, PathBuf)> {
    let (img, path) = match (image, data, index) {
        (Some(p), _, _) => (read_ppm(p)?, p.clone()),
        (None, Some(d), Some(i)) => {
            let ds = load_dataset(d)?;
            let img = ds
                .images
                .get(i)
                .ok_or_else(|| usage(format!("index {i} out of range for {} images", ds.len())))?;
            (img.pixels.clone(), d.join(&ds.records[i].file))
        }
        _ => return Err(usage("give --image, or --data with --index")),
    };
    model.check_image(&img).map_err(|e| usage(e.to_string()))?;
    Ok((img, path))
}

/// Class whose heatmap reflects the attack: the target for patch modes,
/// the new prediction for non-targeted, the original for full-image.
fn heatmap_class(mode: Mode, original: usize, target: Option<usize>, final_class: usize) -> usize {
    match mode {
        Mode::Targeted | Mode::Uniform | Mode::Universal => target.unwrap_or(final_class),
        Mode::Nontargeted => final_class,
        Mode::FullImage => original,
    }
}

fn check_epsilon(x: &Tensor<f32>, adv: &Tensor<f32>, eps: f64) -> Result<()> {
    // tolerance covers f32 rounding of x +- eps
    let tol = eps + 1e-6;
    let in_memory = x.max_abs_diff(adv);
    let written = x.max_abs_diff(&quantize_image(adv));
    if in_memory > tol || written > tol {
        bail!("full-image perturbation exceeds epsilon {eps}: {in_memory} in memory, {written} as written");
    }
    Ok(())
}

#[derive(Serialize)]
struct UniversalSummary {
    target: usize,
    train_images: usize,
    held_out_images: usize,
    held_out_target_accuracy: f64,
    success: bool,
    trace: Vec<patchcam::attack::TraceEntry>,
}

/// Universal patches count as successful at this held-out target accuracy.
const UNIVERSAL_SUCCESS: f64 = 0.5;

fn attack(a: AttackCmdArgs, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let cfg = attack_config(&a.attack, &model)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut m = RunManifest::new("attack", argv)?;
    m.config = serde_json::to_value(&cfg)?;
    m.seeds = vec![cfg.seed];
    let patch_stem = a.out.join("patch");
    let success;

    if cfg.mode == Mode::Universal {
        let Some(data) = &a.data else {
            return Err(usage("universal mode needs --data"));
        };
        let ds = load_dataset(data)?;
        let (tr, held) = split_tail(&ds.images, a.held_out)?;
        let r = attack_universal(&model, tr, held, &cfg)?;
        success = r.held_out_target_accuracy >= UNIVERSAL_SUCCESS;
        r.patch.save(&patch_stem, &PatchSidecar::new(r.patch.rect, Some(r.target), &cfg))?;
        let summary = UniversalSummary {
            target: r.target,
            train_images: r.train_images,
            held_out_images: r.held_out_images,
            held_out_target_accuracy: r.held_out_target_accuracy,
            success,
            trace: r.trace,
        };
        write_atomic(&a.out.join("result.json"), &serde_json::to_vec_pretty(&summary)?)?;
        eprintln!(
            "universal patch for class {}: held-out target accuracy {:.3}",
            r.target, r.held_out_target_accuracy
        );
        m.inputs = vec![a.model.clone(), data.clone()];
        m.outputs = ["patch.ppm", "patch.json", "result.json"].iter().map(|f| a.out.join(f)).collect();
    } else {
        let (image, image_path) = load_image(&model, &a.image, &a.data, a.index)?;
        let r = run_attack(&model, &image, &cfg).map_err(|e| match e {
            patchcam::Error::InvalidArgument(_) | patchcam::Error::InvalidClass { .. } => usage(e.to_string()),
            e => e.into(),
        })?;
        if let Some(eps) = cfg.epsilon {
            check_epsilon(&image, &r.adversarial, eps)?;
        }
        success = r.success;
        let mut outputs = vec!["adversarial.ppm", "result.json", "heatmap_before.ppm", "heatmap_after.ppm"];
        write_ppm(&a.out.join("adversarial.ppm"), &r.adversarial)?;
        if let Some(p) = &r.patch {
            p.save(&patch_stem, &PatchSidecar::new(p.rect, r.target_class, &cfg))?;
            outputs.extend(["patch.ppm", "patch.json"]);
        }
        write_atomic(&a.out.join("result.json"), &serde_json::to_vec_pretty(&r.summary())?)?;
        let class = heatmap_class(cfg.mode, r.original_class, r.target_class, r.final_class);
        let before = gradcam(&model, &image, class)?;
        let after = gradcam(&model, &r.adversarial, class)?;
        write_ppm(&a.out.join("heatmap_before.ppm"), &before.overlay(&image)?)?;
        write_ppm(&a.out.join("heatmap_after.ppm"), &after.overlay(&r.adversarial)?)?;
        eprintln!(
            "{}: class {} -> {} (target {:?}), success {}",
            cfg.mode.name(),
            r.original_class,
            r.final_class,
            r.target_class,
            r.success
        );
        m.inputs = vec![a.model.clone(), image_path];
        m.outputs = outputs.iter().map(|f| a.out.join(f)).collect();
    }
    m.finish(start.elapsed(), &manifest::in_dir(&a.out))?;
    if success {
        Ok(())
    } else {
        Err(AttackFailed.into())
    }
}

fn method_of(m: MethodArg, size: usize, stride: usize) -> InterpretMethod {
    match m {
        MethodArg::Gradcam => InterpretMethod::Gradcam,
        MethodArg::Occlusion => InterpretMethod::Occlusion(OcclusionConfig {
            size,
            stride,
            ..OcclusionConfig::default()
        }),
    }
}

fn evaluate(a: EvaluateArgs, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let end = a.limit.map_or(ds.len(), |l| (a.offset + l).min(ds.len()));
    if a.offset >= end {
        return Err(usage(format!("no images selected (offset {}, {} in dataset)", a.offset, ds.len())));
    }
    let images: Vec<LabeledImage> = ds.images[a.offset..end].to_vec();
    let mut inputs = vec![a.model.clone(), a.data.clone()];
    let mode = match a.mode {
        EvalModeArg::None => None,
        EvalModeArg::Targeted => Some(ModeArg::Targeted),
        EvalModeArg::Nontargeted => Some(ModeArg::Nontargeted),
        EvalModeArg::Uniform => Some(ModeArg::Uniform),
        EvalModeArg::FullImage => Some(ModeArg::FullImage),
        EvalModeArg::Universal => Some(ModeArg::Universal),
    };
    let attack = match mode {
        None => SuiteAttack::None,
        Some(ModeArg::Universal) => {
            let Some(stem) = &a.patch_file else {
                return Err(usage("universal evaluation needs --patch-file"));
            };
            let (patch, sidecar) = PatchSpec::load(stem)?;
            let target = sidecar.target.context("patch sidecar has no target class")?;
            inputs.push(stem.with_extension("ppm"));
            SuiteAttack::Universal { patch, target }
        }
        Some(mode) => {
            let args = AttackArgs {
                mode,
                lambda: a.lambda,
                eta: a.eta,
                iterations: a.iterations,
                target: a.target.clone(),
                eps: a.eps,
                patch: None,
                decoy: None,
                batch_size: None,
                stop_alpha: a.stop_alpha,
                seed: a.seed,
            };
            SuiteAttack::PerImage(attack_config(&args, &model)?)
        }
    };
    let method = method_of(a.method, a.occlusion_size, a.occlusion_stride);
    let label = a.label.clone().unwrap_or_else(|| match &attack {
        SuiteAttack::None => "clean".into(),
        SuiteAttack::PerImage(c) => format!("{} lambda={}", c.mode.name(), c.lambda),
        SuiteAttack::Universal { target, .. } => format!("universal target={target}"),
    });
    let cfg = SuiteConfig {
        label,
        attack: attack.clone(),
        method,
        jobs: a.jobs,
    };
    let report = evaluate_suite(&model, &images, &cfg)?;
    let table = MetricsReport::table(&[&report]);
    print!("{table}");
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_atomic(&a.out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&a.out.join("table.txt"), table.as_bytes())?;
    let mut m = RunManifest::new("evaluate", argv)?;
    m.config = serde_json::json!({
        "attack": match &attack {
            SuiteAttack::None => serde_json::Value::Null,
            SuiteAttack::PerImage(c) => serde_json::to_value(c)?,
            SuiteAttack::Universal { patch, target } => serde_json::json!({"patch": patch.rect, "target": target}),
        },
        "method": method,
        "offset": a.offset,
        "images": images.len(),
        "jobs": a.jobs,
    });
    m.seeds = vec![a.seed];
    m.inputs = inputs;
    m.outputs = vec![a.out.join("report.json"), a.out.join("table.txt")];
    m.finish(start.elapsed(), &manifest::in_dir(&a.out))?;
    Ok(())
}

fn interpret(a: InterpretArgs, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let (image, image_path) = load_image(&model, &a.image, &a.data, a.index)?;
    let class = match a.class {
        Some(c) => {
            model.check_class(c).map_err(|e| usage(e.to_string()))?;
            c
        }
        None => model.predict(&image)?,
    };
    let heatmap: Heatmap = match method_of(a.method, a.occlusion_size, a.occlusion_stride) {
        InterpretMethod::Gradcam => gradcam(&model, &image, class)?,
        InterpretMethod::Occlusion(cfg) => occlusion_map(&model, &image, class, &cfg)?.heatmap,
    };
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("");
    match (ext, a.overlay) {
        ("pgm", false) => write_atomic(&a.out, &heatmap.to_pgm())?,
        ("pgm", true) => return Err(usage("--overlay needs a .ppm output")),
        ("ppm", false) => write_atomic(&a.out, &heatmap.to_color_ppm())?,
        ("ppm", true) => write_ppm(&a.out, &heatmap.overlay(&image)?)?,
        _ => return Err(usage("--out must end in .pgm or .ppm")),
    }
    eprintln!("class {class}, degenerate {}", heatmap.degenerate);
    let mut m = RunManifest::new("interpret", argv)?;
    m.config = serde_json::json!({
        "class": class,
        "method": method_of(a.method, a.occlusion_size, a.occlusion_stride),
        "overlay": a.overlay,
    });
    m.inputs = vec![a.model.clone(), image_path];
    m.outputs = vec![a.out.clone()];
    m.finish(start.elapsed(), &manifest::beside(&a.out))?;
    Ok(())
}
