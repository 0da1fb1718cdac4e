//! Property checks for every module's invariants. Shared by the
//! `properties` test target (one test per check) and the acceptance suite
//! (which runs them all as one criterion).

use patchcam::attack::{
    compose, pgd_step, run_attack, AttackConfig, Bounds, Mode, Objective, ObjectiveFunction, ObjectiveKind,
    PatchSpec, Rect, TargetPolicy,
};
use patchcam::diff::{finite_diff_check, Graph, NodeId};
use patchcam::interpret::{gradcam, gradcam_in, occlusion_map, Heatmap, Normalization, OcclusionConfig};
use patchcam::metrics::{
    energy_ratio, evaluate_suite, histogram_intersection, localization, median, InterpretMethod, SuiteAttack,
    SuiteConfig, LOCALIZATION_THRESHOLD,
};
use patchcam::model::{
    build_model, default_labels, default_patch_side, gen_dataset, read_model, train, write_model, Architecture,
    DatasetConfig, Layer, Model, ShapeKind, TrainConfig,
};
use patchcam::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = fn() -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("diff: frozen-mask consistency", diff_frozen_mask),
    ("diff: linearity", diff_linearity),
    ("diff: conv2d brute force", diff_conv_brute_force),
    ("diff: upsample/block-sum transpose", diff_upsample_transpose),
    ("diff: second-order heatmap gradient", diff_second_order),
    ("model: predict is pure", model_predict_pure),
    ("model: training loss finite", model_training_finite),
    ("model: shapes avoid the patch", model_dataset_avoids_patch),
    ("interpret: graph equals numeric Grad-CAM", interpret_graph_equals_numeric),
    ("interpret: other-class bias invariance", interpret_bias_invariance),
    ("interpret: occlusion translation equivariance", interpret_occlusion_equivariance),
    ("attack: composition purity", attack_compose_purity),
    ("attack: clip bounds", attack_clip_bounds),
    ("attack: run invariants and determinism", attack_run_invariants),
    ("metrics: ranges and whole-image energy", metrics_ranges),
    ("metrics: histogram intersection", metrics_intersection),
    ("metrics: localization scale invariance", metrics_localization_scale),
    ("metrics: aggregates recompute", metrics_aggregates),
];

fn runner(cases: u32) -> TestRunner {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn report<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Small conv net on 32x32 inputs; Grad-CAM grid 4x4.
pub fn tiny_model(seed: u64) -> Model {
    tiny_model_at(seed, 32)
}

fn tiny_model_at(seed: u64, size: usize) -> Model {
    let arch = Architecture {
        channels: [4, 8, 8],
        input_size: size,
    };
    build_model(arch, default_labels(4), seed).unwrap()
}

fn project(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, node: NodeId) -> NodeId {
    let c = g.constant(random(rng, g.shape(node), -1.0, 1.0));
    let p = g.mul(node, c).unwrap();
    g.sum(p)
}

fn conv_net(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, x: NodeId) -> NodeId {
    let w = g.constant(random(rng, &[3, 2, 3, 3], -1.0, 1.0));
    let c = g.conv2d(x, w, None, 1, 1).unwrap();
    let r = g.relu(c);
    g.max_pool(r, 2, 2).unwrap()
}

pub fn diff_frozen_mask() -> Result<(), String> {
    report(runner(32).run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 6, 6]).unwrap();
        let p = conv_net(&mut g, &mut rng, x);
        let out = project(&mut g, &mut rng, p);
        let dx = g.grad_graph(out, x).unwrap();
        g.forward(&[("x", &random(&mut rng, &[2, 6, 6], -1.0, 1.0))]).unwrap();
        let a = g.grad(out, &[x]).unwrap().remove(0);
        let b = g.grad(out, &[x]).unwrap().remove(0);
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.data(), g.value(dx).unwrap().data());
        Ok(())
    }))
}

pub fn diff_linearity() -> Result<(), String> {
    report(runner(32).run(&(any::<u64>(), -3.0..3.0f64, -3.0..3.0f64), |(seed, a, b)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 6, 6]).unwrap();
        let p = conv_net(&mut g, &mut rng, x);
        let f = project(&mut g, &mut rng, p);
        let q = g.gap(x).unwrap();
        let h = project(&mut g, &mut rng, q);
        let fa = g.scale(f, a);
        let hb = g.scale(h, b);
        let comb = g.add(fa, hb).unwrap();
        g.forward(&[("x", &random(&mut rng, &[2, 6, 6], -1.0, 1.0))]).unwrap();
        let gf = g.grad(f, &[x]).unwrap().remove(0);
        let gh = g.grad(h, &[x]).unwrap().remove(0);
        let gc = g.grad(comb, &[x]).unwrap().remove(0);
        for i in 0..gc.len() {
            prop_assert!((gc.data()[i] - (a * gf.data()[i] + b * gh.data()[i])).abs() <= 1e-6);
        }
        Ok(())
    }))
}

pub fn diff_conv_brute_force() -> Result<(), String> {
    let shapes = (1..=3usize, 1..=3usize, 3..=8usize, 3..=8usize, 1..=3usize, 1..=2usize, 0..=1usize, any::<u64>());
    report(runner(48).run(&shapes, |(c, o, h, w, k, stride, pad, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // small integers keep every sum exact whatever the summation order
        let ints = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-4i32..=4) as f64).collect::<Vec<_>>();
        let xv = Tensor::new(&[c, h, w], ints(&mut rng, c * h * w)).unwrap();
        let wv = Tensor::new(&[o, c, k, k], ints(&mut rng, o * c * k * k)).unwrap();
        let bv = Tensor::new(&[o], ints(&mut rng, o)).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[c, h, w]).unwrap();
        let wn = g.constant(wv.clone());
        let bn = g.constant(bv.clone());
        let y = g.conv2d(x, wn, Some(bn), stride, pad).unwrap();
        let out = g.eval(&[("x", &xv)], y).unwrap();
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        prop_assert_eq!(out.shape(), &[o, oh, ow]);
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = bv.data()[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < w {
                                    s += wv.data()[((oc * c + ic) * k + ki) * k + kj]
                                        * xv.data()[(ic * h + yi as usize) * w + xj as usize];
                                }
                            }
                        }
                    }
                    prop_assert_eq!(out.data()[(oc * oh + i) * ow + j], s);
                }
            }
        }
        Ok(())
    }))
}

pub fn diff_upsample_transpose() -> Result<(), String> {
    report(runner(32).run(&(1..=3usize, 1..=5usize, 1..=5usize, 1..=4usize, any::<u64>()), |(c, h, w, f, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = random(&mut rng, &[c, h, w], -1.0, 1.0);
        let yv = random(&mut rng, &[c, h * f, w * f], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[c, h, w]).unwrap();
        let u = g.upsample_nearest(x, f).unwrap();
        let y = g.constant(yv);
        let uy = g.mul(u, y).unwrap();
        let out = g.sum(uy);
        let identity = g.sum(u);
        g.forward(&[("x", &xv)]).unwrap();
        let by = g.grad(out, &[x]).unwrap().remove(0);
        let lhs = g.value(out).unwrap().item();
        let rhs: f64 = by.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        // block-sum of the upsampled ones is f^2 on the coarse grid
        let ones = g.grad(identity, &[x]).unwrap().remove(0);
        prop_assert!(ones.data().iter().all(|&v| v == (f * f) as f64));
        Ok(())
    }))
}

pub fn diff_second_order() -> Result<(), String> {
    report(runner(3).run(&any::<u64>(), |seed| {
        let model = tiny_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 32, 32], 0.0, 1.0);
        let patch = Rect::default_patch(32);
        let z = random(&mut rng, &[3, patch.height, patch.width], 0.0, 1.0);
        let target = rng.gen_range(0..4);
        let obj = Objective::<f64>::new(&model, patch, ObjectiveKind::Targeted { target }, 0.05, false).unwrap();
        let mut f = ObjectiveFunction {
            objective: obj,
            image: Some(x),
            heat_only: true,
        };
        let r = finite_diff_check(&mut f, &z, 1e-4).unwrap();
        prop_assert!(r.max_rel_error < 1e-2, "{:?}", r);
        Ok(())
    }))
}

pub fn model_predict_pure() -> Result<(), String> {
    report(runner(8).run(&any::<u64>(), |seed| {
        let model = tiny_model(seed);
        let img = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), &[3, 32, 32], 0.0, 1.0).cast::<f32>();
        let a = model.logits(&img).unwrap();
        let b = model.logits(&img).unwrap();
        let c = model.clone().logits(&img).unwrap();
        let mut d = read_model(&write_model(&model)).unwrap();
        // model files do not record the input size
        d.input_shape = model.input_shape;
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.data(), c.data());
        prop_assert_eq!(model.predict(&img).unwrap(), d.predict(&img).unwrap());
        Ok(())
    }))
}

pub fn model_training_finite() -> Result<(), String> {
    report(runner(2).run(&any::<u64>(), |seed| {
        let mut model = tiny_model(seed);
        let ds = gen_dataset(&DatasetConfig {
            image_size: 32,
            ..DatasetConfig::new(24, seed)
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &ds.images[..16], &ds.images[16..], &cfg).unwrap();
        prop_assert!(r.epochs.iter().all(|e| e.loss.is_finite()));
        Ok(())
    }))
}

pub fn model_dataset_avoids_patch() -> Result<(), String> {
    let strat = (any::<u64>(), 32..=96usize, proptest::sample::subsequence(ShapeKind::ALL.to_vec(), 1..=4));
    report(runner(24).run(&strat, |(seed, size, classes)| {
        let ds = gen_dataset(&DatasetConfig {
            n: 8,
            classes,
            image_size: size,
            seed,
        })
        .unwrap();
        let p = default_patch_side(size);
        let plane = size * size;
        for img in &ds.images {
            let b = img.gt_box;
            prop_assert!(b.x0 >= p || b.y0 >= p, "box {:?} patch {}", b, p);
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        // background noise never exceeds 0.3
                        prop_assert!(img.pixels.data()[c * plane + y * size + x] <= 0.3 + 1e-6);
                    }
                }
            }
        }
        Ok(())
    }))
}

/// Grad-CAM with the channel weights computed from a numeric backward pass
/// instead of gradient nodes.
fn numeric_gradcam(model: &Model, image: &Tensor<f64>, class: usize) -> Heatmap {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", image.shape()).unwrap();
    let nodes = model.build(&mut g, x).unwrap();
    let score = g.pick(nodes.logits, class).unwrap();
    g.forward(&[("x", image)]).unwrap();
    let grad = g.grad(score, &[nodes.activation]).unwrap().remove(0);
    let act = g.value(nodes.activation).unwrap().clone();
    let factor = image.shape()[1] / act.shape()[1];
    let mut h = Graph::<f64>::new();
    let gn = h.constant(grad);
    let an = h.constant(act);
    let alpha = h.gap(gn).unwrap();
    let ws = h.channel_weighted_sum(alpha, an).unwrap();
    let coarse = h.relu(ws);
    let map = h.upsample_nearest(coarse, factor).unwrap();
    let total = h.sum(map);
    let norm = h.div_by_scalar(map, total).unwrap();
    h.forward(&[]).unwrap();
    let v = h.value(norm).unwrap();
    Heatmap {
        values: v.data().to_vec(),
        height: v.shape()[0],
        width: v.shape()[1],
        class,
        norm: Normalization::Sum1,
        degenerate: h.value(total).unwrap().item() == 0.0,
    }
}

pub fn interpret_graph_equals_numeric() -> Result<(), String> {
    report(runner(8).run(&(any::<u64>(), 0..4usize), |(seed, class)| {
        let model = tiny_model(seed);
        let img = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), &[3, 32, 32], 0.0, 1.0);
        let a = gradcam_in::<f64>(&model, &img, class).unwrap();
        let b = numeric_gradcam(&model, &img, class);
        prop_assert_eq!(a, b);
        Ok(())
    }))
}

pub fn interpret_bias_invariance() -> Result<(), String> {
    report(runner(8).run(&(any::<u64>(), 0..4usize, 1..4usize, -5.0..5.0f32), |(seed, class, shift, delta)| {
        let model = tiny_model(seed);
        let img = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 3), &[3, 32, 32], 0.0, 1.0).cast::<f32>();
        let before = gradcam(&model, &img, class).unwrap();
        let mut perturbed = model.clone();
        let other = (class + shift) % 4;
        for layer in perturbed.layers.iter_mut() {
            if let Layer::Linear { bias, .. } = layer {
                bias.data_mut()[other] += delta;
            }
        }
        prop_assert_eq!(before, gradcam(&perturbed, &img, class).unwrap());
        Ok(())
    }))
}

pub fn interpret_occlusion_equivariance() -> Result<(), String> {
    // an object on a zero background, shifted by one occluder stride (a
    // multiple of the network's total pooling stride) and kept far enough
    // from the borders that padding never sees it
    report(runner(4).run(&(any::<u64>(), 0..4usize), |(seed, class)| {
        let s = 64;
        let model = tiny_model_at(seed, s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let mut data = vec![0.0f32; 3 * s * s];
        for c in 0..3 {
            for y in 24..40 {
                for x in 16..24 {
                    data[(c * s + y) * s + x] = rng.gen_range(0.0..1.0);
                }
            }
        }
        let img = Tensor::new(&[3, s, s], data.clone()).unwrap();
        let mut shifted = vec![0.0f32; 3 * s * s];
        for c in 0..3 {
            for y in 0..s {
                for x in 8..s {
                    shifted[(c * s + y) * s + x] = data[(c * s + y) * s + x - 8];
                }
            }
        }
        let shifted = Tensor::new(&[3, s, s], shifted).unwrap();
        let cfg = OcclusionConfig {
            size: 8,
            stride: 8,
            fill: 0.0,
        };
        let a = occlusion_map(&model, &img, class, &cfg).unwrap();
        let b = occlusion_map(&model, &shifted, class, &cfg).unwrap();
        prop_assert_eq!((a.grid_height, a.grid_width), (8, 8));
        for gy in 0..8 {
            for gx in 1..8 {
                let (da, db) = (a.drops[gy * 8 + gx - 1], b.drops[gy * 8 + gx]);
                prop_assert!((da - db).abs() <= 1e-4 * (1.0 + da.abs()), "cell ({}, {}): {} vs {}", gy, gx, da, db);
            }
        }
        prop_assert!(a.drops.iter().any(|&d| d > 0.0) || b.drops.iter().all(|&d| d == 0.0));
        Ok(())
    }))
}

pub fn attack_compose_purity() -> Result<(), String> {
    let strat = (any::<u64>(), 0..32usize, 0..32usize, 1..=32usize, 1..=32usize);
    report(runner(64).run(&strat, |(seed, x0, y0, w, h)| {
        let (w, h) = (w.min(32 - x0), h.min(32 - y0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 32, 32], 0.0, 1.0).cast::<f32>();
        let copy = x.clone();
        let z = random(&mut rng, &[3, h, w], 0.0, 1.0).cast::<f32>();
        let rect = Rect::new(x0, y0, w, h);
        let out = compose(&x, &PatchSpec::new(rect, z.clone()).unwrap()).unwrap();
        prop_assert_eq!(&x, &copy);
        for c in 0..3 {
            for yy in 0..32 {
                for xx in 0..32 {
                    let i = (c * 32 + yy) * 32 + xx;
                    let expect = if rect.contains(xx, yy) {
                        z.data()[(c * h + yy - y0) * w + xx - x0]
                    } else {
                        x.data()[i]
                    };
                    prop_assert_eq!(out.data()[i].to_bits(), expect.to_bits());
                }
            }
        }
        Ok(())
    }))
}

pub fn attack_clip_bounds() -> Result<(), String> {
    report(runner(64).run(&(any::<u64>(), 0.0001..0.5f32, 0.001..0.2f32), |(seed, eta, eps)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 50;
        let z = random(&mut rng, &[n], 0.0, 1.0).cast::<f32>();
        let g = random(&mut rng, &[n], -2.0, 2.0).cast::<f32>();
        let out = pgd_step(&z, &g, eta, Bounds::Range(0.0, 1.0));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..n {
            let step = (out.data()[i] - z.data()[i]).abs();
            prop_assert!(step <= eta + 1e-6);
        }
        // full-image ball around a clean image
        let x = random(&mut rng, &[n], 0.0, 1.0).cast::<f32>();
        let lower = x.map(|v| (v - eps).max(0.0));
        let upper = x.map(|v| (v + eps).min(1.0));
        let mut cur = x.clone();
        for _ in 0..5 {
            let g = random(&mut rng, &[n], -1.0, 1.0).cast::<f32>();
            cur = pgd_step(&cur, &g, eta, Bounds::PerElement { lower: lower.data(), upper: upper.data() });
            prop_assert!(cur.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(cur.max_abs_diff(&x) <= eps as f64 + 1e-7);
        }
        Ok(())
    }))
}

pub fn attack_run_invariants() -> Result<(), String> {
    let modes = proptest::sample::select(vec![Mode::Targeted, Mode::Nontargeted, Mode::Uniform, Mode::FullImage]);
    report(runner(6).run(&(any::<u64>(), modes), |(seed, mode)| {
        let model = tiny_model(seed);
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 5), &[3, 32, 32], 0.0, 1.0).cast::<f32>();
        let mut cfg = AttackConfig::preset(mode, 32);
        cfg.iterations = 6;
        cfg.seed = seed;
        cfg.target = TargetPolicy::StepRnd;
        let a = run_attack(&model, &x, &cfg).unwrap();
        let b = run_attack(&model, &x, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.trace.len(), cfg.iterations);
        prop_assert!(a.trace.iter().all(|t| t.total.is_finite() && t.ce.is_finite() && t.heat.is_finite()));
        prop_assert!(a.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        match mode {
            Mode::FullImage => {
                prop_assert!(a.adversarial.max_abs_diff(&x) <= cfg.epsilon.unwrap() + 1e-6);
            }
            _ => {
                let rect = a.patch.as_ref().unwrap().rect;
                for c in 0..3 {
                    for y in 0..32 {
                        for xx in 0..32 {
                            if !rect.contains(xx, y) {
                                let i = (c * 32 + y) * 32 + xx;
                                prop_assert_eq!(a.adversarial.data()[i].to_bits(), x.data()[i].to_bits());
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }))
}

fn random_heatmap(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Heatmap {
    // sparse-ish maps so degenerate and peaked cases both occur
    let raw: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..5.0) } else { 0.0 }).collect();
    Heatmap::from_raw_sum1(&raw, h, w, 0).unwrap()
}

fn random_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Rect {
    let x0 = rng.gen_range(0..w);
    let y0 = rng.gen_range(0..h);
    Rect::new(x0, y0, rng.gen_range(1..=w - x0), rng.gen_range(1..=h - y0))
}

pub fn metrics_ranges() -> Result<(), String> {
    report(runner(64).run(&(any::<u64>(), 1..12usize, 1..12usize), |(seed, h, w)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_heatmap(&mut rng, h, w);
        let whole = energy_ratio(&m, Rect::full(w, h)).unwrap();
        if m.degenerate {
            prop_assert_eq!(whole, 0.0);
        } else {
            prop_assert!((whole - 1.0).abs() < 1e-12);
        }
        let e = energy_ratio(&m, random_rect(&mut rng, h, w)).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&e));
        let gt = random_rect(&mut rng, h, w);
        let gt = patchcam::model::BBox {
            x0: gt.x0,
            y0: gt.y0,
            x1: gt.x0 + gt.width,
            y1: gt.y0 + gt.height,
        };
        let l = localization(&m, &gt, LOCALIZATION_THRESHOLD);
        prop_assert!((0.0..=1.0).contains(&l.iou));
        prop_assert_eq!(l.error, l.iou < 0.5);
        Ok(())
    }))
}

pub fn metrics_intersection() -> Result<(), String> {
    report(runner(64).run(&(any::<u64>(), 1..12usize, 1..12usize), |(seed, h, w)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_heatmap(&mut rng, h, w);
        let b = random_heatmap(&mut rng, h, w);
        let ab = histogram_intersection(&a, &b).unwrap();
        prop_assert_eq!(ab, histogram_intersection(&b, &a).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        if !a.degenerate {
            prop_assert!((histogram_intersection(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
        if !(a.degenerate || b.degenerate) {
            let r = random_rect(&mut rng, h, w);
            let mut inside = 0.0;
            for y in r.y0..r.y0 + r.height {
                for x in r.x0..r.x0 + r.width {
                    inside += a.get(y, x).min(b.get(y, x));
                }
            }
            let bound = energy_ratio(&a, r).unwrap().min(energy_ratio(&b, r).unwrap());
            prop_assert!(inside <= bound + 1e-12);
        }
        Ok(())
    }))
}

pub fn metrics_localization_scale() -> Result<(), String> {
    report(runner(64).run(&(any::<u64>(), 2..12usize, 2..12usize, 0.01..100.0f64), |(seed, h, w, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let make = |s: f64| Heatmap {
            values: raw.iter().map(|v| v * s).collect(),
            height: h,
            width: w,
            class: 0,
            norm: Normalization::Raw,
            degenerate: false,
        };
        let gt = patchcam::model::BBox { x0: 0, y0: 0, x1: w / 2 + 1, y1: h / 2 + 1 };
        let a = localization(&make(1.0), &gt, LOCALIZATION_THRESHOLD);
        let b = localization(&make(3.0), &gt, LOCALIZATION_THRESHOLD);
        let c = localization(&make(k), &gt, LOCALIZATION_THRESHOLD);
        prop_assert_eq!(a.pred_box, b.pred_box);
        prop_assert_eq!(a.pred_box, c.pred_box);
        Ok(())
    }))
}

pub fn metrics_aggregates() -> Result<(), String> {
    report(runner(2).run(&any::<u64>(), |seed| {
        let model = tiny_model(seed);
        let ds = gen_dataset(&DatasetConfig {
            image_size: 32,
            ..DatasetConfig::new(6, seed)
        })
        .unwrap();
        let mut acfg = AttackConfig::preset(Mode::Targeted, 32);
        acfg.iterations = 3;
        let mut cfg = SuiteConfig {
            label: "t".into(),
            attack: SuiteAttack::PerImage(acfg),
            method: InterpretMethod::Gradcam,
            jobs: 1,
        };
        let r = evaluate_suite(&model, &ds.images, &cfg).unwrap();
        cfg.jobs = 4;
        prop_assert_eq!(&r, &evaluate_suite(&model, &ds.images, &cfg).unwrap());
        let n = r.records.len() as f64;
        let acc = r.records.iter().filter(|x| x.final_class == Some(x.label)).count() as f64 / n;
        let tacc = r.records.iter().filter(|x| x.success == Some(true)).count() as f64 / n;
        let loc = r.records.iter().filter(|x| x.localization_error == Some(true)).count() as f64 / n;
        let live: Vec<_> = r.records.iter().filter(|x| x.degenerate == Some(false)).collect();
        let energies: Vec<f64> = live.iter().map(|x| x.energy_ratio.unwrap()).collect();
        let agg = &r.aggregates;
        prop_assert_eq!(agg.accuracy, acc);
        prop_assert_eq!(agg.target_accuracy, Some(tacc));
        prop_assert_eq!(agg.localization_error_rate, loc);
        prop_assert_eq!(agg.degenerate, r.records.len() - live.len());
        prop_assert_eq!(agg.median_energy_ratio, median(&energies));
        if !energies.is_empty() {
            let mean = energies.iter().sum::<f64>() / energies.len() as f64;
            prop_assert!((agg.mean_energy_ratio.unwrap() - mean).abs() < 1e-12);
        }
        Ok(())
    }))
}
