//! Mini-batch SGD (momentum, cosine-decayed step size) on mean softmax
//! cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{param_name, LabeledImage, Model};
use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Cosine decay of the learning rate from `lr` to 0 over all steps.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            cosine: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training steps.
    pub loss: f64,
    /// Accuracy of the pre-update predictions seen during the epoch.
    pub train_accuracy: f64,
    pub held_out_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_held_out_accuracy: f64,
    pub seed: u64,
}

struct TrainGraph {
    graph: Graph<f32>,
    loss: Vec<NodeId>,
    logits: NodeId,
    /// Parameter input nodes in layer order, weight before bias.
    params: Vec<NodeId>,
    names: Vec<String>,
}

impl TrainGraph {
    fn new(model: &Model) -> Result<Self> {
        let mut graph = Graph::new();
        let x = graph.input("x", &model.input_shape)?;
        let nodes = model.build_trainable(&mut graph, x)?;
        let loss = (0..model.num_classes())
            .map(|c| graph.softmax_cross_entropy(nodes.logits, c))
            .collect::<Result<Vec<_>>>()?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        for &(i, w, b) in &nodes.params {
            params.extend([w, b]);
            names.extend([param_name(i, "weight"), param_name(i, "bias")]);
        }
        Ok(TrainGraph {
            graph,
            loss,
            logits: nodes.logits,
            params,
            names,
        })
    }
}

fn param_tensors(model: &Model) -> Vec<Tensor<f32>> {
    model
        .layers
        .iter()
        .filter_map(|l| l.params())
        .flat_map(|(w, b)| [w.clone(), b.clone()])
        .collect()
}

/// Step size at training progress `t` in `[0, 1)`.
fn cosine_lr(base: f64, t: f64) -> f32 {
    (base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// Trains `model` in place. `held_out` is only evaluated, never trained on.
///
/// Deterministic given the model weights, the data and `cfg.seed`.
pub fn train(
    model: &mut Model,
    train_set: &[LabeledImage],
    held_out: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::EmptySplit("training"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be positive", cfg.lr)));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidArgument(format!("momentum {} must be in [0, 1)", cfg.momentum)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    for img in train_set.iter().chain(held_out) {
        model.check_image(&img.pixels)?;
        model.check_class(img.label)?;
    }
    let mut tg = TrainGraph::new(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let lr = cfg.lr as f32;
    let momentum = cfg.momentum as f32;
    let mut velocity: Vec<Tensor<f32>> = param_tensors(model).iter().map(|p| Tensor::zeros(p.shape())).collect();

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut params = param_tensors(model);
            let mut acc: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let img = &train_set[idx];
                let mut bindings: Vec<(&str, &Tensor<f32>)> = vec![("x", &img.pixels)];
                bindings.extend(tg.names.iter().map(String::as_str).zip(params.iter()));
                tg.graph.forward(&bindings)?;
                let loss_node = tg.loss[img.label];
                let loss = tg.graph.value(loss_node)?.item() as f64;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, step });
                }
                batch_loss += loss;
                if tg.graph.value(tg.logits)?.argmax() == img.label {
                    correct += 1;
                }
                for (a, g) in acc.iter_mut().zip(tg.graph.grad(loss_node, &tg.params)?) {
                    a.add_assign(&g);
                }
            }
            loss_sum += batch_loss;
            let lr = if cfg.cosine {
                cosine_lr(cfg.lr, (epoch * steps_per_epoch + step) as f64 / total_steps)
            } else {
                lr
            };
            let mean = 1.0 / batch.len() as f32;
            for ((p, g), v) in params.iter_mut().zip(&acc).zip(velocity.iter_mut()) {
                for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = momentum * *vv + mean * gv;
                    *pv -= lr * *vv;
                }
            }
            let mut it = params.into_iter();
            for layer in model.layers.iter_mut() {
                if let Some((w, b)) = layer.params_mut() {
                    *w = it.next().expect("weight per layer");
                    *b = it.next().expect("bias per layer");
                }
            }
        }
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            held_out_accuracy: model.accuracy(held_out)?,
        });
    }
    let final_held_out_accuracy = match epochs.last() {
        Some(e) => e.held_out_accuracy,
        None => model.accuracy(held_out)?,
    };
    Ok(TrainReport {
        epochs,
        final_held_out_accuracy,
        seed: cfg.seed,
    })
}
