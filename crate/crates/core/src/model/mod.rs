//! The desk-scale CNN: layer list, weights, class labels.

mod dataset;
mod format;
mod train;

pub use dataset::{
    default_patch_side, gen_dataset, load_dataset, save_dataset, BBox, Dataset, DatasetConfig,
    LabeledImage, ManifestRecord, ShapeKind,
};
pub use format::{load_model, read_model, save_model, write_model};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight: Tensor<f32>,
        bias: Tensor<f32>,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        weight: Tensor<f32>,
        bias: Tensor<f32>,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "gap",
            Layer::Linear { .. } => "linear",
        }
    }

    pub fn params(&self) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor<f32>, &mut Tensor<f32>)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    /// Index of the conv layer whose block output feeds Grad-CAM.
    pub interp_layer: usize,
    pub labels: Vec<String>,
    /// Expected input `[channels, height, width]`.
    pub input_shape: [usize; 3],
}

/// Graph nodes created by [`Model::build`].
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub logits: NodeId,
    /// Activation maps `A` of the interpretation layer.
    pub activation: NodeId,
    /// `(layer index, weight, bias)` for every parameterized layer.
    pub params: Vec<(usize, NodeId, NodeId)>,
}

/// Channel widths of the three conv stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub channels: [usize; 3],
    pub input_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            channels: [16, 32, 64],
            input_size: 64,
        }
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let b = (1.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-b..b)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `conv-relu-pool` x3, global average pool, linear head. The third conv is
/// the interpretation layer.
pub fn build_model(arch: Architecture, labels: Vec<String>, seed: u64) -> Result<Model> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut in_ch = 3;
    for &out_ch in &arch.channels {
        let fan_in = in_ch * 9;
        layers.push(Layer::Conv2d {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
            weight: uniform_tensor(&mut rng, &[out_ch, in_ch, 3, 3], fan_in),
            bias: uniform_tensor(&mut rng, &[out_ch], fan_in),
        });
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool { size: 2, stride: 2 });
        in_ch = out_ch;
    }
    layers.push(Layer::GlobalAvgPool);
    let classes = labels.len();
    layers.push(Layer::Linear {
        in_features: in_ch,
        out_features: classes,
        weight: uniform_tensor(&mut rng, &[classes, in_ch], in_ch),
        bias: uniform_tensor(&mut rng, &[classes], in_ch),
    });
    let model = Model {
        layers,
        interp_layer: 6,
        labels,
        input_shape: [3, arch.input_size, arch.input_size],
    };
    model.validate()?;
    Ok(model)
}

pub fn default_labels(num_classes: usize) -> Vec<String> {
    let names = ShapeKind::ALL;
    (0..num_classes)
        .map(|i| match names.get(i) {
            Some(k) => k.name().to_string(),
            None => format!("class{i}"),
        })
        .collect()
}

/// The default architecture with `num_classes` outputs.
pub fn build_default_model(num_classes: usize, seed: u64) -> Result<Model> {
    build_model(Architecture::default(), default_labels(num_classes), seed)
}

/// Graph input name of a parameter in [`Model::build_trainable`].
pub fn param_name(layer: usize, which: &str) -> String {
    format!("layer{layer}.{which}")
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Index of the last layer belonging to the interpretation block (the
    /// conv plus any directly following relu/maxpool layers).
    pub fn activation_layer(&self) -> usize {
        let mut end = self.interp_layer;
        while let Some(Layer::Relu | Layer::MaxPool { .. }) = self.layers.get(end + 1) {
            end += 1;
        }
        end
    }

    /// Checks layer chaining and that the interpretation layer is a conv.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if !matches!(self.layers.get(self.interp_layer), Some(Layer::Conv2d { .. })) {
            return bad(format!(
                "interpretation layer {} is not a conv layer",
                self.interp_layer
            ));
        }
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    weight,
                    bias,
                } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return bad(format!("layer {i}: conv expects {in_channels} channels, got {shape:?}"));
                    }
                    if weight.shape() != [*out_channels, *in_channels, *kernel, *kernel]
                        || bias.shape() != [*out_channels]
                    {
                        return bad(format!("layer {i}: conv weight shape"));
                    }
                    if *stride == 0 || shape[1] + 2 * pad < *kernel || shape[2] + 2 * pad < *kernel {
                        return bad(format!("layer {i}: conv geometry"));
                    }
                    shape = vec![
                        *out_channels,
                        (shape[1] + 2 * pad - kernel) / stride + 1,
                        (shape[2] + 2 * pad - kernel) / stride + 1,
                    ];
                }
                Layer::Relu => {}
                Layer::MaxPool { size, stride } => {
                    if shape.len() != 3 || shape[1] < *size || shape[2] < *size || *stride == 0 {
                        return bad(format!("layer {i}: maxpool on {shape:?}"));
                    }
                    shape = vec![shape[0], (shape[1] - size) / stride + 1, (shape[2] - size) / stride + 1];
                }
                Layer::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return bad(format!("layer {i}: gap on {shape:?}"));
                    }
                    shape = vec![shape[0]];
                }
                Layer::Linear {
                    in_features,
                    out_features,
                    weight,
                    bias,
                } => {
                    if shape != [*in_features] {
                        return bad(format!("layer {i}: linear expects [{in_features}], got {shape:?}"));
                    }
                    if weight.shape() != [*out_features, *in_features] || bias.shape() != [*out_features] {
                        return bad(format!("layer {i}: linear weight shape"));
                    }
                    shape = vec![*out_features];
                }
            }
        }
        if shape != [self.num_classes()] {
            return bad(format!(
                "output shape {shape:?} does not match {} labels",
                self.num_classes()
            ));
        }
        Ok(())
    }

    /// Checks an image against the input shape.
    pub fn check_image<T: Scalar>(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(Error::InvalidArgument(format!(
                "image shape {:?}, model expects {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::InvalidClass {
                class,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Appends the network to `g`, reading the image from node `x`. Weights
    /// become constants (cast to `T`).
    pub fn build<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<ModelNodes> {
        self.build_impl(g, x, false)
    }

    /// Like [`build`](Self::build) but every weight and bias is a graph input
    /// named by [`param_names`], so it can be rebound and differentiated.
    pub fn build_trainable<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<ModelNodes> {
        self.build_impl(g, x, true)
    }

    fn build_impl<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, trainable: bool) -> Result<ModelNodes> {
        let param = |g: &mut Graph<T>, i: usize, which: &str, t: &Tensor<f32>| -> Result<NodeId> {
            if trainable {
                g.input(&param_name(i, which), t.shape())
            } else {
                Ok(g.constant(t.cast()))
            }
        };
        let mut cur = x;
        let mut activation = None;
        let mut params = Vec::new();
        let act_layer = self.activation_layer();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv2d {
                    stride,
                    pad,
                    weight,
                    bias,
                    ..
                } => {
                    let w = param(g, i, "weight", weight)?;
                    let b = param(g, i, "bias", bias)?;
                    params.push((i, w, b));
                    g.conv2d(cur, w, Some(b), *stride, *pad)?
                }
                Layer::Relu => g.relu(cur),
                Layer::MaxPool { size, stride } => g.max_pool(cur, *size, *stride)?,
                Layer::GlobalAvgPool => g.gap(cur)?,
                Layer::Linear { weight, bias, .. } => {
                    let w = param(g, i, "weight", weight)?;
                    let b = param(g, i, "bias", bias)?;
                    params.push((i, w, b));
                    g.linear(cur, w, Some(b))?
                }
            };
            if i == act_layer {
                activation = Some(cur);
            }
        }
        Ok(ModelNodes {
            logits: cur,
            activation: activation.expect("activation layer within the layer list"),
            params,
        })
    }

    /// Class scores (pre-softmax) for one image.
    pub fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image(image)?;
        let mut g = Graph::<f32>::new();
        let x = g.input("x", image.shape())?;
        let nodes = self.build(&mut g, x)?;
        g.eval(&[("x", image)], nodes.logits)
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<usize> {
        Ok(self.logits(image)?.argmax())
    }

    /// Fraction of images whose predicted class equals the label.
    pub fn accuracy(&self, images: &[LabeledImage]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for img in images {
            if self.predict(&img.pixels)? == img.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }
}
