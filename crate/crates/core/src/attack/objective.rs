//! Differentiable attack losses over a model graph.

use super::Rect;
use crate::diff::{Graph, NodeId, ScalarFunction};
use crate::error::{Error, Result};
use crate::interpret::{model_gradcam_nodes, GradCamNodes, GradCamOptions, Heatmap};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

/// Which loss an [`Objective`] computes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectiveKind {
    /// `ce(t) + lambda * sum(G_t in patch)`.
    Targeted { target: usize },
    /// `max(0, M - ce(c)) + lambda * sum(G_a in patch)`, `a` = current top-1.
    Nontargeted { original: usize },
    /// `ce(t) - lambda * sum(G_t in decoy)`.
    Uniform { target: usize, decoy: Rect },
    /// `ce(t) + lambda * sum(unnormalized G_c)` over the whole image.
    FullImage { target: usize, original: usize },
}

/// Loss terms at one evaluation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    /// Cross-entropy term as it enters the loss (hinged for non-targeted).
    pub ce: f64,
    /// Heatmap term before multiplying by lambda.
    pub heat: f64,
    pub top1: usize,
    /// Class whose heatmap the heatmap term used.
    pub heat_class: usize,
}

/// Graph computing an attack loss as a function of the free pixels `z`.
///
/// Patch kinds bind the clean image `x` and the patch `z` and compose them
/// inside the graph; the full-image kind binds only `z`.
pub struct Objective<T: Scalar> {
    graph: Graph<T>,
    kind: ObjectiveKind,
    lambda: f64,
    z: NodeId,
    logits: NodeId,
    ce: NodeId,
    /// One entry per candidate heatmap class.
    cams: Vec<GradCamNodes>,
    heat: Vec<NodeId>,
    loss: Vec<NodeId>,
    last: Option<Evaluation>,
}

impl<T: Scalar> Objective<T> {
    pub fn new(model: &Model, patch: Rect, kind: ObjectiveKind, lambda: f64, stop_alpha: bool) -> Result<Self> {
        let [channels, h, w] = model.input_shape;
        let opts = GradCamOptions { stop_alpha };
        let mut g = Graph::<T>::new();
        let full = matches!(kind, ObjectiveKind::FullImage { .. });
        let (z, image) = if full {
            let z = g.input("z", &model.input_shape)?;
            (z, z)
        } else {
            patch.check_within(w, h)?;
            let x = g.input("x", &model.input_shape)?;
            let z = g.input("z", &[channels, patch.height, patch.width])?;
            let xt = g.paste(x, z, patch.y0, patch.x0)?;
            (z, xt)
        };
        let nodes = model.build(&mut g, image)?;
        let logits = nodes.logits;
        let cam = |g: &mut Graph<T>, c: usize| {
            model_gradcam_nodes(model, g, logits, nodes.activation, c, opts)
        };
        let sum_rect = |g: &mut Graph<T>, map: NodeId, r: Rect| -> Result<NodeId> {
            let region = g.crop(map, r.y0, r.x0, r.height, r.width)?;
            Ok(g.sum(region))
        };

        let (ce, cams, heat) = match kind {
            ObjectiveKind::Targeted { target } => {
                model.check_class(target)?;
                let ce = g.softmax_cross_entropy(logits, target)?;
                let c = cam(&mut g, target)?;
                let heat = sum_rect(&mut g, c.normalized, patch)?;
                (ce, vec![c], vec![heat])
            }
            ObjectiveKind::Nontargeted { original } => {
                model.check_class(original)?;
                let ce = g.softmax_cross_entropy(logits, original)?;
                let margin = (model.num_classes() as f64).ln();
                let m = g.constant(Tensor::scalar(T::from_f64(margin)));
                let neg = g.scale(ce, -1.0);
                let diff = g.add(m, neg)?;
                let hinge = g.relu(diff);
                let mut cams = Vec::new();
                let mut heat = Vec::new();
                for a in 0..model.num_classes() {
                    let c = cam(&mut g, a)?;
                    heat.push(sum_rect(&mut g, c.normalized, patch)?);
                    cams.push(c);
                }
                (hinge, cams, heat)
            }
            ObjectiveKind::Uniform { target, decoy } => {
                model.check_class(target)?;
                decoy.check_within(w, h)?;
                if decoy.intersects(&patch) {
                    return Err(Error::InvalidArgument(format!(
                        "decoy {decoy:?} overlaps the patch {patch:?}"
                    )));
                }
                let ce = g.softmax_cross_entropy(logits, target)?;
                let c = cam(&mut g, target)?;
                let heat = sum_rect(&mut g, c.normalized, decoy)?;
                (ce, vec![c], vec![heat])
            }
            ObjectiveKind::FullImage { target, original } => {
                model.check_class(target)?;
                model.check_class(original)?;
                let ce = g.softmax_cross_entropy(logits, target)?;
                let c = cam(&mut g, original)?;
                let heat = c.total;
                (ce, vec![c], vec![heat])
            }
        };
        let sign = if matches!(kind, ObjectiveKind::Uniform { .. }) { -lambda } else { lambda };
        let mut loss = Vec::with_capacity(heat.len());
        for &hn in &heat {
            loss.push(if lambda == 0.0 {
                ce
            } else {
                let weighted = g.scale(hn, sign);
                g.add(ce, weighted)?
            });
        }
        Ok(Objective {
            graph: g,
            kind,
            lambda,
            z,
            logits,
            ce,
            cams,
            heat,
            loss,
            last: None,
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    fn heat_index(&self, top1: usize) -> usize {
        match self.kind {
            ObjectiveKind::Nontargeted { .. } => top1,
            _ => 0,
        }
    }

    /// Runs the forward pass. `x` is required for patch kinds and ignored
    /// for the full-image kind.
    pub fn evaluate(&mut self, x: Option<&Tensor<T>>, z: &Tensor<T>) -> Result<Evaluation> {
        match (self.kind, x) {
            (ObjectiveKind::FullImage { .. }, _) => self.graph.forward(&[("z", z)])?,
            (_, Some(x)) => self.graph.forward(&[("x", x), ("z", z)])?,
            (_, None) => return Err(Error::UnboundInput("x".into())),
        }
        let top1 = self.graph.value(self.logits)?.argmax();
        let k = self.heat_index(top1);
        let ev = Evaluation {
            total: self.graph.value(self.loss[k])?.item().as_f64(),
            ce: self.graph.value(self.ce)?.item().as_f64(),
            heat: self.graph.value(self.heat[k])?.item().as_f64(),
            top1,
            heat_class: self.cams[k].class,
        };
        self.last = Some(ev);
        Ok(ev)
    }

    /// Gradient of the total loss w.r.t. `z` at the last evaluation.
    pub fn gradient(&self) -> Result<Tensor<T>> {
        let ev = self.last.ok_or(Error::NotEvaluated(self.z.index()))?;
        let k = self.heat_index(ev.top1);
        Ok(self.graph.grad(self.loss[k], &[self.z])?.remove(0))
    }

    /// Sum-normalized heatmap used by the heatmap term at the last
    /// evaluation.
    pub fn heatmap(&self) -> Result<Heatmap> {
        let ev = self.last.ok_or(Error::NotEvaluated(self.z.index()))?;
        self.cams[self.heat_index(ev.top1)].heatmap(&self.graph)
    }

    pub fn logits(&self) -> Result<&Tensor<T>> {
        self.graph.value(self.logits)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// [`Objective`] as a function of `z` with the clean image held fixed, for
/// finite-difference checks.
pub struct ObjectiveFunction {
    pub objective: Objective<f64>,
    pub image: Option<Tensor<f64>>,
    /// Differentiate only the heatmap term instead of the total loss.
    pub heat_only: bool,
}

impl ObjectiveFunction {
    fn output(&self, ev: &Evaluation) -> NodeId {
        let k = self.objective.heat_index(ev.top1);
        if self.heat_only {
            self.objective.heat[k]
        } else {
            self.objective.loss[k]
        }
    }
}

impl ScalarFunction for ObjectiveFunction {
    fn value_and_grad(&mut self, z: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let ev = self.objective.evaluate(self.image.as_ref(), z)?;
        let out = self.output(&ev);
        let v = self.objective.graph.value(out)?.item();
        let g = self.objective.graph.grad(out, &[self.objective.z])?.remove(0);
        Ok((v, g))
    }

    fn value(&mut self, z: &Tensor<f64>) -> Result<(f64, Option<u64>)> {
        let ev = self.objective.evaluate(self.image.as_ref(), z)?;
        let out = self.output(&ev);
        let v = self.objective.graph.value(out)?.item();
        // the argmax class selects which loss node is active
        let fp = self.objective.graph.selection_fingerprint() ^ (ev.top1 as u64).wrapping_mul(0x9E37_79B9);
        Ok((v, Some(fp)))
    }
}
