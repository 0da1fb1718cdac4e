use super::{Heatmap, Normalization};
use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradCamOptions {
    /// Treat the channel weights as constants when differentiating the map.
    pub stop_alpha: bool,
}

/// Node ids of one Grad-CAM computation inside a larger graph.
#[derive(Clone, Copy, Debug)]
pub struct GradCamNodes {
    pub class: usize,
    pub score: NodeId,
    /// Channel weights, `C`.
    pub alpha: NodeId,
    /// Relu'd weighted channel sum at activation resolution.
    pub coarse: NodeId,
    /// `coarse` upsampled to image resolution, unnormalized.
    pub map: NodeId,
    /// Sum of `map`; zero iff the map is degenerate.
    pub total: NodeId,
    /// `map / total`, or zeros when degenerate.
    pub normalized: NodeId,
}

impl GradCamNodes {
    /// Reads the normalized heatmap from an evaluated graph.
    pub fn heatmap<T: Scalar>(&self, g: &Graph<T>) -> Result<Heatmap> {
        let v = g.value(self.normalized)?;
        let shape = v.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        Ok(Heatmap {
            values: v.data().iter().map(|x| x.as_f64()).collect(),
            height: h,
            width: w,
            class: self.class,
            norm: Normalization::Sum1,
            degenerate: g.value(self.total)?.item() == T::zero(),
        })
    }
}

/// Appends Grad-CAM for the scalar `score` and activation maps
/// `activation` (`C x h x w`). The map is upsampled by `factor`.
pub fn gradcam_nodes<T: Scalar>(
    g: &mut Graph<T>,
    class: usize,
    score: NodeId,
    activation: NodeId,
    factor: usize,
    opts: GradCamOptions,
) -> Result<GradCamNodes> {
    let grad = g.grad_graph(score, activation)?;
    let mut alpha = g.gap(grad)?;
    if opts.stop_alpha {
        alpha = g.stop_gradient(alpha);
    }
    let weighted = g.channel_weighted_sum(alpha, activation)?;
    let coarse = g.relu(weighted);
    let map = g.upsample_nearest(coarse, factor)?;
    let total = g.sum(map);
    let normalized = g.div_by_scalar(map, total)?;
    Ok(GradCamNodes {
        class,
        score,
        alpha,
        coarse,
        map,
        total,
        normalized,
    })
}

/// Integer factor from the activation grid to the model input.
pub fn upsample_factor<T: Scalar>(model: &Model, g: &Graph<T>, activation: NodeId) -> Result<usize> {
    let a = g.shape(activation);
    let [_, h, w] = model.input_shape;
    let (ah, aw) = (a[a.len() - 2], a[a.len() - 1]);
    if ah == 0 || h % ah != 0 || w % aw != 0 || h / ah != w / aw {
        return Err(Error::InvalidModel(format!(
            "activation grid {ah}x{aw} does not evenly tile the {h}x{w} input"
        )));
    }
    Ok(h / ah)
}

/// Grad-CAM of `class` for a model already built into `g`.
pub fn model_gradcam_nodes<T: Scalar>(
    model: &Model,
    g: &mut Graph<T>,
    logits: NodeId,
    activation: NodeId,
    class: usize,
    opts: GradCamOptions,
) -> Result<GradCamNodes> {
    model.check_class(class)?;
    let factor = upsample_factor(model, g, activation)?;
    let score = g.pick(logits, class)?;
    gradcam_nodes(g, class, score, activation, factor, opts)
}

/// Sum-normalized Grad-CAM heatmap of `class` at image resolution.
///
/// Evaluates the same nodes that the attacks differentiate through, so the
/// result is bit-identical to reading the map out of an attack graph.
pub fn gradcam(model: &Model, image: &Tensor<f32>, class: usize) -> Result<Heatmap> {
    gradcam_in::<f32>(model, &image.cast(), class)
}

/// [`gradcam`] computed in precision `T`.
pub fn gradcam_in<T: Scalar>(model: &Model, image: &Tensor<T>, class: usize) -> Result<Heatmap> {
    model.check_image(image)?;
    model.check_class(class)?;
    let mut g = Graph::<T>::new();
    let x = g.input("x", image.shape())?;
    let nodes = model.build(&mut g, x)?;
    let cam = model_gradcam_nodes(model, &mut g, nodes.logits, nodes.activation, class, GradCamOptions::default())?;
    g.forward(&[("x", image)])?;
    cam.heatmap(&g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(a: [f64; 4]) -> Heatmap {
        let mut g = Graph::<f64>::new();
        let x = g.input("a", &[1, 2, 2]).unwrap();
        let pooled = g.gap(x).unwrap();
        let score = g.pick(pooled, 0).unwrap();
        let cam = gradcam_nodes(&mut g, 0, score, x, 1, GradCamOptions::default()).unwrap();
        let t = Tensor::new(&[1, 2, 2], a.to_vec()).unwrap();
        g.forward(&[("a", &t)]).unwrap();
        let alpha = g.value(cam.alpha).unwrap();
        assert_eq!(alpha.data(), &[0.25]);
        cam.heatmap(&g).unwrap()
    }

    #[test]
    fn one_layer_oracle() {
        let h = toy([1.0, 2.0, 3.0, 4.0]);
        // G = A / 4 = [[.25, .5], [.75, 1]], sum 2.5
        let expect = [0.1, 0.2, 0.3, 0.4];
        for (v, e) in h.values.iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        assert!(!h.degenerate);
    }

    #[test]
    fn negative_activations_are_degenerate() {
        let h = toy([-1.0, -2.0, -3.0, -4.0]);
        assert!(h.degenerate);
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_heatmap_is_normalized() {
        let model = crate::model::build_default_model(4, 3).unwrap();
        let img = Tensor::<f32>::full(&[3, 64, 64], 0.4);
        for c in 0..4 {
            let h = gradcam(&model, &img, c).unwrap();
            assert_eq!((h.height, h.width), (64, 64));
            assert!(h.values.iter().all(|&v| v >= 0.0));
            if !h.degenerate {
                assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        assert!(matches!(gradcam(&model, &img, 4), Err(Error::InvalidClass { .. })));
    }
}
