//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A deterministic scalar function of one tensor, with an analytic
/// gradient.
pub trait ScalarFunction {
    fn value_and_grad(&mut self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)>;

    /// Value plus an optional fingerprint of the linear region the
    /// evaluation fell in (relu masks, maxpool argmax). `None` means the
    /// function is smooth.
    fn value(&mut self, x: &Tensor<f64>) -> Result<(f64, Option<u64>)>;
}

/// Adapts a 64-bit [`Graph`] with one free input and a scalar output.
pub struct GraphFunction {
    graph: Graph<f64>,
    input: String,
    input_id: NodeId,
    output: NodeId,
}

impl GraphFunction {
    pub fn new(graph: Graph<f64>, input: &str, output: NodeId) -> Result<Self> {
        let input_id = graph.input_id(input)?;
        Ok(GraphFunction {
            graph,
            input: input.to_string(),
            input_id,
            output,
        })
    }

    pub fn graph(&self) -> &Graph<f64> {
        &self.graph
    }
}

impl ScalarFunction for GraphFunction {
    fn value_and_grad(&mut self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        self.graph.forward(&[(&self.input, x)])?;
        let v = self.graph.value(self.output)?.item();
        let g = self.graph.grad(self.output, &[self.input_id])?.remove(0);
        Ok((v, g))
    }

    fn value(&mut self, x: &Tensor<f64>) -> Result<(f64, Option<u64>)> {
        self.graph.forward(&[(&self.input, x)])?;
        let v = self.graph.value(self.output)?.item();
        Ok((v, Some(self.graph.selection_fingerprint())))
    }
}

impl<F> ScalarFunction for F
where
    F: FnMut(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    fn value_and_grad(&mut self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        Ok(self(x))
    }

    fn value(&mut self, x: &Tensor<f64>) -> Result<(f64, Option<u64>)> {
        Ok((self(x).0, None))
    }
}

#[derive(Clone, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub max_retries: usize,
    /// Largest fraction of coordinates whose `+-h` probes may cross a kink
    /// before the point is re-drawn.
    pub max_kink_fraction: f64,
    pub seed: u64,
}

impl FdConfig {
    pub fn with_step(step: f64) -> Self {
        FdConfig {
            step,
            max_retries: 5,
            max_kink_fraction: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    /// Max over checked coordinates of
    /// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates skipped because a probe left the linear region.
    pub kink_skipped: usize,
    pub retries: usize,
}

pub fn finite_diff_check<F: ScalarFunction>(f: &mut F, x: &Tensor<f64>, step: f64) -> Result<FdReport> {
    finite_diff_check_with(f, x, &FdConfig::with_step(step))
}

pub fn finite_diff_check_with<F: ScalarFunction>(
    f: &mut F,
    x: &Tensor<f64>,
    cfg: &FdConfig,
) -> Result<FdReport> {
    let h = cfg.step;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for attempt in 0..=cfg.max_retries {
        let point = if attempt == 0 {
            x.clone()
        } else {
            let jitter: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-10.0 * h..10.0 * h)).collect();
            let mut p = x.clone();
            for (v, j) in p.data_mut().iter_mut().zip(jitter) {
                *v += j;
            }
            p
        };
        let (_, analytic) = f.value_and_grad(&point)?;
        let (_, base_fp) = f.value(&point)?;
        let allowed = (cfg.max_kink_fraction * point.len() as f64).floor() as usize;
        let mut probe = point.clone();
        let mut report = FdReport {
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
            kink_skipped: 0,
            retries: attempt,
        };
        for i in 0..point.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let (plus, fp_plus) = f.value(&probe)?;
            probe.data_mut()[i] = orig - h;
            let (minus, fp_minus) = f.value(&probe)?;
            probe.data_mut()[i] = orig;
            if fp_plus != base_fp || fp_minus != base_fp {
                report.kink_skipped += 1;
                if report.kink_skipped > allowed {
                    break;
                }
                continue;
            }
            let central = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = i;
            }
        }
        if report.kink_skipped <= allowed {
            return Ok(report);
        }
    }
    Err(Error::KinkProximity {
        retries: cfg.max_retries,
    })
}
