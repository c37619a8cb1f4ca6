//! Central finite-difference verification of reverse-mode gradients.
//!
//! This path only ever evaluates the forward pass, so it stays independent
//! of the backward rules it checks.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::rng::indexed_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on coordinates checked per input; 0 checks all of them.
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_coords_per_input: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_diff: f64,
    /// max |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_diff: f64,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_diff <= tol
    }
}

/// Compares reverse-mode gradients of a scalar-valued builder against
/// central finite differences over the given leaf inputs.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = points.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &ids)?;
        g.value(out).item()
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_abs_diff: 0.0,
        max_rel_diff: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len()).collect();
        if opts.max_coords_per_input > 0 && coords.len() > opts.max_coords_per_input {
            let mut rng = indexed_rng(opts.seed, "gradcheck", &[ti as u64]);
            coords.shuffle(&mut rng);
            coords.truncate(opts.max_coords_per_input);
        }
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + opts.eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[c] = orig - opts.eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[ti].data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            report.max_abs_diff = report.max_abs_diff.max(abs);
            report.max_rel_diff = report.max_rel_diff.max(rel);
        }
    }
    Ok(report)
}
