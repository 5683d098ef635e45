//! Central finite-difference gradient checking in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeRef};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    pub max_rel_error: f64,
    /// which coordinate produced it, e.g. `input 1 [7]` or `param W [3]`
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare the analytic gradient of `build` against central differences.
///
/// `build` receives the graph and one variable node per entry of `inputs`
/// and returns any node; the checked scalar is a fixed random projection
/// of that node, so every output coordinate contributes. Gradients are
/// checked for every input coordinate and every parameter already
/// registered in `g`. The graph is reseeded with `seed` before each build,
/// so stochastic ops see identical masks across evaluations.
pub fn check<F>(g: &mut Graph<f64>, inputs: &[Tensor<f64>], eps: f64, seed: u64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeRef]) -> Result<NodeRef>,
{
    let mut inputs: Vec<Tensor<f64>> = inputs.to_vec();
    let mut weights: Option<Tensor<f64>> = None;

    let mut eval = |g: &mut Graph<f64>, inputs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        g.clear();
        g.seed(seed);
        let vars = inputs
            .iter()
            .map(|t| g.variable(t))
            .collect::<Result<Vec<_>>>()?;
        let out = build(g, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let data = (0..out.shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_shape(out.shape, data).expect("matching shape")
        });
        let wn = g.input(w)?;
        let prod = g.mul(out, wn)?;
        let loss = g.sum_all(prod)?;
        g.forward()?;
        let value = g.value(loss)?.item()?;
        let mut grads = Vec::new();
        if grad {
            g.zero_grads();
            g.backward(loss)?;
            for v in &vars {
                grads.push(g.grad(*v)?);
            }
        }
        Ok((value, grads))
    };

    let (_, input_grads) = eval(g, &inputs, true)?;
    let names: Vec<String> = g.param_names().map(str::to_string).collect();
    let param_grads = names
        .iter()
        .map(|n| g.param_grad(n))
        .collect::<Result<Vec<_>>>()?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let note = |report: &mut GradReport, a: f64, n: f64, at: String| {
        let e = rel_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = format!("{at}: analytic {a:.8e}, numeric {n:.8e}");
        }
    };

    for k in 0..inputs.len() {
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            inputs[k].data_mut()[j] = orig + eps;
            let (plus, _) = eval(g, &inputs, false)?;
            inputs[k].data_mut()[j] = orig - eps;
            let (minus, _) = eval(g, &inputs, false)?;
            inputs[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            note(&mut report, input_grads[k].data()[j], numeric, format!("input {k} [{j}]"));
        }
    }
    for (name, analytic) in names.iter().zip(&param_grads) {
        for j in 0..analytic.numel() {
            let orig = g.param_value_slice(name)?[j];
            g.param_value_mut(name)?[j] = orig + eps;
            let (plus, _) = eval(g, &inputs, false)?;
            g.param_value_mut(name)?[j] = orig - eps;
            let (minus, _) = eval(g, &inputs, false)?;
            g.param_value_mut(name)?[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            note(&mut report, analytic.data()[j], numeric, format!("param {name} [{j}]"));
        }
    }
    g.clear();
    Ok(report)
}
