//! Finite-difference audit of reverse-mode gradients.
//!
//! Functions are evaluated in `f64`. Each scalar input is perturbed by
//! `±step` and the central difference is compared with the tape gradient:
//!
//! `rel = |analytic − numeric| / max(|analytic|, |numeric|, floor)`
//!
//! `floor` keeps entries whose true gradient is (near) zero from producing
//! meaningless ratios; below it the comparison is absolute, scaled by `floor`.
//!
//! With `kink_step` set, an entry that fails at `step` is re-measured at
//! `kink_step`. If it agrees there, the `±step` stencil straddled a
//! non-differentiable point (an absolute value, a clamp, a ReLU); the entry
//! is excluded and listed in [`GradCheckReport::kinks`].

use thiserror::Error;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub floor: f64,
    pub kink_step: Option<f64>,
}

impl GradCheckConfig {
    pub fn with_tolerance(rel_tol: f64) -> Self {
        Self {
            step: 1e-3,
            rel_tol,
            floor: 1e-3,
            kink_step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entry with the largest relative error.
    pub worst: Option<GradMismatch>,
    pub scalars_checked: usize,
    /// Largest relative error per input, in input order.
    pub per_input: Vec<(String, f64)>,
    /// Entries excluded because the stencil straddled a kink; `numeric` is
    /// the central difference at `step`.
    pub kinks: Vec<GradMismatch>,
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(
        "gradient of `{}`[{}] off by {:.3e} relative (analytic {:.6e}, numeric {:.6e})",
        .0.input, .0.index, .0.rel_error, .0.analytic, .0.numeric
    )]
    Mismatch(GradMismatch, GradCheckReport),

    #[error("checked function must return a single value, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[(String, Tensor<f64>)]) -> Result<f64, GradCheckError>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> crate::Result<Var<'g, f64>>,
{
    let g = Graph::<f64>::inference();
    let vars: Vec<_> = inputs.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    if out.value().numel() != 1 {
        return Err(GradCheckError::NotScalar(out.shape().to_vec()));
    }
    Ok(out.item())
}

/// Compares tape gradients of `f` against central differences for every
/// scalar of every input.
pub fn check_gradients<F>(
    f: F,
    inputs: &[(String, Tensor<f64>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> crate::Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let out = f(&g, &vars)?;
        if out.value().numel() != 1 {
            return Err(GradCheckError::NotScalar(out.shape().to_vec()));
        }
        let grads = g.backward(&out);
        vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    };

    let mut work: Vec<(String, Tensor<f64>)> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        scalars_checked: 0,
        per_input: Vec::with_capacity(inputs.len()),
        kinks: Vec::new(),
    };
    let central = |work: &mut Vec<(String, Tensor<f64>)>, i: usize, j: usize, h: f64| {
        let orig = work[i].1.data()[j];
        work[i].1.data_mut()[j] = orig + h;
        let plus = evaluate(&f, work);
        work[i].1.data_mut()[j] = orig - h;
        let minus = evaluate(&f, work);
        work[i].1.data_mut()[j] = orig;
        Ok::<f64, GradCheckError>((plus? - minus?) / (2.0 * h))
    };
    for (i, (name, _)) in inputs.iter().enumerate() {
        let mut input_max = 0.0f64;
        for j in 0..inputs[i].1.numel() {
            let numeric = central(&mut work, i, j, cfg.step)?;
            let a = analytic[i].data()[j];
            let mut rel = relative_error(a, numeric, cfg.floor);
            report.scalars_checked += 1;
            if let Some(h) = cfg.kink_step.filter(|_| rel > cfg.rel_tol) {
                let fine = central(&mut work, i, j, h)?;
                if relative_error(a, fine, cfg.floor) <= cfg.rel_tol {
                    report.kinks.push(GradMismatch {
                        input: name.clone(),
                        index: j,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                    rel = 0.0;
                }
            }
            input_max = input_max.max(rel);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(GradMismatch {
                    input: name.clone(),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_input.push((name.clone(), input_max));
    }
    if report.max_rel_error > cfg.rel_tol {
        let worst = report.worst.clone().expect("at least one scalar checked");
        return Err(GradCheckError::Mismatch(worst, report));
    }
    Ok(report)
}
