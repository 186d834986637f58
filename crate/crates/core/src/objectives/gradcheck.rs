//! Central finite-difference check of the training gradient.
//!
//! The transport plan (and, under stop-gradient, the mapping target) is
//! frozen at its value for the unperturbed parameters, which is exactly what
//! the recorded gradient differentiates through.

use ndarray::Array2;

use super::{record_loss, FrozenTerms, LossContext};
use crate::error::Result;
use crate::model::forward::register_params;
use crate::model::{forward_on_tape, ModelConfig, Neighborhoods, Params, Variant};
use crate::tape::Tape;

/// Floor of the relative-error denominator, so entries whose true gradient
/// is zero compare on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub struct Problem<'a> {
    pub features: &'a Array2<f64>,
    pub treatments: &'a [u8],
    pub neighborhoods: &'a Neighborhoods,
    pub model: &'a ModelConfig,
    pub variant: Variant,
    pub ctx: &'a LossContext<f64>,
}

fn evaluate(problem: &Problem<'_>, params: &Params<f64>, frozen: Option<&FrozenTerms<f64>>) -> Result<(f64, FrozenTerms<f64>, Option<Params<f64>>)> {
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params);
    let fv = forward_on_tape(
        &mut tape,
        problem.features,
        problem.treatments,
        problem.neighborhoods,
        &pv,
        problem.model,
        problem.variant,
    )?;
    let rec = record_loss(&mut tape, &fv, problem.ctx, frozen)?;
    let value = tape.scalar(rec.total);
    let grads = if frozen.is_none() {
        let g = tape.backward(rec.total);
        Some(pv.map(|_, v| g.wrt(*v)))
    } else {
        None
    };
    Ok((value, rec.frozen, grads))
}

/// Compares the recorded gradient with central differences of step `h` for every scalar parameter.
pub fn gradient_check(problem: &Problem<'_>, params: &Params<f64>, h: f64) -> Result<GradientCheck> {
    let (_, frozen, grads) = evaluate(problem, params, None)?;
    let grads = grads.expect("gradients requested");
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names = params.names();
    let grad_tensors = grads.tensors();
    for (t, name) in names.iter().enumerate() {
        let len = grad_tensors[t].len();
        for k in 0..len {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                let mut seen = 0;
                p.for_each_mut(|_, m| {
                    if seen == t {
                        let cell = m.iter_mut().nth(k).expect("index in range");
                        *cell += delta;
                    }
                    seen += 1;
                });
                p
            };
            let (plus, _, _) = evaluate(problem, &shifted(h), Some(&frozen))?;
            let (minus, _, _) = evaluate(problem, &shifted(-h), Some(&frozen))?;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = *grad_tensors[t].iter().nth(k).expect("index in range");
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (name.clone(), k);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
