//! Training objectives.
//!
//! Four terms are combined: outcome prediction error, a transport distance
//! between treated and control adjustment embeddings, treatment
//! cross-entropy of the confounder classifier, and the counterfactual
//! mapping error. Each exists as a plain function of arrays and, in
//! [`record_loss`], as tape operations for training.

pub mod gradcheck;
pub mod sinkhorn;

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardVars;
use crate::scalar::Real;
use crate::tape::{Tape, Var};

pub use sinkhorn::{exact_wasserstein_1d, sinkhorn_plan, sinkhorn_wasserstein, SinkhornConfig, TransportPlan};

/// Probability clamp of the treatment cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Adjustment balance.
    pub w1: f64,
    /// Treatment classification from the confounder embedding.
    pub w2: f64,
    /// Counterfactual confounder mapping.
    pub w3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1e-4,
            w2: 0.01,
            w3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub prediction: f64,
    pub adjustment: f64,
    pub confounder: f64,
    pub cf_confounder: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prediction: f64,
    pub adjustment: f64,
    pub confounder: f64,
    pub cf_confounder: f64,
    pub total: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "prediction={} adjustment={} confounder={} cf_confounder={} total={}",
            self.prediction, self.adjustment, self.confounder, self.cf_confounder, self.total
        )
    }
}

pub fn total_loss(c: LossComponents, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("prediction", c.prediction),
        ("adjustment", c.adjustment),
        ("confounder", c.confounder),
        ("cf_confounder", c.cf_confounder),
    ] {
        if v.is_nan() {
            return Err(Error::Numeric(format!("{name} loss is NaN")));
        }
    }
    Ok(LossBreakdown {
        prediction: c.prediction,
        adjustment: c.adjustment,
        confounder: c.confounder,
        cf_confounder: c.cf_confounder,
        total: c.prediction + weights.w1 * c.adjustment + weights.w2 * c.confounder + weights.w3 * c.cf_confounder,
    })
}

/// Train rows split by treatment arm; errors when an arm is missing.
pub fn arms(treatments: &[u8], index: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (treated, control): (Vec<usize>, Vec<usize>) = index.iter().partition(|&&i| treatments[i] == 1);
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Config(
            "the training split contains a single treatment group; resplit with another seed or ratio".into(),
        ));
    }
    Ok((control, treated))
}

/// Transport plan between control and treated rows of `e_a`, with plan
/// rows and columns mapped back to rows of `e_a`.
pub fn adjustment_plan<T: Real>(
    e_a: ArrayView2<'_, T>,
    treatments: &[u8],
    index: &[usize],
    cfg: &SinkhornConfig,
) -> Result<TransportPlan<T>> {
    let (control, treated) = arms(treatments, index)?;
    let a = e_a.select(ndarray::Axis(0), &control);
    let b = e_a.select(ndarray::Axis(0), &treated);
    let mut plan = sinkhorn_plan(a.view(), b.view(), cfg)?;
    plan.rows_a = plan.rows_a.iter().map(|&r| control[r]).collect();
    plan.rows_b = plan.rows_b.iter().map(|&r| treated[r]).collect();
    Ok(plan)
}

pub fn adjustment_loss<T: Real>(e_a: ArrayView2<'_, T>, treatments: &[u8], index: &[usize], cfg: &SinkhornConfig) -> Result<T> {
    Ok(adjustment_plan(e_a, treatments, index, cfg)?.cost)
}

pub fn confounder_loss<T: Real>(t_prob: &Array1<T>, treatments: &[u8], index: &[usize]) -> T {
    let clamp = T::lit(BCE_CLAMP);
    let mut acc = T::zero();
    for &i in index {
        let p = t_prob[i].max(clamp).min(T::one() - clamp);
        acc -= if treatments[i] == 1 { p.ln() } else { (T::one() - p).ln() };
    }
    acc / T::lit(index.len().max(1) as f64)
}

/// Train rows that have at least one opposite-treatment neighbour; warns when none do.
pub fn mapping_rows(has_opp: &[bool], index: &[usize]) -> Vec<usize> {
    let rows: Vec<usize> = index.iter().copied().filter(|&i| has_opp[i]).collect();
    if rows.is_empty() {
        log::warn!("no training unit has an opposite-treatment neighbour; counterfactual mapping loss is zero");
    }
    rows
}

pub fn cf_confounder_loss<T: Real>(e_cf_hat: &Array2<T>, e_cf: &Array2<T>, has_opp: &[bool], index: &[usize]) -> T {
    let rows = mapping_rows(has_opp, index);
    if rows.is_empty() {
        return T::zero();
    }
    let mut acc = T::zero();
    for &i in &rows {
        acc += e_cf_hat
            .row(i)
            .iter()
            .zip(e_cf.row(i))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
    }
    acc / T::lit((rows.len() * e_cf.ncols().max(1)) as f64)
}

pub fn prediction_loss<T: Real>(y_hat: &Array1<T>, y: &Array1<T>, index: &[usize]) -> T {
    let acc: T = index.iter().map(|&i| (y_hat[i] - y[i]) * (y_hat[i] - y[i])).sum();
    acc / T::lit(index.len().max(1) as f64)
}

/// Fixed inputs of the loss for one dataset and split.
#[derive(Debug, Clone)]
pub struct LossContext<T> {
    /// Outcomes as a column, in the scale the model predicts.
    pub outcomes: Array2<T>,
    pub treatments: Vec<u8>,
    pub index: Rc<Vec<usize>>,
    pub mapping_rows: Rc<Vec<usize>>,
    pub weights: LossWeights,
    pub sinkhorn: SinkhornConfig,
    /// Let the mapping loss backpropagate into its target.
    pub cf_target_gradient: bool,
}

impl<T: Real> LossContext<T> {
    pub fn new(
        outcomes: &Array1<T>,
        treatments: &[u8],
        has_opp: &[bool],
        index: &[usize],
        weights: LossWeights,
        sinkhorn: SinkhornConfig,
        cf_target_gradient: bool,
    ) -> Result<Self> {
        weights.validate()?;
        sinkhorn.validate()?;
        arms(treatments, index)?;
        Ok(Self {
            outcomes: outcomes.clone().insert_axis(ndarray::Axis(1)),
            treatments: treatments.to_vec(),
            index: Rc::new(index.to_vec()),
            mapping_rows: Rc::new(mapping_rows(has_opp, index)),
            weights,
            sinkhorn,
            cf_target_gradient,
        })
    }
}

/// Quantities held constant while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTerms<T> {
    pub plan: TransportPlan<T>,
    /// Mapping target when it is a stop-gradient constant.
    pub cf_target: Option<Array2<T>>,
}

pub struct RecordedLoss<T> {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub frozen: FrozenTerms<T>,
}

/// Records the weighted loss on `tape`. Without `frozen`, the transport plan
/// is solved from the current embeddings and the mapping target taken from
/// the current forward pass.
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    fv: &ForwardVars,
    ctx: &LossContext<T>,
    frozen: Option<&FrozenTerms<T>>,
) -> Result<RecordedLoss<T>> {
    let y = tape.constant(ctx.outcomes.clone());
    let prediction = tape.row_mse(fv.y_f, y, Rc::clone(&ctx.index));

    let plan = match frozen {
        Some(f) => f.plan.clone(),
        None => adjustment_plan(tape.value(fv.e_a).view(), &ctx.treatments, &ctx.index, &ctx.sinkhorn)?,
    };
    let adjustment = tape.transport_cost(fv.e_a, plan.rows_a.clone(), plan.rows_b.clone(), plan.plan.clone());

    let targets: Vec<T> = ctx.treatments.iter().map(|&t| T::lit(f64::from(t))).collect();
    let confounder = tape.bce(fv.t_prob, targets, Rc::clone(&ctx.index), T::lit(BCE_CLAMP));

    let (target, cf_target) = if ctx.cf_target_gradient {
        (fv.e_cf, None)
    } else {
        let value = match frozen.and_then(|f| f.cf_target.clone()) {
            Some(v) => v,
            None => tape.value(fv.e_cf).clone(),
        };
        (tape.constant(value.clone()), Some(value))
    };
    let cf = tape.row_mse(fv.e_cf_hat, target, Rc::clone(&ctx.mapping_rows));

    let w = &ctx.weights;
    let total = tape.weighted_sum(vec![
        (prediction, T::one()),
        (adjustment, T::lit(w.w1)),
        (confounder, T::lit(w.w2)),
        (cf, T::lit(w.w3)),
    ]);
    let components = LossComponents {
        prediction: tape.scalar(prediction).to_f64_lossy(),
        adjustment: tape.scalar(adjustment).to_f64_lossy(),
        confounder: tape.scalar(confounder).to_f64_lossy(),
        cf_confounder: tape.scalar(cf).to_f64_lossy(),
    };
    let breakdown = total_loss(components, w)?;
    Ok(RecordedLoss {
        total,
        breakdown,
        frozen: FrozenTerms { plan, cf_target },
    })
}
