//! Full forward pass, both as plain array code and recorded on a tape.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::ops::{aggregate_adjustment, aggregate_confounder, disentangle, map_counterfactual, mlp_forward};
use super::params::{GdcParams, Mlp, Params};
use super::{ForwardOutputs, ModelConfig, Neighborhoods, Variant};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Real};
use crate::tape::{Activation, Tape, Var};

/// Tape handles of the forward quantities. Predictions and `t_prob` are
/// `N × 1` columns.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub x_a: Var,
    pub x_c: Var,
    pub e_a: Var,
    pub e_c: Var,
    pub e_cf: Var,
    pub e_cf_hat: Var,
    pub residual: Var,
    pub h_f: Var,
    pub h_cf: Var,
    pub y_f: Var,
    pub y_cf: Var,
    pub t_prob: Var,
    pub final_logits: Var,
}

fn check_inputs<T: Real>(x: ArrayView2<'_, T>, treatments: &[u8], nb: &Neighborhoods) -> Result<()> {
    if x.nrows() != treatments.len() || x.nrows() != nb.num_nodes() {
        return Err(Error::Validation(format!(
            "forward: {} feature rows, {} treatments, {} graph nodes",
            x.nrows(),
            treatments.len(),
            nb.num_nodes()
        )));
    }
    Ok(())
}

/// Treated indicator as an `N × 1` column and its complement.
fn treatment_columns<T: Real>(treatments: &[u8]) -> (Array2<T>, Array2<T>) {
    let t = Array2::from_shape_fn((treatments.len(), 1), |(i, _)| T::lit(f64::from(treatments[i])));
    let c = t.mapv(|v| T::one() - v);
    (t, c)
}

/// Evaluates the model without recording gradients.
pub fn forward<T: Real>(
    x: &Array2<T>,
    treatments: &[u8],
    nb: &Neighborhoods,
    params: &Params<T>,
    config: &ModelConfig,
    variant: Variant,
) -> Result<ForwardOutputs<T>> {
    check_inputs(x.view(), treatments, nb)?;
    let (x_a, x_c) = match variant {
        Variant::NoDisentangle => (x.clone(), x.clone()),
        _ => {
            let d = disentangle(x.view(), &params.mask)?;
            (d.x_a, d.x_c)
        }
    };
    let (e_a, attention) = aggregate_adjustment(x_a.view(), nb, &params.agg, config)?;
    let (e_c, e_cf, has_opp) = aggregate_confounder(x_c.view(), nb, &attention.logits, &params.agg, config)?;
    let e_cf_hat = map_counterfactual(x_c.view(), e_a.view(), &params.heads.g)?;
    let residual = x_c.dot(&params.agg.p);
    let (h_f, h_cf) = match variant {
        Variant::AdjustmentOnly => (e_a.clone(), e_a.clone()),
        _ => (&e_a + &e_c + &residual, &e_a + &e_cf_hat + &residual),
    };
    let head = |h: &Array2<T>, mlp: &Mlp<Array2<T>>| mlp_forward(h.view(), mlp).index_axis_move(Axis(1), 0);
    let (f1_f, f0_f) = (head(&h_f, &params.heads.f1), head(&h_f, &params.heads.f0));
    let (f1_cf, f0_cf) = (head(&h_cf, &params.heads.f1), head(&h_cf, &params.heads.f0));
    let n = treatments.len();
    let y_f_hat = Array1::from_shape_fn(n, |i| if treatments[i] == 1 { f1_f[i] } else { f0_f[i] });
    let y_cf_hat = Array1::from_shape_fn(n, |i| if treatments[i] == 1 { f0_cf[i] } else { f1_cf[i] });
    let t_prob = head(&e_c, &params.heads.clf).mapv(sigmoid);
    Ok(ForwardOutputs {
        x_a,
        x_c,
        e_a,
        e_c,
        e_cf,
        has_opp,
        e_cf_hat,
        residual,
        h_f,
        h_cf,
        y_f_hat,
        y_cf_hat,
        t_prob,
        attention_logits: attention.logits,
    })
}

/// Registers every parameter tensor as a trainable leaf.
pub fn register_params<T: Real>(tape: &mut Tape<T>, params: &Params<T>) -> GdcParams<Var> {
    params.map(|_, m| tape.param(m.clone()))
}

fn tape_mlp<T: Real>(tape: &mut Tape<T>, x: Var, mlp: &Mlp<Var>) -> Var {
    let h = tape.affine(x, mlp.w1, mlp.b1);
    let h = tape.act(h, Activation::Relu);
    tape.affine(h, mlp.w2, mlp.b2)
}

/// Records the forward pass on `tape` using registered parameters `pv`.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: &Array2<T>,
    treatments: &[u8],
    nb: &Neighborhoods,
    pv: &GdcParams<Var>,
    config: &ModelConfig,
    variant: Variant,
) -> Result<ForwardVars> {
    check_inputs(x.view(), treatments, nb)?;
    let act = config.nonlinearity.activation::<T>();
    let leak = T::lit(config.attention_leak);

    let (x_a, x_c) = match variant {
        Variant::NoDisentangle => {
            let xv = tape.constant(x.clone());
            (xv, xv)
        }
        _ => {
            let xv = tape.constant(x.clone());
            let h = tape.affine(xv, pv.mask.w1, pv.mask.b1);
            let h = tape.act(h, Activation::Relu);
            let z = tape.affine(h, pv.mask.w2, pv.mask.b2);
            let m_c = tape.act(z, Activation::Sigmoid);
            let neg = tape.scale(z, -T::one());
            let m_a = tape.act(neg, Activation::Sigmoid);
            (tape.mul_const(m_a, x.clone()), tape.mul_const(m_c, x.clone()))
        }
    };

    let mut h = x_a;
    let mut logits = None;
    for (&w, &att) in pv.agg.w_a.iter().zip(&pv.agg.att) {
        let z = tape.matmul(h, w);
        let e = tape.edge_logits(z, att, Rc::clone(&nb.edges), leak);
        let s = tape.neighbor_sum(e, z, Rc::clone(&nb.edges), Rc::clone(&nb.full));
        h = tape.act(s, act);
        logits = Some(e);
    }
    let e_a = h;
    let final_logits = logits.ok_or_else(|| Error::Config("at least one adjustment layer is required".into()))?;

    let z_c = tape.matmul(x_c, pv.agg.w_c);
    let s = tape.neighbor_sum(final_logits, z_c, Rc::clone(&nb.edges), Rc::clone(&nb.same));
    let e_c = tape.act(s, act);
    let z_cf = match pv.agg.w_cf {
        Some(w) => tape.matmul(x_c, w),
        None => z_c,
    };
    let s = tape.neighbor_sum(final_logits, z_cf, Rc::clone(&nb.edges), Rc::clone(&nb.opposite));
    let s = tape.act(s, act);
    let e_cf = tape.row_mask(s, Rc::clone(&nb.has_opp));

    let g_in = tape.concat_cols(x_c, e_a);
    let e_cf_hat = tape_mlp(tape, g_in, &pv.heads.g);
    let residual = tape.matmul(x_c, pv.agg.p);
    let (h_f, h_cf) = match variant {
        Variant::AdjustmentOnly => (e_a, e_a),
        _ => {
            let a = tape.add(e_a, e_c);
            let b = tape.add(e_a, e_cf_hat);
            (tape.add(a, residual), tape.add(b, residual))
        }
    };

    let (t_col, c_col) = treatment_columns::<T>(treatments);
    let f1_f = tape_mlp(tape, h_f, &pv.heads.f1);
    let f0_f = tape_mlp(tape, h_f, &pv.heads.f0);
    let a = tape.mul_const(f1_f, t_col.clone());
    let b = tape.mul_const(f0_f, c_col.clone());
    let y_f = tape.add(a, b);
    let f1_cf = tape_mlp(tape, h_cf, &pv.heads.f1);
    let f0_cf = tape_mlp(tape, h_cf, &pv.heads.f0);
    let a = tape.mul_const(f0_cf, t_col);
    let b = tape.mul_const(f1_cf, c_col);
    let y_cf = tape.add(a, b);
    let logit = tape_mlp(tape, e_c, &pv.heads.clf);
    let t_prob = tape.act(logit, Activation::Sigmoid);

    Ok(ForwardVars {
        x_a,
        x_c,
        e_a,
        e_c,
        e_cf,
        e_cf_hat,
        residual,
        h_f,
        h_cf,
        y_f,
        y_cf,
        t_prob,
        final_logits,
    })
}
