//! Parameter groups of the model.
//!
//! Every group is generic over its element `M`: `Array2<T>` for stored
//! parameters, [`Var`](crate::tape::Var) while a forward pass is being
//! recorded, and the gradient arrays after the backward pass. Biases are
//! stored as `1 × n` rows.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Instance-wise feature mask network `Z = ReLU(X·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams<M> {
    pub w1: M,
    pub b1: M,
    pub w2: M,
    pub b2: M,
}

/// Two-layer perceptron `ReLU(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<M> {
    pub w1: M,
    pub b1: M,
    pub w2: M,
    pub b2: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<M> {
    /// One projection per adjustment layer (`K × d`, then `d × d`).
    pub w_a: Vec<M>,
    /// One `2d × 1` attention vector per adjustment layer.
    pub att: Vec<M>,
    /// Confounder projection `K × d`, shared with the counterfactual
    /// aggregator unless `w_cf` is present.
    pub w_c: M,
    pub w_cf: Option<M>,
    /// Residual projection of the unit's own confounder part, `K × d`.
    pub p: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<M> {
    pub f1: Mlp<M>,
    pub f0: Mlp<M>,
    /// Treatment classifier on the confounder embedding (logit output).
    pub clf: Mlp<M>,
    /// Counterfactual confounder mapping from `[X_c ‖ E_a]`.
    pub g: Mlp<M>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdcParams<M> {
    pub mask: MaskParams<M>,
    pub agg: AggregatorParams<M>,
    pub heads: HeadParams<M>,
}

/// Stored parameters.
pub type Params<T> = GdcParams<Array2<T>>;

impl<M> Mlp<M> {
    fn map<N>(&self, prefix: &str, f: &mut impl FnMut(&str, &M) -> N) -> Mlp<N> {
        Mlp {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut M)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

impl<M> GdcParams<M> {
    /// Applies `f` to every tensor in checkpoint order, keeping the structure.
    pub fn map<N>(&self, mut f: impl FnMut(&str, &M) -> N) -> GdcParams<N> {
        let f = &mut f;
        let mask = MaskParams {
            w1: f("mask.w1", &self.mask.w1),
            b1: f("mask.b1", &self.mask.b1),
            w2: f("mask.w2", &self.mask.w2),
            b2: f("mask.b2", &self.mask.b2),
        };
        let mut w_a = Vec::with_capacity(self.agg.w_a.len());
        let mut att = Vec::with_capacity(self.agg.att.len());
        for (l, (w, a)) in self.agg.w_a.iter().zip(&self.agg.att).enumerate() {
            w_a.push(f(&format!("agg.w_a.{l}"), w));
            att.push(f(&format!("agg.att.{l}"), a));
        }
        let agg = AggregatorParams {
            w_a,
            att,
            w_c: f("agg.w_c", &self.agg.w_c),
            w_cf: self.agg.w_cf.as_ref().map(|w| f("agg.w_cf", w)),
            p: f("agg.p", &self.agg.p),
        };
        let heads = HeadParams {
            f1: self.heads.f1.map("head.f1", f),
            f0: self.heads.f0.map("head.f0", f),
            clf: self.heads.clf.map("head.clf", f),
            g: self.heads.g.map("head.g", f),
        };
        GdcParams { mask, agg, heads }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &M)) {
        self.map(|name, m| f(name, m));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut M)) {
        let f = &mut f;
        f("mask.w1", &mut self.mask.w1);
        f("mask.b1", &mut self.mask.b1);
        f("mask.w2", &mut self.mask.w2);
        f("mask.b2", &mut self.mask.b2);
        for (l, (w, a)) in self.agg.w_a.iter_mut().zip(self.agg.att.iter_mut()).enumerate() {
            f(&format!("agg.w_a.{l}"), w);
            f(&format!("agg.att.{l}"), a);
        }
        f("agg.w_c", &mut self.agg.w_c);
        if let Some(w) = self.agg.w_cf.as_mut() {
            f("agg.w_cf", w);
        }
        f("agg.p", &mut self.agg.p);
        self.heads.f1.for_each_mut("head.f1", f);
        self.heads.f0.for_each_mut("head.f0", f);
        self.heads.clf.for_each_mut("head.clf", f);
        self.heads.g.for_each_mut("head.g", f);
    }

    /// Borrowed tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&M> {
        let mut out = vec![&self.mask.w1, &self.mask.b1, &self.mask.w2, &self.mask.b2];
        for (w, a) in self.agg.w_a.iter().zip(&self.agg.att) {
            out.push(w);
            out.push(a);
        }
        out.push(&self.agg.w_c);
        if let Some(w) = &self.agg.w_cf {
            out.push(w);
        }
        out.push(&self.agg.p);
        for h in [&self.heads.f1, &self.heads.f0, &self.heads.clf, &self.heads.g] {
            out.extend([&h.w1, &h.b1, &h.w2, &h.b2]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut M> {
        let mut out = Vec::new();
        self.for_each_mut_ref(&mut out);
        out
    }

    fn for_each_mut_ref<'a>(&'a mut self, out: &mut Vec<&'a mut M>) {
        let GdcParams { mask, agg, heads } = self;
        out.extend([&mut mask.w1, &mut mask.b1, &mut mask.w2, &mut mask.b2]);
        for (w, a) in agg.w_a.iter_mut().zip(agg.att.iter_mut()) {
            out.push(w);
            out.push(a);
        }
        out.push(&mut agg.w_c);
        if let Some(w) = agg.w_cf.as_mut() {
            out.push(w);
        }
        out.push(&mut agg.p);
        let HeadParams { f1, f0, clf, g } = heads;
        for h in [f1, f0, clf, g] {
            out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
        }
    }

    /// Element-wise pairing of two structurally identical groups.
    pub fn zip_mut<N>(&mut self, other: &GdcParams<N>, mut f: impl FnMut(&str, &mut M, &N)) {
        let others = other.tensors();
        let mut k = 0;
        self.for_each_mut(|name, m| {
            f(name, m, others[k]);
            k += 1;
        });
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|name, _| out.push(name.to_string()));
        out
    }
}

/// Bias tensors are excluded from weight decay.
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b1") || name.ends_with(".b2")
}

impl<T: Real> Params<T> {
    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, m| n += m.len());
        n
    }

    /// Every tensor multiplied by zero; used for degenerate-network checks.
    pub fn zeroed(&self) -> Self {
        self.map(|_, m| Array2::zeros(m.dim()))
    }

    pub fn named(&self) -> Vec<(String, Array2<T>)> {
        let mut out = Vec::new();
        self.for_each(|name, m| out.push((name.to_string(), m.clone())));
        out
    }

    /// Rebuilds parameters from a named list, checking names and shapes
    /// against a freshly initialised template.
    pub fn from_named(template: &Params<T>, tensors: &[(String, Array2<T>)]) -> Result<Self> {
        let names = template.names();
        if names.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                names.len()
            )));
        }
        let mut k = 0;
        let mut err = None;
        let out = template.map(|name, m| {
            let (got_name, value) = &tensors[k];
            k += 1;
            if got_name != name || value.dim() != m.dim() {
                err.get_or_insert_with(|| {
                    Error::Validation(format!(
                        "tensor {got_name} {:?} does not match expected {name} {:?}",
                        value.dim(),
                        m.dim()
                    ))
                });
                return m.clone();
            }
            value.clone()
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::lit(rng.random_range(-bound..bound)))
}

fn mlp<T: Real>(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Mlp<Array2<T>> {
    Mlp {
        w1: uniform(rng, input, hidden, input),
        b1: uniform(rng, 1, hidden, input),
        w2: uniform(rng, hidden, output, hidden),
        b2: uniform(rng, 1, output, hidden),
    }
}

/// Draws every tensor from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_params<T: Real>(config: &ModelConfig, k: usize, seed: u64) -> Result<Params<T>> {
    config.validate()?;
    if k == 0 {
        return Err(Error::Argument("feature dimension must be positive".into()));
    }
    let d = config.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = MaskParams {
        w1: uniform(&mut rng, k, config.mask_hidden, k),
        b1: uniform(&mut rng, 1, config.mask_hidden, k),
        w2: uniform(&mut rng, config.mask_hidden, k, config.mask_hidden),
        b2: uniform(&mut rng, 1, k, config.mask_hidden),
    };
    let mut w_a = Vec::new();
    let mut att = Vec::new();
    for l in 0..config.adjustment_layers {
        let input = if l == 0 { k } else { d };
        w_a.push(uniform(&mut rng, input, d, input));
        att.push(uniform(&mut rng, 2 * d, 1, 2 * d));
    }
    let w_c = uniform(&mut rng, k, d, k);
    let w_cf = if config.tie_cf_weights {
        None
    } else {
        Some(uniform(&mut rng, k, d, k))
    };
    let p = uniform(&mut rng, k, d, k);
    let heads = HeadParams {
        f1: mlp(&mut rng, d, config.head_hidden, 1),
        f0: mlp(&mut rng, d, config.head_hidden, 1),
        clf: mlp(&mut rng, d, config.head_hidden, 1),
        g: mlp(&mut rng, k + d, config.head_hidden, d),
    };
    Ok(GdcParams {
        mask,
        agg: AggregatorParams { w_a, att, w_c, w_cf, p },
        heads,
    })
}
