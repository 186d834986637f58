//! Full-batch training.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationalDataset;
use crate::error::{Error, Result};
use crate::graph::SplitIndex;
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::register_params;
use crate::model::params::is_bias;
use crate::model::{forward, forward_on_tape, init_params, predict_ite, ModelConfig, Neighborhoods, Nonlinearity, Params, Variant};
use crate::objectives::{prediction_loss, record_loss, LossBreakdown, LossContext, LossWeights, SinkhornConfig};
use crate::scalar::Real;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: Variant,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub sinkhorn: SinkhornConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            variant: Variant::Full,
            split: [0.6, 0.2, 0.2],
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        self.weights.validate()?;
        self.sinkhorn.validate()
    }

    /// Loss weights after the variant has disabled its terms.
    pub fn effective_weights(&self) -> LossWeights {
        match self.variant {
            Variant::AdjustmentOnly => LossWeights {
                w2: 0.0,
                w3: 0.0,
                ..self.weights
            },
            _ => self.weights,
        }
    }
}

/// Affine map between raw outcomes and the scale the network is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    /// Mean and population standard deviation over `index`; a zero spread maps to 1.
    pub fn fit<T: Real>(y: &Array1<T>, index: &[usize]) -> Self {
        let n = index.len().max(1) as f64;
        let mean = index.iter().map(|&i| y[i].to_f64_lossy()).sum::<f64>() / n;
        let var = index.iter().map(|&i| (y[i].to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn apply<T: Real>(&self, y: &Array1<T>) -> Array1<T> {
        let (m, s) = (T::lit(self.mean), T::lit(self.std));
        y.mapv(|v| (v - m) / s)
    }

    pub fn invert<T: Real>(&self, y: &Array1<T>) -> Array1<T> {
        let (m, s) = (T::lit(self.mean), T::lit(self.std));
        y.mapv(|v| v * s + m)
    }
}

/// Trained parameters with everything needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel<T: Real> {
    pub params: Params<T>,
    pub model: ModelConfig,
    pub variant: Variant,
    pub standardization: Standardization,
}

/// Predictions in outcome units.
#[derive(Debug, Clone)]
pub struct Predictions<T: Real> {
    pub y_f: Array1<T>,
    pub y_cf: Array1<T>,
    pub tau_hat: Array1<T>,
    pub outputs: crate::model::ForwardOutputs<T>,
}

const STANDARDIZATION_TENSOR: &str = "outcome.standardization";

impl<T: Real> FittedModel<T> {
    pub fn predict(&self, dataset: &ObservationalDataset<T>) -> Result<Predictions<T>> {
        let nb = Neighborhoods::new(&dataset.graph, &dataset.treatments)?;
        self.predict_with(dataset, &nb)
    }

    pub fn predict_with(&self, dataset: &ObservationalDataset<T>, nb: &Neighborhoods) -> Result<Predictions<T>> {
        let outputs = forward(&dataset.features, &dataset.treatments, nb, &self.params, &self.model, self.variant)?;
        let y_f = self.standardization.invert(&outputs.y_f_hat);
        let y_cf = self.standardization.invert(&outputs.y_cf_hat);
        let tau_hat = predict_ite(&y_f, &y_cf, &dataset.treatments);
        Ok(Predictions {
            y_f,
            y_cf,
            tau_hat,
            outputs,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let m = &self.model;
        let metadata = [
            ("variant", self.variant.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("mask_hidden", m.mask_hidden.to_string()),
            ("adjustment_layers", m.adjustment_layers.to_string()),
            ("nonlinearity", nonlinearity_name(m.nonlinearity).to_string()),
            ("head_hidden", m.head_hidden.to_string()),
            ("attention_leak", m.attention_leak.to_string()),
            ("tie_cf_weights", m.tie_cf_weights.to_string()),
            ("cf_target_gradient", m.cf_target_gradient.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let mut tensors = self.params.named();
        let s = Array2::from_shape_vec(
            (1, 2),
            vec![T::lit(self.standardization.mean), T::lit(self.standardization.std)],
        )
        .expect("two entries");
        tensors.push((STANDARDIZATION_TENSOR.to_string(), s));
        Checkpoint { metadata, tensors }
    }

    /// Rebuilds a model for `num_features` inputs from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint<f64>, num_features: usize) -> Result<Self> {
        let get = |key: &str| {
            ck.meta(key)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks metadata {key:?}")))
        };
        fn parse<V: std::str::FromStr>(key: &str, s: &str) -> Result<V> {
            s.trim()
                .parse()
                .map_err(|_| Error::Validation(format!("checkpoint metadata {key} has invalid value {s:?}")))
        }
        let model = ModelConfig {
            hidden_dim: parse("hidden_dim", get("hidden_dim")?)?,
            mask_hidden: parse("mask_hidden", get("mask_hidden")?)?,
            adjustment_layers: parse("adjustment_layers", get("adjustment_layers")?)?,
            nonlinearity: parse_nonlinearity(get("nonlinearity")?)?,
            head_hidden: parse("head_hidden", get("head_hidden")?)?,
            attention_leak: parse("attention_leak", get("attention_leak")?)?,
            tie_cf_weights: parse("tie_cf_weights", get("tie_cf_weights")?)?,
            cf_target_gradient: parse("cf_target_gradient", get("cf_target_gradient")?)?,
        };
        let variant: Variant = get("variant")?.trim().parse()?;
        let template: Params<f64> = init_params(&model, num_features, 0)?;
        let (param_tensors, rest): (Vec<_>, Vec<_>) = ck
            .tensors
            .iter()
            .cloned()
            .partition(|(name, _)| name != STANDARDIZATION_TENSOR);
        let params = Params::from_named(&template, &param_tensors)?;
        let standardization = match rest.first() {
            Some((_, t)) if t.dim() == (1, 2) => Standardization {
                mean: t[[0, 0]],
                std: t[[0, 1]],
            },
            Some(_) => return Err(Error::Validation("malformed outcome standardisation tensor".into())),
            None => Standardization::identity(),
        };
        Ok(Self {
            params: params.map(|_, m| m.mapv(T::lit)),
            model,
            variant,
            standardization,
        })
    }
}

fn nonlinearity_name(n: Nonlinearity) -> &'static str {
    match n {
        Nonlinearity::Elu => "elu",
        Nonlinearity::Relu => "relu",
        Nonlinearity::Tanh => "tanh",
        Nonlinearity::Sigmoid => "sigmoid",
    }
}

fn parse_nonlinearity(s: &str) -> Result<Nonlinearity> {
    match s.trim() {
        "elu" => Ok(Nonlinearity::Elu),
        "relu" => Ok(Nonlinearity::Relu),
        "tanh" => Ok(Nonlinearity::Tanh),
        "sigmoid" => Ok(Nonlinearity::Sigmoid),
        other => Err(Error::Validation(format!("unknown nonlinearity {other:?}"))),
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Prediction loss on validation units (diagnostic only).
    pub val_prediction: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel<T: Real> {
    pub fitted: FittedModel<T>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

/// Adam with decoupled weight decay on non-bias tensors.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub learning_rate: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Params<T>,
    v: Params<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Params<T>, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate: T::lit(learning_rate),
            weight_decay: T::lit(weight_decay),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: params.zeroed(),
            v: params.zeroed(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        self.step += 1;
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.learning_rate, self.weight_decay, self.eps);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let names = params.names();
        let g = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, g), m), v), name) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs).zip(&names) {
            let decay = if is_bias(name) { T::zero() } else { wd };
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = *p - lr * (update + decay * *p);
            });
        }
    }
}

/// Fits the model on the training rows of `split`.
pub fn train<T: Real>(
    dataset: &ObservationalDataset<T>,
    split: &SplitIndex,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainedModel<T>> {
    dataset.validate()?;
    model.validate()?;
    config.validate()?;
    if split.len() != dataset.num_units() {
        return Err(Error::Validation(format!(
            "split covers {} units, dataset has {}",
            split.len(),
            dataset.num_units()
        )));
    }
    let nb = Neighborhoods::new(&dataset.graph, &dataset.treatments)?;
    let standardization = Standardization::fit(&dataset.outcomes, &split.train);
    let y = standardization.apply(&dataset.outcomes);
    let ctx = LossContext::new(
        &y,
        &dataset.treatments,
        &nb.has_opp,
        &split.train,
        config.effective_weights(),
        config.sinkhorn.clone(),
        model.cf_target_gradient,
    )?;
    let mut params: Params<T> = init_params(model, dataset.num_features(), config.seed)?;
    let mut adam = Adam::new(&params, config.learning_rate, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let started = Instant::now();
    let mut ctx = ctx;
    for epoch in 0..config.epochs {
        ctx.sinkhorn.seed = config.sinkhorn.seed.wrapping_add(epoch as u64);
        let mut tape = Tape::new();
        let pv = register_params(&mut tape, &params);
        let fv = forward_on_tape(&mut tape, &dataset.features, &dataset.treatments, &nb, &pv, model, config.variant)?;
        let rec = record_loss(&mut tape, &fv, &ctx, None).map_err(|e| match e {
            Error::Numeric(detail) => Error::Diverged { epoch, detail },
            other => other,
        })?;
        if !rec.breakdown.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: rec.breakdown.to_string(),
            });
        }
        let y_f = tape.value(fv.y_f).index_axis(Axis(1), 0).to_owned();
        let val_prediction = if split.val.is_empty() {
            0.0
        } else {
            prediction_loss(&y_f, &y, &split.val).to_f64_lossy()
        };
        let grads = tape.backward(rec.total);
        let g = pv.map(|_, v| grads.wrt(*v));
        drop(tape);
        adam.step(&mut params, &g);
        let record = EpochRecord {
            epoch,
            loss: rec.breakdown,
            val_prediction,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: {}", record.loss);
        history.push(record);
    }
    Ok(TrainedModel {
        fitted: FittedModel {
            params,
            model: model.clone(),
            variant: config.variant,
            standardization,
        },
        config: config.clone(),
        history,
    })
}
