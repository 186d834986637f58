//! Semi-synthetic networked benchmark generator.
//!
//! Each unit gets a Dirichlet topic mixture. Units are linked preferentially
//! to units with similar topics, features are a noisy non-negative lift of
//! the topics, and both treatment and outcome depend on the unit's own topics
//! and on the mean topics of its neighbours. `kappa` scales the neighbour
//! pathway, i.e. how much confounding hides in the network.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{format_real, save_dataset, write_csv, GroundTruth, ObservationalDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::sigmoid;

/// Weight of the topic pathway into potential outcomes.
pub const OUTCOME_TOPIC_SCALE: f64 = 10.0;
/// Standard deviation of the feature noise.
pub const FEATURE_NOISE_STD: f64 = 0.1;
/// Acceptance rate the edge sampler is calibrated to on random pairs.
const BASE_ACCEPTANCE: f64 = 0.05;

const STREAM_TOPICS: u64 = 1;
const STREAM_GRAPH: u64 = 2;
const STREAM_FEATURES: u64 = 3;
const STREAM_TREATMENT: u64 = 4;
const STREAM_OUTCOME: u64 = 5;
const STREAM_OUTCOME_NOISE: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub n_units: usize,
    pub n_features: usize,
    pub n_topics: usize,
    pub dirichlet_alpha: f64,
    pub edge_budget: usize,
    pub kappa: f64,
    pub treatment_scale: f64,
    pub outcome_noise_std: f64,
    pub treatment_effect_base: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_units: 1000,
            n_features: 50,
            n_topics: 10,
            dirichlet_alpha: 0.5,
            edge_budget: 5000,
            kappa: 1.0,
            treatment_scale: 5.0,
            outcome_noise_std: 1.0,
            treatment_effect_base: 4.0,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_units < 2 {
            return fail(format!("n_units must be at least 2, got {}", self.n_units));
        }
        if self.n_topics == 0 || self.n_features == 0 {
            return fail("n_topics and n_features must be positive".into());
        }
        if self.n_topics > self.n_features {
            return fail(format!(
                "n_topics ({}) must not exceed n_features ({})",
                self.n_topics, self.n_features
            ));
        }
        let max_edges = self.n_units * (self.n_units - 1) / 2;
        if self.edge_budget > max_edges {
            return fail(format!(
                "edge_budget {} exceeds the {max_edges} possible pairs",
                self.edge_budget
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return fail(format!("dirichlet_alpha must be positive, got {}", self.dirichlet_alpha));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return fail(format!("kappa must be non-negative, got {}", self.kappa));
        }
        if !(self.outcome_noise_std >= 0.0 && self.outcome_noise_std.is_finite()) {
            return fail(format!(
                "outcome_noise_std must be non-negative, got {}",
                self.outcome_noise_std
            ));
        }
        if !self.treatment_scale.is_finite() || !self.treatment_effect_base.is_finite() {
            return fail("treatment_scale and treatment_effect_base must be finite".into());
        }
        Ok(())
    }
}

/// Output of [`synthesize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedBundle {
    pub dataset: ObservationalDataset<f64>,
    pub truth: GroundTruth<f64>,
    pub propensities: Array1<f64>,
    pub topics: Array2<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// `n × n_topics` matrix of Dirichlet(`alpha`) rows.
pub fn sample_topics(n: usize, n_topics: usize, alpha: f64, seed: u64) -> Result<Array2<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!("alpha must be positive, got {alpha}")));
    }
    if n_topics == 0 {
        return Err(Error::Argument("n_topics must be positive".into()));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = rng_for(seed, STREAM_TOPICS);
    let mut topics = Array2::zeros((n, n_topics));
    for mut row in topics.rows_mut() {
        row.iter_mut().for_each(|x| *x = gamma.sample(&mut rng));
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / n_topics as f64);
        }
    }
    Ok(topics)
}

fn l1(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

fn random_pair(rng: &mut impl Rng, n: usize) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i.min(j), i.max(j))
}

/// Finds `beta` with `mean(exp(-beta * d)) = target` by bisection.
fn calibrate_beta(distances: &[f64], target: f64) -> f64 {
    let rate = |beta: f64| distances.iter().map(|d| (-beta * d).exp()).sum::<f64>() / distances.len() as f64;
    if distances.is_empty() || rate(0.0) <= target {
        return 0.0;
    }
    let mut hi = 1.0;
    while rate(hi) > target && hi < 1e6 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Samples exactly `edge_budget` edges, accepting a proposed pair with
/// probability `exp(-beta * ||θ_i − θ_j||₁)`.
pub fn build_homophilous_graph(topics: &Array2<f64>, edge_budget: usize, seed: u64) -> Result<Graph> {
    let n = topics.nrows();
    let max_edges = n * n.saturating_sub(1) / 2;
    if edge_budget > max_edges {
        return Err(Error::Generation(format!(
            "edge budget {edge_budget} exceeds the {max_edges} possible pairs; use a smaller budget"
        )));
    }
    if edge_budget == 0 {
        return Ok(Graph::empty(n));
    }
    let mut rng = rng_for(seed, STREAM_GRAPH);

    let density = edge_budget as f64 / max_edges as f64;
    let target = (2.0 * density).clamp(BASE_ACCEPTANCE, 1.0);
    let probes = 4000.min(4 * max_edges);
    let distances: Vec<f64> = (0..probes)
        .map(|_| {
            let (i, j) = random_pair(&mut rng, n);
            l1(topics.row(i), topics.row(j))
        })
        .collect();
    let beta = calibrate_beta(&distances, target);

    let max_proposals = (50.0 * edge_budget as f64 / target) as usize + 10_000;
    let mut accepted = BTreeSet::new();
    let mut edges = Vec::with_capacity(edge_budget);
    for _ in 0..max_proposals {
        let (i, j) = random_pair(&mut rng, n);
        let u: f64 = rng.random();
        if accepted.contains(&(i, j)) {
            continue;
        }
        if u < (-beta * l1(topics.row(i), topics.row(j))).exp() {
            accepted.insert((i, j));
            edges.push((i, j));
            if edges.len() == edge_budget {
                return Graph::new(n, edges);
            }
        }
    }
    Err(Error::Generation(format!(
        "reached only {} of {edge_budget} edges after {max_proposals} proposals; use a smaller budget",
        edges.len()
    )))
}

/// `max(0, topics · loading + noise_std · N(0, 1))`.
pub fn lift_topics(topics: &Array2<f64>, loading: &Array2<f64>, noise_std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let mut x = topics.dot(loading);
    if noise_std > 0.0 {
        x.iter_mut()
            .for_each(|v| *v += noise_std * rng.sample::<f64, _>(StandardNormal));
    }
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Bag-of-words stand-in: a fixed non-negative loading of the topics plus noise.
pub fn generate_features(topics: &Array2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    let n_topics = topics.ncols();
    if k < n_topics {
        return Err(Error::Argument(format!(
            "feature dimension {k} is smaller than the number of topics {n_topics}"
        )));
    }
    let mut rng = rng_for(seed, STREAM_FEATURES);
    let loading = Array2::from_shape_fn((n_topics, k), |_| rng.random::<f64>());
    Ok(lift_topics(topics, &loading, FEATURE_NOISE_STD, &mut rng))
}

/// Mean topic vector of each unit's neighbours; the unit's own topics when isolated.
pub fn neighbor_topic_means(topics: &Array2<f64>, graph: &Graph) -> Array2<f64> {
    let mut out = topics.clone();
    for i in 0..graph.num_nodes() {
        let nb = graph.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let mut row = out.row_mut(i);
        row.fill(0.0);
        for &j in nb {
            row += &topics.row(j);
        }
        row /= nb.len() as f64;
    }
    out
}

/// Draws treatments from `sigmoid(s·<w, θ_i − θ̄> + κ·s·<w, ν_i − θ̄>)`.
pub fn assign_treatments(
    topics: &Array2<f64>,
    graph: &Graph,
    kappa: f64,
    scale: f64,
    seed: u64,
) -> Result<(Vec<u8>, Array1<f64>)> {
    if topics.nrows() != graph.num_nodes() {
        return Err(Error::Validation(format!(
            "{} topic rows for {} nodes",
            topics.nrows(),
            graph.num_nodes()
        )));
    }
    let mut rng = rng_for(seed, STREAM_TREATMENT);
    let w = unit_vector(&mut rng, topics.ncols());
    let mean = topics.mean_axis(Axis(0)).expect("non-empty");
    let nu = neighbor_topic_means(topics, graph);
    let own = (topics - &mean).dot(&w);
    let net = (&nu - &mean).dot(&w);
    let p = Array1::from_shape_fn(topics.nrows(), |i| sigmoid(scale * own[i] + kappa * scale * net[i]));
    let t = p.iter().map(|&pi| u8::from(rng.random::<f64>() < pi)).collect();
    Ok((t, p))
}

/// Potential outcomes `c0<w_y, θ_i> + κ c0<w_y, ν_i> + c_t·t·(1 + <w_τ, θ_i>) + ε_i`
/// with noise shared by both arms. Returns the truth and the factual outcomes.
pub fn generate_outcomes(
    topics: &Array2<f64>,
    graph: &Graph,
    treatments: &[u8],
    config: &SynthesisConfig,
) -> Result<(GroundTruth<f64>, Array1<f64>)> {
    let n = topics.nrows();
    if treatments.len() != n {
        return Err(Error::Validation(format!("{} treatments for {n} units", treatments.len())));
    }
    let mut rng = rng_for(config.seed, STREAM_OUTCOME);
    let w_y = unit_vector(&mut rng, topics.ncols());
    let w_tau = unit_vector(&mut rng, topics.ncols());
    let mut noise_rng = rng_for(config.seed, STREAM_OUTCOME_NOISE);
    let noise = Array1::from_shape_fn(n, |_| config.outcome_noise_std * noise_rng.sample::<f64, _>(StandardNormal));

    let nu = neighbor_topic_means(topics, graph);
    let base = topics.dot(&w_y) * OUTCOME_TOPIC_SCALE + nu.dot(&w_y) * (config.kappa * OUTCOME_TOPIC_SCALE) + &noise;
    let tau = (topics.dot(&w_tau) + 1.0) * config.treatment_effect_base;
    let y1 = &base + &tau;
    let y = Array1::from_shape_fn(n, |i| if treatments[i] == 1 { y1[i] } else { base[i] });
    Ok((GroundTruth::from_potential(base, y1)?, y))
}

/// Runs the whole generator. If the draw leaves a treatment group empty the
/// treatment stream is re-drawn (bounded number of attempts).
pub fn synthesize(config: &SynthesisConfig) -> Result<SynthesizedBundle> {
    config.validate()?;
    let topics = sample_topics(config.n_units, config.n_topics, config.dirichlet_alpha, config.seed)?;
    let graph = build_homophilous_graph(&topics, config.edge_budget, config.seed)?;
    let features = generate_features(&topics, config.n_features, config.seed)?;

    let mut assignment = None;
    for attempt in 0..16u64 {
        let seed = config.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (t, p) = assign_treatments(&topics, &graph, config.kappa, config.treatment_scale, seed)?;
        let treated = t.iter().filter(|&&x| x == 1).count();
        if treated > 0 && treated < t.len() {
            assignment = Some((t, p));
            break;
        }
    }
    let (treatments, propensities) = assignment.ok_or_else(|| {
        Error::Generation("every treatment draw left one group empty; lower treatment_scale".into())
    })?;

    let (truth, outcomes) = generate_outcomes(&topics, &graph, &treatments, config)?;
    let dataset = ObservationalDataset::new(graph, features, treatments, outcomes)?;
    Ok(SynthesizedBundle {
        dataset,
        truth,
        propensities,
        topics,
    })
}

/// Writes the bundle plus `propensities.csv` and `topics.csv`.
pub fn write_bundle(bundle: &SynthesizedBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    save_dataset(&bundle.dataset, Some(&bundle.truth), dir)?;
    write_csv(
        &dir.join("propensities.csv"),
        &["p"],
        bundle.propensities.iter().map(|&p| vec![format_real(p)]),
    )?;
    let header: Vec<String> = (0..bundle.topics.ncols()).map(|c| format!("theta{c}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &dir.join("topics.csv"),
        &header,
        bundle
            .topics
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| format_real(v)).collect()),
    )
}
