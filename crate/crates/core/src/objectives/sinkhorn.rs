//! Entropic optimal transport between two point clouds with uniform weights.
//!
//! Scaling iterations run on the Gibbs kernel `exp(-C/ε)` while it is
//! representable, and switch to log-domain potentials otherwise.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::pairwise_distances;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    /// Larger groups are replaced by a seeded uniform subsample of this size.
    pub max_points_per_group: usize,
    pub seed: u64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 200,
            convergence_tol: 1e-6,
            max_points_per_group: 512,
            seed: 0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.epsilon.is_finite()
            && self.max_iters > 0
            && self.convergence_tol > 0.0
            && self.max_points_per_group > 0;
        if !ok {
            return Err(Error::Config(format!("sinkhorn settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Converged coupling between the (possibly subsampled) rows of two sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    /// Rows of the first input that take part, in plan-row order.
    pub rows_a: Vec<usize>,
    pub rows_b: Vec<usize>,
    pub plan: Array2<T>,
    pub cost: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Keeps every index when `n <= cap`, otherwise a sorted seeded subsample.
pub fn subsample(n: usize, cap: usize, seed: u64, stream: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx = sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

fn cost_matrix<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, rows_a: &[usize], rows_b: &[usize]) -> Array2<T> {
    pairwise_distances(a.select(Axis(0), rows_a).view(), b.select(Axis(0), rows_b).view())
}

/// Solves the entropic transport problem between rows of `a` and `b`.
pub fn sinkhorn_plan<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, cfg: &SinkhornConfig) -> Result<TransportPlan<T>> {
    cfg.validate()?;
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Argument("transport needs two non-empty point sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Validation(format!(
            "point sets have dimensions {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite coordinates in transport input".into()));
    }
    let rows_a = subsample(a.nrows(), cfg.max_points_per_group, cfg.seed, 0);
    let rows_b = subsample(b.nrows(), cfg.max_points_per_group, cfg.seed, 1);
    let cost = cost_matrix(a, b, &rows_a, &rows_b);
    let eps = T::lit(cfg.epsilon);
    let c_max = cost.iter().copied().fold(T::zero(), T::max);
    let (plan, iterations, converged) = if c_max / eps < T::exp_headroom() {
        kernel_iterations(&cost, eps, cfg)
    } else {
        log_iterations(&cost, eps, cfg)
    };
    let total = (&plan * &cost).sum();
    if !total.is_finite() {
        return Err(Error::Numeric("transport cost is not finite".into()));
    }
    Ok(TransportPlan {
        rows_a,
        rows_b,
        plan,
        cost: total,
        iterations,
        converged,
    })
}

/// `⟨π, C⟩` for the entropic plan between the rows of `a` and `b`.
pub fn sinkhorn_wasserstein<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>, cfg: &SinkhornConfig) -> Result<T> {
    Ok(sinkhorn_plan(a, b, cfg)?.cost)
}

fn kernel_iterations<T: Real>(cost: &Array2<T>, eps: T, cfg: &SinkhornConfig) -> (Array2<T>, usize, bool) {
    let (m, n) = cost.dim();
    let mu = T::one() / T::lit(m as f64);
    let nu = T::one() / T::lit(n as f64);
    let tol = T::lit(cfg.convergence_tol);
    let kernel = cost.mapv(|c| (-c / eps).exp());
    let mut u = Array1::from_elem(m, T::one());
    let mut v = Array1::from_elem(n, T::one());
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        let kv = kernel.dot(&v);
        u = kv.mapv(|x| mu / x);
        let ktu = kernel.t().dot(&u);
        v = ktu.mapv(|x| nu / x);
        // columns now match exactly; measure the row marginals
        let kv = kernel.dot(&v);
        let violation: T = u.iter().zip(&kv).map(|(&ui, &k)| (ui * k - mu).abs()).sum();
        if violation < tol {
            converged = true;
            break;
        }
    }
    let mut plan = kernel;
    for (i, mut row) in plan.rows_mut().into_iter().enumerate() {
        let ui = u[i];
        for (x, &vj) in row.iter_mut().zip(&v) {
            *x = ui * *x * vj;
        }
    }
    (plan, iterations, converged)
}

fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

fn log_iterations<T: Real>(cost: &Array2<T>, eps: T, cfg: &SinkhornConfig) -> (Array2<T>, usize, bool) {
    let (m, n) = cost.dim();
    let log_mu = -T::lit(m as f64).ln();
    let log_nu = -T::lit(n as f64).ln();
    let mu = log_mu.exp();
    let tol = T::lit(cfg.convergence_tol);
    let mut f = Array1::<T>::zeros(m);
    let mut g = Array1::<T>::zeros(n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..m {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - cost[[i, j]]) / eps));
            f[i] = eps * (log_mu - lse);
        }
        for j in 0..n {
            let lse = log_sum_exp((0..m).map(|i| (f[i] - cost[[i, j]]) / eps));
            g[j] = eps * (log_nu - lse);
        }
        let mut violation = T::zero();
        for i in 0..m {
            let row = log_sum_exp((0..n).map(|j| (f[i] + g[j] - cost[[i, j]]) / eps)).exp();
            violation += (row - mu).abs();
        }
        if violation < tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((m, n), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / eps).exp());
    (plan, iterations, converged)
}

/// Exact 1-D Wasserstein-1 distance between equally sized samples.
pub fn exact_wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "sorted coupling needs equal sizes");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
