//! Deterministic 2-D projection of learned embeddings.
//!
//! Principal axes come from power iteration on the covariance of the stacked
//! embeddings, with each axis signed so its first nonzero loading is positive.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardOutputs;
use crate::scalar::Real;

const POWER_ITERS: usize = 5000;
const POWER_TOL: f64 = 1e-12;
const LOADING_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Confounder,
    CfConfounder,
    Adjustment,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Confounder => "confounder",
            EmbeddingKind::CfConfounder => "cf_confounder",
            EmbeddingKind::Adjustment => "adjustment",
        }
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub embedding_kind: EmbeddingKind,
    pub treatment: u8,
}

fn flip_sign(v: &mut Array1<f64>) {
    if let Some(&first) = v.iter().find(|x| x.abs() > LOADING_ZERO) {
        if first < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
}

/// Top `k` principal axes of the rows of `data`, as columns of a `d × k` matrix.
///
/// Axes beyond the rank of the centred data come back as zero columns.
pub fn principal_axes(data: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let (n, d) = data.dim();
    if n == 0 || d == 0 {
        return Err(Error::Argument("cannot project an empty matrix".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centred = data - &mean;
    let mut cov = centred.t().dot(&centred) / n as f64;
    let scale = cov.diag().iter().fold(0.0f64, |m, &x| m.max(x));
    let mut axes = Array2::zeros((d, k));
    for j in 0..k.min(d) {
        // fixed non-degenerate start keeps the result reproducible
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i as f64 + 1.0).sqrt().fract());
        v /= v.dot(&v).sqrt();
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm <= scale * 1e-14 || norm == 0.0 {
                lambda = 0.0;
                break;
            }
            let next = w / norm;
            let delta = (&next - &v).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
            v = next;
            lambda = norm;
            if delta < POWER_TOL {
                break;
            }
        }
        if lambda == 0.0 {
            break;
        }
        flip_sign(&mut v);
        let vv = v.view().insert_axis(Axis(1));
        cov -= &(vv.dot(&vv.t()) * lambda);
        axes.column_mut(j).assign(&v);
    }
    Ok(axes)
}

/// Stacks `E_c` (control rows then treated rows), valid `E_cf` rows and
/// `E_a`, and projects them onto their top two principal axes.
pub fn project_embeddings<T: Real>(outputs: &ForwardOutputs<T>, treatments: &[u8]) -> Result<Vec<ProjectedPoint>> {
    let n = treatments.len();
    let dims = [outputs.e_c.dim(), outputs.e_cf.dim(), outputs.e_a.dim()];
    if dims.iter().any(|&(rows, _)| rows != n) || outputs.has_opp.len() != n {
        return Err(Error::Validation(format!(
            "embeddings have {:?} rows, expected {n}",
            dims.map(|d| d.0)
        )));
    }
    let width = dims[0].1;
    if dims.iter().any(|&(_, c)| c != width) {
        return Err(Error::Validation(format!(
            "embedding widths differ: {:?}",
            dims.map(|d| d.1)
        )));
    }
    let mut rows: Vec<(EmbeddingKind, usize)> = Vec::new();
    for t in [0u8, 1] {
        rows.extend((0..n).filter(|&i| treatments[i] == t).map(|i| (EmbeddingKind::Confounder, i)));
    }
    rows.extend((0..n).filter(|&i| outputs.has_opp[i]).map(|i| (EmbeddingKind::CfConfounder, i)));
    rows.extend((0..n).map(|i| (EmbeddingKind::Adjustment, i)));

    let mut stacked = Array2::<f64>::zeros((rows.len(), width));
    for (r, &(kind, i)) in rows.iter().enumerate() {
        let src = match kind {
            EmbeddingKind::Confounder => &outputs.e_c,
            EmbeddingKind::CfConfounder => &outputs.e_cf,
            EmbeddingKind::Adjustment => &outputs.e_a,
        };
        stacked
            .row_mut(r)
            .assign(&src.row(i).mapv(|x| x.to_f64_lossy()));
    }
    let axes = principal_axes(&stacked, 2)?;
    let mean = stacked.mean_axis(Axis(0)).expect("non-empty");
    let coords = (stacked - &mean).dot(&axes);
    Ok(rows
        .iter()
        .enumerate()
        .map(|(r, &(kind, i))| ProjectedPoint {
            x: coords[[r, 0]],
            y: coords[[r, 1]],
            embedding_kind: kind,
            treatment: treatments[i],
        })
        .collect())
}

/// Distance between the treated and control centroids of one embedding kind.
///
/// `None` when either group has no points.
pub fn centroid_separation(points: &[ProjectedPoint], kind: EmbeddingKind) -> Option<f64> {
    let mut sums = [[0.0f64; 3]; 2];
    for p in points.iter().filter(|p| p.embedding_kind == kind) {
        let s = &mut sums[usize::from(p.treatment.min(1))];
        s[0] += p.x;
        s[1] += p.y;
        s[2] += 1.0;
    }
    if sums.iter().any(|s| s[2] == 0.0) {
        return None;
    }
    let c = sums.map(|s| [s[0] / s[2], s[1] / s[2]]);
    Some(((c[0][0] - c[1][0]).powi(2) + (c[0][1] - c[1][1]).powi(2)).sqrt())
}

/// Fraction of total variance captured by each returned axis, for diagnostics.
pub fn explained_variance(data: &Array2<f64>, axes: &Array2<f64>) -> Array1<f64> {
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centred = data - &mean;
    let total: f64 = centred.iter().map(|x| x * x).sum();
    let proj = centred.dot(axes);
    let per: Array1<f64> = proj.map_axis(Axis(0), |c| c.iter().map(|x| x * x).sum::<f64>());
    if total == 0.0 {
        return Array1::zeros(per.len());
    }
    per / total
}
