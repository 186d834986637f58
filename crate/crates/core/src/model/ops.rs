//! Array implementations of the individual model stages.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::{AggregatorParams, MaskParams, Mlp};
use super::{DisentangledFeatures, ModelConfig, Neighborhoods};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Real};
use crate::tape::{edge_scores, group_softmax, Activation, EdgeGroups, EdgeList};

fn check_inner(what: &str, x: ArrayView2<'_, impl Real>, rows: usize) -> Result<()> {
    if x.ncols() != rows {
        return Err(Error::Validation(format!(
            "{what}: input has {} columns, weights expect {rows}",
            x.ncols()
        )));
    }
    Ok(())
}

/// `ReLU(x·W1 + b1)·W2 + b2`.
pub fn mlp_forward<T: Real>(x: ArrayView2<'_, T>, mlp: &Mlp<Array2<T>>) -> Array2<T> {
    let mut h = x.dot(&mlp.w1) + &mlp.b1;
    h.mapv_inplace(|v| v.max(T::zero()));
    h.dot(&mlp.w2) + &mlp.b2
}

/// Splits `x` into adjustment and confounder parts with the learned mask.
pub fn disentangle<T: Real>(x: ArrayView2<'_, T>, mask: &MaskParams<Array2<T>>) -> Result<DisentangledFeatures<T>> {
    check_inner("mask", x, mask.w1.nrows())?;
    if mask.w2.ncols() != x.ncols() {
        return Err(Error::Validation("mask output width differs from feature width".into()));
    }
    let mut h = x.dot(&mask.w1) + &mask.b1;
    h.mapv_inplace(|v| v.max(T::zero()));
    let z = h.dot(&mask.w2) + &mask.b2;
    let mask_c = z.mapv(sigmoid);
    let x_c = &mask_c * &x;
    let x_a = z.mapv(|v| sigmoid(-v)) * x;
    Ok(DisentangledFeatures { x_a, x_c, mask_c })
}

/// Attention logits and weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    /// `LeakyReLU(att·[h_i ‖ h_j])` per edge of the neighbourhood list.
    pub logits: Vec<T>,
    /// Softmax of the logits within each node's full neighbourhood.
    pub weights: Vec<T>,
}

pub fn attention_scores<T: Real>(h_in: ArrayView2<'_, T>, nb: &Neighborhoods, att: &Array2<T>, leak: T) -> Attention<T> {
    let leaky = Activation::LeakyRelu(leak);
    let logits: Vec<T> = edge_scores(h_in, att.view(), &nb.edges)
        .into_iter()
        .map(|s| leaky.apply(s))
        .collect();
    let weights = restricted_weights(&logits, &nb.full);
    Attention { logits, weights }
}

/// Softmax of `logits` within every group, scattered back to edge positions.
/// Edges outside every group get weight 0.
pub fn restricted_weights<T: Real>(logits: &[T], groups: &EdgeGroups) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for i in 0..groups.num_groups() {
        let g = groups.group(i);
        for (&k, w) in g.iter().zip(group_softmax(|k| logits[k], g)) {
            out[k] = w;
        }
    }
    out
}

/// Row `i` is `Σ_{k ∈ group i} w_k · values[source_k]`.
fn weighted_gather<T: Real>(
    values: &Array2<T>,
    weights: &[T],
    edges: &EdgeList,
    groups: &EdgeGroups,
) -> Array2<T> {
    let n = groups.num_groups();
    let mut out = Array2::zeros((n, values.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for &k in groups.group(i) {
            row.scaled_add(weights[k], &values.row(edges.pairs[k].1));
        }
    }
    out
}

/// Stacked attention aggregation of the adjustment part. Returns the
/// embedding and the final layer's attention.
pub fn aggregate_adjustment<T: Real>(
    x_a: ArrayView2<'_, T>,
    nb: &Neighborhoods,
    agg: &AggregatorParams<Array2<T>>,
    config: &ModelConfig,
) -> Result<(Array2<T>, Attention<T>)> {
    let act = config.nonlinearity.activation::<T>();
    let leak = T::lit(config.attention_leak);
    let mut h = x_a.to_owned();
    let mut last = None;
    for (w, att) in agg.w_a.iter().zip(&agg.att) {
        check_inner("adjustment layer", h.view(), w.nrows())?;
        let z = h.dot(w);
        let attention = attention_scores(z.view(), nb, att, leak);
        h = weighted_gather(&z, &attention.weights, &nb.edges, &nb.full).mapv(|v| act.apply(v));
        last = Some(attention);
    }
    let last = last.ok_or_else(|| Error::Config("at least one adjustment layer is required".into()))?;
    Ok((h, last))
}

/// Factual and counterfactual confounder embeddings from the final-layer
/// logits renormalised over the same- and opposite-treatment neighbourhoods.
pub fn aggregate_confounder<T: Real>(
    x_c: ArrayView2<'_, T>,
    nb: &Neighborhoods,
    final_logits: &[T],
    agg: &AggregatorParams<Array2<T>>,
    config: &ModelConfig,
) -> Result<(Array2<T>, Array2<T>, Vec<bool>)> {
    check_inner("confounder aggregator", x_c, agg.w_c.nrows())?;
    let act = config.nonlinearity.activation::<T>();
    let z = x_c.dot(&agg.w_c);
    let same = restricted_weights(final_logits, &nb.same);
    let e_c = weighted_gather(&z, &same, &nb.edges, &nb.same).mapv(|v| act.apply(v));
    let z_cf = match &agg.w_cf {
        Some(w) => x_c.dot(w),
        None => z,
    };
    let opp = restricted_weights(final_logits, &nb.opposite);
    let mut e_cf = weighted_gather(&z_cf, &opp, &nb.edges, &nb.opposite).mapv(|v| act.apply(v));
    let has_opp = nb.has_opp.as_ref().clone();
    for (mut row, &keep) in e_cf.axis_iter_mut(Axis(0)).zip(&has_opp) {
        if !keep {
            row.fill(T::zero());
        }
    }
    Ok((e_c, e_cf, has_opp))
}

/// `g([X_c ‖ E_a])`, the predicted counterfactual confounder.
pub fn map_counterfactual<T: Real>(x_c: ArrayView2<'_, T>, e_a: ArrayView2<'_, T>, g: &Mlp<Array2<T>>) -> Result<Array2<T>> {
    let input = ndarray::concatenate(Axis(1), &[x_c, e_a])
        .map_err(|e| Error::Validation(format!("counterfactual mapping input: {e}")))?;
    check_inner("counterfactual mapping", input.view(), g.w1.nrows())?;
    Ok(mlp_forward(input.view(), g))
}

/// Individual effects from factual and counterfactual predictions.
pub fn predict_ite<T: Real>(y_f_hat: &Array1<T>, y_cf_hat: &Array1<T>, treatments: &[u8]) -> Array1<T> {
    Array1::from_shape_fn(treatments.len(), |i| {
        if treatments[i] == 1 {
            y_f_hat[i] - y_cf_hat[i]
        } else {
            y_cf_hat[i] - y_f_hat[i]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::model::{init_params, Nonlinearity, Params};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn small_config(d: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: d,
            mask_hidden: 5,
            head_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Graph {
        Graph::from_edges_lossy(n, (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))))
    }

    #[test]
    fn zero_mask_halves_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p: Params<f64> = init_params(&small_config(3), 4, 0).unwrap().zeroed();
        let x = rand_mat(&mut rng, 6, 4);
        let dis = disentangle(x.view(), &p.mask).unwrap();
        assert!(dis.mask_c.iter().all(|&m| m == 0.5));
        assert_eq!(dis.x_a, &x / 2.0);
        assert_eq!(dis.x_c, &x / 2.0);
    }

    #[test]
    fn saturated_mask_routes_to_confounder() {
        let mut p: Params<f64> = init_params(&small_config(3), 2, 0).unwrap().zeroed();
        p.mask.b2 = array![[20.0, -20.0]];
        let x = array![[1.0, 1.0]];
        let dis = disentangle(x.view(), &p.mask).unwrap();
        assert!((dis.x_c[[0, 0]] - 1.0).abs() < 1e-8 && dis.x_a[[0, 0]].abs() < 1e-8);
        assert!((dis.x_a[[0, 1]] - 1.0).abs() < 1e-8 && dis.x_c[[0, 1]].abs() < 1e-8);
    }

    #[test]
    fn disentangle_is_complementary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Params<f64> = init_params(&small_config(3), 7, 9).unwrap();
        let x = rand_mat(&mut rng, 30, 7) * 5.0;
        let dis = disentangle(x.view(), &p.mask).unwrap();
        let err = (&dis.x_a + &dis.x_c - &x).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(err < 1e-6);
        assert!(dis.mask_c.iter().all(|&m| m > 0.0 && m < 1.0));
        assert!(disentangle(rand_mat(&mut rng, 3, 6).view(), &p.mask).is_err());
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let g = Graph::new(3, [(0, 1)]).unwrap();
        let nb = Neighborhoods::new(&g, &[0, 1, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = attention_scores(rand_mat(&mut rng, 3, 2).view(), &nb, &rand_mat(&mut rng, 4, 1), 0.2);
        let k = nb.full.group(2);
        assert_eq!(k.len(), 1);
        assert_eq!(att.weights[k[0]], 1.0);
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let g = Graph::new(4, [(0, 1), (0, 2), (0, 3), (1, 2)]).unwrap();
        let nb = Neighborhoods::new(&g, &[0, 1, 0, 1]).unwrap();
        let h = Array2::from_elem((4, 3), 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = attention_scores(h.view(), &nb, &rand_mat(&mut rng, 6, 1), 0.2);
        for i in 0..4 {
            let grp = nb.full.group(i);
            for &k in grp {
                assert!((att.weights[k] - 1.0 / grp.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_attention_distributions_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_graph(&mut rng, 40, 120);
        let t: Vec<u8> = (0..40).map(|_| rng.random_range(0..2)).collect();
        let nb = Neighborhoods::new(&g, &t).unwrap();
        let att = attention_scores(rand_mat(&mut rng, 40, 5).view(), &nb, &rand_mat(&mut rng, 10, 1), 0.2);
        for groups in [&nb.full, &nb.same, &nb.opposite] {
            let w = restricted_weights(&att.logits, groups);
            for i in 0..40 {
                let grp = groups.group(i);
                if grp.is_empty() {
                    continue;
                }
                let s: f64 = grp.iter().map(|&k| w[k]).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(grp.iter().all(|&k| w[k] >= 0.0));
            }
        }
        // supports: self loop in full and same, never in opposite
        for i in 0..40 {
            let self_edge = |grp: &[usize]| grp.iter().any(|&k| nb.edges.pairs[k] == (i, i));
            assert!(self_edge(nb.full.group(i)) && self_edge(nb.same.group(i)));
            assert!(!self_edge(nb.opposite.group(i)));
            assert_eq!(nb.opposite.group(i).is_empty(), !nb.has_opp[i]);
        }
    }

    #[test]
    fn single_isolated_node_adjustment_is_pointwise() {
        let g = Graph::empty(1);
        let nb = Neighborhoods::new(&g, &[1]).unwrap();
        let cfg = ModelConfig {
            adjustment_layers: 1,
            nonlinearity: Nonlinearity::Relu,
            ..small_config(3)
        };
        let mut p: Params<f64> = init_params(&cfg, 3, 0).unwrap();
        p.agg.w_a[0] = Array2::eye(3);
        let x_a = array![[0.5, 1.5, 2.0]];
        let (e_a, _) = aggregate_adjustment(x_a.view(), &nb, &p.agg, &cfg).unwrap();
        assert_eq!(e_a, x_a);
    }

    #[test]
    fn star_center_averages_under_uniform_attention() {
        let g = Graph::new(6, (1..6).map(|j| (0, j))).unwrap();
        let nb = Neighborhoods::new(&g, &[0; 6]).unwrap();
        let cfg = ModelConfig {
            adjustment_layers: 1,
            nonlinearity: Nonlinearity::Relu,
            ..small_config(2)
        };
        let mut p: Params<f64> = init_params(&cfg, 3, 0).unwrap();
        // zero attention vector makes every logit equal
        p.agg.att[0].fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_a = rand_mat(&mut rng, 6, 3).mapv(f64::abs);
        p.agg.w_a[0] = rand_mat(&mut rng, 3, 2).mapv(f64::abs);
        let (e_a, _) = aggregate_adjustment(x_a.view(), &nb, &p.agg, &cfg).unwrap();
        let z = x_a.dot(&p.agg.w_a[0]);
        let expected = z.mean_axis(Axis(0)).unwrap();
        for c in 0..2 {
            assert!((e_a[[0, c]] - expected[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn adjustment_is_local_to_components() {
        let g = Graph::new(6, [(0, 1), (1, 2), (3, 4), (4, 5)]).unwrap();
        let nb = Neighborhoods::new(&g, &[0, 1, 0, 1, 0, 1]).unwrap();
        let cfg = small_config(3);
        let p: Params<f64> = init_params(&cfg, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 6, 4);
        let mut y = x.clone();
        for i in 3..6 {
            for c in 0..4 {
                y[[i, c]] += rng.random_range(-1.0..1.0);
            }
        }
        let (ex, _) = aggregate_adjustment(x.view(), &nb, &p.agg, &cfg).unwrap();
        let (ey, _) = aggregate_adjustment(y.view(), &nb, &p.agg, &cfg).unwrap();
        for i in 0..3 {
            assert_eq!(ex.row(i), ey.row(i));
        }
    }

    #[test]
    fn confounder_rows_follow_neighbourhoods() {
        // node 0: one opposite neighbour (1); node 2: all neighbours same-treatment
        let g = Graph::new(4, [(0, 1), (0, 2), (2, 3)]).unwrap();
        let t = [0, 1, 0, 0];
        let nb = Neighborhoods::new(&g, &t).unwrap();
        let cfg = small_config(3);
        let p: Params<f64> = init_params(&cfg, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_c = rand_mat(&mut rng, 4, 2);
        let logits: Vec<f64> = (0..nb.edges.pairs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (e_c, e_cf, has_opp) = aggregate_confounder(x_c.view(), &nb, &logits, &p.agg, &cfg).unwrap();
        assert_eq!(has_opp, vec![true, true, false, false]);
        assert!(e_cf.row(2).iter().all(|&v| v == 0.0) && e_cf.row(3).iter().all(|&v| v == 0.0));
        let elu = |v: f64| if v > 0.0 { v } else { v.exp_m1() };
        let direct = x_c.row(1).dot(&p.agg.w_c).mapv(elu);
        for c in 0..3 {
            assert!((e_cf[[0, c]] - direct[c]).abs() < 1e-12);
        }
        // node 3's same neighbourhood is {3, 2}
        let e32: Vec<f64> = [3usize, 2]
            .iter()
            .map(|&j| {
                let k = nb.edges.pairs.iter().position(|&p| p == (3, j)).unwrap();
                logits[k]
            })
            .collect();
        let m = e32[0].max(e32[1]);
        let (a, b) = ((e32[0] - m).exp(), (e32[1] - m).exp());
        let z = x_c.dot(&p.agg.w_c);
        for c in 0..3 {
            let pre = (a * z[[3, c]] + b * z[[2, c]]) / (a + b);
            assert!((e_c[[3, c]] - elu(pre)).abs() < 1e-12);
        }
    }

    #[test]
    fn counterfactual_mapping_is_row_local() {
        let cfg = small_config(3);
        let p: Params<f64> = init_params(&cfg, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_c = rand_mat(&mut rng, 8, 4);
        let e_a = rand_mat(&mut rng, 8, 3);
        let base = map_counterfactual(x_c.view(), e_a.view(), &p.heads.g).unwrap();
        assert_eq!(base.dim(), (8, 3));
        let mut moved = x_c.clone();
        moved[[5, 1]] += 0.9;
        let out = map_counterfactual(moved.view(), e_a.view(), &p.heads.g).unwrap();
        for i in 0..8 {
            assert_eq!(i == 5, out.row(i) != base.row(i), "row {i}");
        }
        let zero = p.zeroed();
        assert!(map_counterfactual(x_c.view(), e_a.view(), &zero.heads.g)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn ite_sign_convention() {
        let y_f = array![1.0, 4.0];
        let y_cf = array![3.0, 1.0];
        assert_eq!(predict_ite(&y_f, &y_cf, &[0, 1]), array![2.0, 3.0]);
        assert_eq!(predict_ite(&y_f, &y_f, &[0, 1]), array![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Array1::from_shape_fn(20, |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(20, |_| rng.random_range(-1.0..1.0));
        let t: Vec<u8> = (0..20).map(|_| rng.random_range(0..2)).collect();
        let flipped: Vec<u8> = t.iter().map(|&v| 1 - v).collect();
        assert_eq!(predict_ite(&a, &b, &t), -predict_ite(&a, &b, &flipped));
    }
}
