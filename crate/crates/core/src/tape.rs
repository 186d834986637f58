//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward evaluation. Nodes are
//! addressed by [`Var`] handles; [`Tape::backward`] walks the record in
//! reverse and returns the gradient of a scalar node with respect to every
//! node that depends on a trainable leaf.
//!
//! Besides the usual dense-layer primitives the tape has three graph ops:
//! per-edge attention logits, softmax-weighted neighbourhood sums over an
//! arbitrary grouping of those edges, and a transport cost against a fixed
//! coupling.

use std::rc::Rc;

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::scalar::{sigmoid, Real};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation<T> {
    Sigmoid,
    Relu,
    /// ELU with unit scale.
    Elu,
    Tanh,
    LeakyRelu(T),
}

impl<T: Real> Activation<T> {
    #[inline]
    pub fn apply(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    #[inline]
    fn derivative(self, x: T, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    s
                }
            }
        }
    }
}

/// Directed `(target, source)` pairs over which attention logits are scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeList {
    pub pairs: Vec<(usize, usize)>,
}

/// A grouping of edges into softmax neighbourhoods: group `i` spans
/// `entries[offsets[i]..offsets[i + 1]]`, each entry an edge index whose
/// source supplies the aggregated value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeGroups {
    pub offsets: Vec<usize>,
    pub entries: Vec<usize>,
}

impl EdgeGroups {
    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Builds groups by keeping, for each target, the edges accepted by `keep`.
    pub fn from_filter(edges: &EdgeList, num_groups: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let mut buckets = vec![Vec::new(); num_groups];
        for (k, &(i, j)) in edges.pairs.iter().enumerate() {
            if keep(i, j) {
                buckets[i].push(k);
            }
        }
        let mut offsets = Vec::with_capacity(num_groups + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for b in buckets {
            entries.extend(b);
            offsets.push(entries.len());
        }
        Self { offsets, entries }
    }
}

/// Softmax of `logits[group]` with the max-shift trick; empty groups give nothing.
pub fn group_softmax<T: Real>(logits: impl Fn(usize) -> T, group: &[usize]) -> Vec<T> {
    if group.is_empty() {
        return Vec::new();
    }
    let m = group.iter().map(|&k| logits(k)).fold(T::neg_infinity(), T::max);
    let mut w: Vec<T> = group.iter().map(|&k| (logits(k) - m).exp()).collect();
    let z: T = w.iter().copied().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<T>),
    Scale(Var, T),
    Act(Var, Activation<T>),
    ConcatCols(Var, Var),
    EdgeLogits {
        h: Var,
        att: Var,
        edges: Rc<EdgeList>,
        leak: T,
        raw: Vec<T>,
    },
    NeighborSum {
        logits: Var,
        values: Var,
        edges: Rc<EdgeList>,
        groups: Rc<EdgeGroups>,
        weights: Vec<T>,
    },
    RowMask(Var, Rc<Vec<bool>>),
    RowMse {
        a: Var,
        b: Var,
        rows: Rc<Vec<usize>>,
    },
    Bce {
        p: Var,
        targets: Vec<T>,
        rows: Rc<Vec<usize>>,
        clamp: T,
    },
    Transport {
        x: Var,
        rows_a: Vec<usize>,
        rows_b: Vec<usize>,
        plan: Array2<T>,
        dist: Array2<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

/// Recording of one forward evaluation.
pub struct Tape<T: Real> {
    values: Vec<Array2<T>>,
    ops: Vec<Op<T>>,
    tracked: Vec<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Array2<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, tracked: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0][[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn t(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.tracked[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        let tr = self.t(&[a, b]);
        self.push(v, Op::MatMul(a, b), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        let tr = self.t(&[a, b]);
        self.push(v, Op::Add(a, b), tr)
    }

    /// `a + 1·row` with `row` of shape `1 × cols(a)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.values[row.0].nrows(), 1, "bias must be a single row");
        let v = &self.values[a.0] + &self.values[row.0];
        let tr = self.t(&[a, row]);
        self.push(v, Op::AddRow(a, row), tr)
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        let tr = self.t(&[a, b]);
        self.push(v, Op::Mul(a, b), tr)
    }

    /// Elementwise product with a constant; `c` may broadcast (e.g. a column).
    pub fn mul_const(&mut self, a: Var, c: Array2<T>) -> Var {
        let v = &self.values[a.0] * &c;
        let tr = self.t(&[a]);
        self.push(v, Op::MulConst(a, c), tr)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.values[a.0].mapv(|x| x * s);
        let tr = self.t(&[a]);
        self.push(v, Op::Scale(a, s), tr)
    }

    pub fn act(&mut self, a: Var, f: Activation<T>) -> Var {
        let v = self.values[a.0].mapv(|x| f.apply(x));
        let tr = self.t(&[a]);
        self.push(v, Op::Act(a, f), tr)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.values[a.0].view(), self.values[b.0].view()])
            .expect("row counts agree");
        let tr = self.t(&[a, b]);
        self.push(v, Op::ConcatCols(a, b), tr)
    }

    /// Per-edge logits `LeakyReLU(att[..d]·h_target + att[d..]·h_source)`,
    /// returned as an `E × 1` column. `att` is `2d × 1`.
    pub fn edge_logits(&mut self, h: Var, att: Var, edges: Rc<EdgeList>, leak: T) -> Var {
        let raw = edge_scores(self.values[h.0].view(), self.values[att.0].view(), &edges);
        let out = Array2::from_shape_fn((raw.len(), 1), |(k, _)| Activation::LeakyRelu(leak).apply(raw[k]));
        let tr = self.t(&[h, att]);
        self.push(
            out,
            Op::EdgeLogits {
                h,
                att,
                edges,
                leak,
                raw,
            },
            tr,
        )
    }

    /// Row `i` of the output is `Σ_k softmax_{k ∈ group i}(logits_k) · values[source_k]`;
    /// rows of empty groups are zero.
    pub fn neighbor_sum(&mut self, logits: Var, values: Var, edges: Rc<EdgeList>, groups: Rc<EdgeGroups>) -> Var {
        let lv = &self.values[logits.0];
        let vv = &self.values[values.0];
        let n = groups.num_groups();
        let mut out = Array2::zeros((n, vv.ncols()));
        let mut weights = vec![T::zero(); groups.entries.len()];
        for i in 0..n {
            let g = groups.group(i);
            let w = group_softmax(|k| lv[[k, 0]], g);
            let mut row = out.row_mut(i);
            for (slot, (&k, &wk)) in g.iter().zip(&w).enumerate() {
                weights[groups.offsets[i] + slot] = wk;
                let j = edges.pairs[k].1;
                row.scaled_add(wk, &vv.row(j));
            }
        }
        let tr = self.t(&[logits, values]);
        self.push(
            out,
            Op::NeighborSum {
                logits,
                values,
                edges,
                groups,
                weights,
            },
            tr,
        )
    }

    /// Zeroes the rows where `keep` is false.
    pub fn row_mask(&mut self, a: Var, keep: Rc<Vec<bool>>) -> Var {
        let mut v = self.values[a.0].clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            if !keep[i] {
                row.fill(T::zero());
            }
        }
        let tr = self.t(&[a]);
        self.push(v, Op::RowMask(a, keep), tr)
    }

    /// Mean over `rows` of the per-row mean squared difference; 0 when `rows` is empty.
    pub fn row_mse(&mut self, a: Var, b: Var, rows: Rc<Vec<usize>>) -> Var {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let mut acc = T::zero();
        for &i in rows.iter() {
            let d: T = av.row(i).iter().zip(bv.row(i)).map(|(&x, &y)| (x - y) * (x - y)).sum();
            acc += d;
        }
        let denom = T::lit((rows.len() * av.ncols()).max(1) as f64);
        let v = Array2::from_elem((1, 1), acc / denom);
        let tr = self.t(&[a, b]);
        self.push(v, Op::RowMse { a, b, rows }, tr)
    }

    /// Mean binary cross-entropy of probabilities `p` (a column) against
    /// 0/1 `targets` over `rows`, with `p` clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, p: Var, targets: Vec<T>, rows: Rc<Vec<usize>>, clamp: T) -> Var {
        let pv = &self.values[p.0];
        let mut acc = T::zero();
        for &i in rows.iter() {
            let q = pv[[i, 0]].max(clamp).min(T::one() - clamp);
            let t = targets[i];
            acc -= t * q.ln() + (T::one() - t) * (T::one() - q).ln();
        }
        let v = Array2::from_elem((1, 1), acc / T::lit(rows.len().max(1) as f64));
        let tr = self.t(&[p]);
        self.push(
            v,
            Op::Bce {
                p,
                targets,
                rows,
                clamp,
            },
            tr,
        )
    }

    /// `Σ_ij plan_ij ‖x[rows_a[i]] − x[rows_b[j]]‖₂` with `plan` held fixed.
    pub fn transport_cost(&mut self, x: Var, rows_a: Vec<usize>, rows_b: Vec<usize>, plan: Array2<T>) -> Var {
        let xv = &self.values[x.0];
        let a = xv.select(Axis(0), &rows_a);
        let b = xv.select(Axis(0), &rows_b);
        let dist = pairwise_distances(a.view(), b.view());
        let total = (&plan * &dist).sum();
        let tr = self.t(&[x]);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::Transport {
                x,
                rows_a,
                rows_b,
                plan,
                dist,
            },
            tr,
        )
    }

    /// `Σ w_k · s_k` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Var {
        let v: T = terms.iter().map(|&(s, w)| w * self.values[s.0][[0, 0]]).sum();
        let tr = terms.iter().any(|(s, _)| self.tracked[s.0]);
        self.push(Array2::from_elem((1, 1), v), Op::WeightedSum(terms), tr)
    }

    /// Gradients of the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let n = self.values.len();
        let mut grads: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.tracked[idx] {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.values.iter().map(|v| v.dim()).collect();
        Gradients { grads, shapes }
    }

    fn backprop_node(&self, idx: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let tracked = &self.tracked;
        let mut acc = |v: Var, d: Array2<T>| {
            if !tracked[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if tracked[a.0] {
                    acc(*a, g.dot(&self.values[b.0].t()));
                }
                if tracked[b.0] {
                    acc(*b, self.values[a.0].t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                if tracked[a.0] {
                    acc(*a, g * &self.values[b.0]);
                }
                if tracked[b.0] {
                    acc(*b, g * &self.values[a.0]);
                }
            }
            Op::MulConst(a, c) => acc(*a, g * c),
            Op::Scale(a, s) => acc(*a, g.mapv(|x| x * *s)),
            Op::Act(a, f) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&self.values[a.0])
                    .and(&self.values[idx])
                    .for_each(|d, &x, &y| *d *= f.derivative(x, y));
                acc(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.values[a.0].ncols();
                acc(*a, g.slice(ndarray::s![.., ..ca]).to_owned());
                acc(*b, g.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::EdgeLogits {
                h,
                att,
                edges,
                leak,
                raw,
            } => {
                let hv = &self.values[h.0];
                let av = &self.values[att.0];
                let n = hv.nrows();
                let d = hv.ncols();
                let mut g_target = Array2::<T>::zeros((n, 1));
                let mut g_source = Array2::<T>::zeros((n, 1));
                for (k, &(i, j)) in edges.pairs.iter().enumerate() {
                    let slope = if raw[k] > T::zero() { T::one() } else { *leak };
                    let gr = g[[k, 0]] * slope;
                    g_target[[i, 0]] += gr;
                    g_source[[j, 0]] += gr;
                }
                let a1 = av.slice(ndarray::s![..d, ..]);
                let a2 = av.slice(ndarray::s![d.., ..]);
                if tracked[h.0] {
                    let dh = g_target.dot(&a1.t()) + g_source.dot(&a2.t());
                    acc(*h, dh);
                }
                if tracked[att.0] {
                    let da = ndarray::concatenate(
                        Axis(0),
                        &[hv.t().dot(&g_target).view(), hv.t().dot(&g_source).view()],
                    )
                    .expect("attention halves");
                    acc(*att, da);
                }
            }
            Op::NeighborSum {
                logits,
                values,
                edges,
                groups,
                weights,
            } => {
                let vv = &self.values[values.0];
                let mut d_logits = Array2::<T>::zeros(self.values[logits.0].dim());
                let mut d_values = Array2::<T>::zeros(vv.dim());
                for i in 0..groups.num_groups() {
                    let grp = groups.group(i);
                    if grp.is_empty() {
                        continue;
                    }
                    let gi = g.row(i);
                    let base = groups.offsets[i];
                    let mut dw = Vec::with_capacity(grp.len());
                    for (slot, &k) in grp.iter().enumerate() {
                        let j = edges.pairs[k].1;
                        let w = weights[base + slot];
                        d_values.row_mut(j).scaled_add(w, &gi);
                        dw.push(gi.dot(&vv.row(j)));
                    }
                    let mean: T = grp
                        .iter()
                        .enumerate()
                        .map(|(slot, _)| weights[base + slot] * dw[slot])
                        .sum();
                    for (slot, &k) in grp.iter().enumerate() {
                        d_logits[[k, 0]] += weights[base + slot] * (dw[slot] - mean);
                    }
                }
                acc(*logits, d_logits);
                acc(*values, d_values);
            }
            Op::RowMask(a, keep) => {
                let mut d = g.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    if !keep[i] {
                        row.fill(T::zero());
                    }
                }
                acc(*a, d);
            }
            Op::RowMse { a, b, rows } => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                let denom = T::lit((rows.len() * av.ncols()).max(1) as f64);
                let scale = g[[0, 0]] * T::lit(2.0) / denom;
                let mut da = Array2::<T>::zeros(av.dim());
                for &i in rows.iter() {
                    let mut r = da.row_mut(i);
                    Zip::from(&mut r)
                        .and(av.row(i))
                        .and(bv.row(i))
                        .for_each(|d, &x, &y| *d += scale * (x - y));
                }
                if tracked[b.0] {
                    acc(*b, da.mapv(|x| -x));
                }
                acc(*a, da);
            }
            Op::Bce {
                p,
                targets,
                rows,
                clamp,
            } => {
                let pv = &self.values[p.0];
                let scale = g[[0, 0]] / T::lit(rows.len().max(1) as f64);
                let mut dp = Array2::<T>::zeros(pv.dim());
                for &i in rows.iter() {
                    let raw = pv[[i, 0]];
                    if raw < *clamp || raw > T::one() - *clamp {
                        continue;
                    }
                    let t = targets[i];
                    dp[[i, 0]] += scale * (-(t / raw) + (T::one() - t) / (T::one() - raw));
                }
                acc(*p, dp);
            }
            Op::Transport {
                x,
                rows_a,
                rows_b,
                plan,
                dist,
            } => {
                // d/da_i = Σ_j w_ij (a_i − b_j), d/db_j = −Σ_i w_ij (a_i − b_j), w = g·plan/dist
                let xv = &self.values[x.0];
                let gs = g[[0, 0]];
                let w = Zip::from(plan)
                    .and(dist)
                    .map_collect(|&p, &d| if d > T::zero() { gs * p / d } else { T::zero() });
                let a = xv.select(Axis(0), rows_a);
                let b = xv.select(Axis(0), rows_b);
                let row_w = w.sum_axis(Axis(1));
                let col_w = w.sum_axis(Axis(0));
                let da = &a * &row_w.insert_axis(Axis(1)) - w.dot(&b);
                let db = &b * &col_w.insert_axis(Axis(1)) - w.t().dot(&a);
                let mut dx = Array2::<T>::zeros(xv.dim());
                for (p, &i) in rows_a.iter().enumerate() {
                    dx.row_mut(i).scaled_add(T::one(), &da.row(p));
                }
                for (q, &j) in rows_b.iter().enumerate() {
                    dx.row_mut(j).scaled_add(T::one(), &db.row(q));
                }
                acc(*x, dx);
            }
            Op::WeightedSum(terms) => {
                for &(s, w) in terms {
                    acc(s, Array2::from_elem((1, 1), g[[0, 0]] * w));
                }
            }
        }
    }
}

/// Pre-activation attention scores `att[..d]·h_i + att[d..]·h_j` per edge.
pub fn edge_scores<T: Real>(h: ArrayView2<T>, att: ArrayView2<T>, edges: &EdgeList) -> Vec<T> {
    let d = h.ncols();
    assert_eq!(att.nrows(), 2 * d, "attention vector must have 2d entries");
    let a1 = att.column(0).slice(ndarray::s![..d]).to_owned();
    let a2 = att.column(0).slice(ndarray::s![d..]).to_owned();
    let s_target = h.dot(&a1);
    let s_source = h.dot(&a2);
    edges
        .pairs
        .iter()
        .map(|&(i, j)| s_target[i] + s_source[j])
        .collect()
}

/// Euclidean distances between every row of `a` and every row of `b`.
///
/// Uses `‖a‖² + ‖b‖² − 2a·b`; pairs where that expansion loses most of its
/// precision (near-coincident points) are recomputed directly.
pub fn pairwise_distances<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let na: Vec<T> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<T> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    let refine = T::lit(1e-4);
    for ((i, j), v) in d.indexed_iter_mut() {
        let scale = na[i] + nb[j];
        let sq = scale - (*v + *v);
        *v = if sq > refine * scale {
            sq.sqrt()
        } else {
            row_distance(a.row(i), b.row(j))
        };
    }
    d
}

#[inline]
pub(crate) fn row_distance<T: Real>(a: ndarray::ArrayView1<T>, b: ndarray::ArrayView1<T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` w.r.t. every entry of every input.
    fn check(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let out = build(&mut t, &vs);
            (t.scalar(out), t, vs, out)
        };
        let (_, tape, vars, out) = eval(&inputs);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (n, x) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[n]);
            for idx in 0..x.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[n].as_slice_mut().unwrap()[idx] += h;
                minus[n].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {n} entry {idx}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    fn reduce(t: &mut Tape<f64>, v: Var) -> Var {
        // weighted reduction so every entry matters differently
        let shape = t.value(v).dim();
        let w = Array2::from_shape_fn(shape, |(i, j)| 0.3 + 0.1 * i as f64 - 0.07 * j as f64);
        let all = Rc::new((0..shape.0).collect::<Vec<_>>());
        let m = t.mul_const(v, w);
        let s = t.scale(m, 0.5);
        let ones = t.constant(Array2::ones(shape));
        let s = t.add(s, ones);
        let target = t.constant(Array2::zeros(shape));
        t.row_mse(s, target, all)
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 4, 3);
        let w = rand_mat(&mut rng, 3, 5);
        let b = rand_mat(&mut rng, 1, 5);
        let u = rand_mat(&mut rng, 4, 2);
        check(vec![x, w, b, u], |t, v| {
            let a = t.affine(v[0], v[1], v[2]);
            let a = t.act(a, Activation::Elu);
            let c = t.concat_cols(a, v[3]);
            let s = t.act(c, Activation::Tanh);
            let q = t.act(c, Activation::Sigmoid);
            let m = t.mul(s, q);
            let l = t.act(m, Activation::LeakyRelu(0.2));
            reduce(t, l)
        });
    }

    #[test]
    fn graph_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_mat(&mut rng, 5, 3);
        let att = rand_mat(&mut rng, 6, 1);
        let vals = rand_mat(&mut rng, 5, 2);
        let pairs = vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 0), (2, 2), (2, 0), (2, 3), (3, 3), (3, 2), (4, 4)];
        let edges = Rc::new(EdgeList { pairs });
        let full = Rc::new(EdgeGroups::from_filter(&edges, 5, |_, _| true));
        let odd = Rc::new(EdgeGroups::from_filter(&edges, 5, |i, j| (i + j) % 2 == 1));
        let keep = Rc::new(vec![true, true, true, true, false]);
        check(vec![h, att, vals], move |t, v| {
            let e = t.edge_logits(v[0], v[1], edges.clone(), 0.2);
            let a = t.neighbor_sum(e, v[2], edges.clone(), full.clone());
            let b = t.neighbor_sum(e, v[2], edges.clone(), odd.clone());
            let b = t.row_mask(b, keep.clone());
            let c = t.add(a, b);
            reduce(t, c)
        });
    }

    #[test]
    fn loss_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Array2::from_shape_fn((4, 1), |_| rng.random_range(0.1..0.9));
        let x = rand_mat(&mut rng, 4, 3);
        let y = rand_mat(&mut rng, 4, 3);
        let plan = array![[0.3, 0.2], [0.1, 0.4]];
        check(vec![p, x, y], move |t, v| {
            let rows = Rc::new(vec![0, 2, 3]);
            let b = t.bce(v[0], vec![1.0, 0.0, 0.0, 1.0], rows.clone(), 1e-7);
            let m = t.row_mse(v[1], v[2], rows);
            let w = t.transport_cost(v[1], vec![0, 1], vec![2, 3], plan.clone());
            t.weighted_sum(vec![(b, 1.0), (m, 0.5), (w, 2.0)])
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0]]);
        let c = t.constant(array![[3.0, 4.0]]);
        let d = t.detach(a);
        let s = t.add(a, c);
        let s = t.add(s, d);
        let rows = Rc::new(vec![0]);
        let z = t.constant(Array2::zeros((1, 2)));
        let l = t.row_mse(s, z, rows);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn empty_groups_yield_zero_rows() {
        let mut t: Tape<f64> = Tape::new();
        let edges = Rc::new(EdgeList { pairs: vec![(0, 1)] });
        let groups = Rc::new(EdgeGroups::from_filter(&edges, 2, |_, _| true));
        let e = t.constant(array![[0.3]]);
        let v = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let out = t.neighbor_sum(e, v, edges, groups);
        assert_eq!(t.value(out), &array![[3.0, 4.0], [0.0, 0.0]]);
    }

    #[test]
    fn pairwise_distances_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_mat(&mut rng, 7, 5) * 30.0;
        let mut b = rand_mat(&mut rng, 4, 5) * 30.0;
        // a near-coincident pair exercises the direct fallback
        b.row_mut(0).assign(&(&a.row(2) + 1e-7));
        let d = pairwise_distances(a.view(), b.view());
        for i in 0..7 {
            for j in 0..4 {
                let direct = row_distance(a.row(i), b.row(j));
                assert!((d[[i, j]] - direct).abs() <= 1e-12 * direct.max(1.0), "{i},{j}");
            }
        }
    }
}
