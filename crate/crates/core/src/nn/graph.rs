//! Tape-based reverse-mode differentiation over 2-D f64 matrices.
//!
//! Sequences are `[time x channels]` matrices. A [`Graph`] records every
//! operation applied during one forward pass; [`Graph::backward`] then walks
//! the tape in reverse. Parameters live in a [`ParamStore`] and are borrowed
//! read-only by the graph, so one store can back many graphs.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        id
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ExpandRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentWeightedSum(Var, Var, Vec<usize>),
    Unfold(Var, usize, usize),
    MaxPoolPair(Var),
    NormTime(Var),
    Transpose(Var),
    SumAll(Var),
    BceLogits(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    /// Op-specific saved state (normalization scale, max-pool winners).
    aux: Option<Mat>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: &'p ParamStore,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

const NORM_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    /// An evaluation-mode graph: dropout off, zoneout by expectation.
    pub fn eval(params: &'p ParamStore) -> Self {
        Self::with_mode(params, false, 0)
    }

    /// A training-mode graph whose stochastic masks are drawn from `seed`.
    pub fn train(params: &'p ParamStore, seed: u64) -> Self {
        Self::with_mode(params, true, seed)
    }

    fn with_mode(params: &'p ParamStore, train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            param_vars: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A differentiable leaf, e.g. an input whose gradient is inspected.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.params.is_trainable(id);
        let v = self.push(Mat::zeros((0, 0)), Op::Param(id), rg);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul shape mismatch {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    /// `a + row`, broadcasting a `[1 x C]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) + self.value(row);
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) * self.value(row);
        self.push_op(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push_op(out, Op::Scale(a, k), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push_op(out, Op::Abs(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push_op(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push_op(out, Op::SliceCols(a, start, end), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push_op(out, Op::SliceRows(a, start, end), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push_op(out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Repeats row `s` of `a` `counts[s]` times.
    pub fn expand_rows(&mut self, a: Var, counts: &[usize]) -> Var {
        let idx: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| std::iter::repeat_n(s, n))
            .collect();
        let out = self.value(a).select(Axis(0), &idx);
        self.push_op(out, Op::ExpandRows(a, counts.to_vec()), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    /// Softmax of a column vector within consecutive segments of `counts` rows.
    pub fn segment_softmax(&mut self, a: Var, counts: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.ncols(), 1);
        assert_eq!(va.nrows(), counts.iter().sum::<usize>());
        let mut data: Vec<f64> = va.iter().copied().collect();
        let mut off = 0;
        for &n in counts {
            softmax_in_place(&mut data[off..off + n]);
            off += n;
        }
        let out = Mat::from_shape_vec((data.len(), 1), data).unwrap();
        self.push_op(out, Op::SegmentSoftmax(a, counts.to_vec()), &[a])
    }

    /// Per segment `s`: sum of `weights[i] * values[i]` over the segment's rows.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, counts: &[usize]) -> Var {
        let (w, v) = (self.value(weights), self.value(values));
        assert_eq!(w.ncols(), 1);
        assert_eq!(w.nrows(), v.nrows());
        let mut out = Mat::zeros((counts.len(), v.ncols()));
        let mut off = 0;
        for (s, &n) in counts.iter().enumerate() {
            let mut row = out.row_mut(s);
            for i in off..off + n {
                row.scaled_add(w[[i, 0]], &v.row(i));
            }
            off += n;
        }
        self.push_op(
            out,
            Op::SegmentWeightedSum(weights, values, counts.to_vec()),
            &[weights, values],
        )
    }

    /// Time-window unfolding for 1-D convolution: row `t` holds input rows
    /// `t - pad_left .. t - pad_left + k`, zero outside the sequence.
    pub fn unfold(&mut self, a: Var, k: usize, pad_left: usize) -> Var {
        let va = self.value(a);
        let (t, c) = va.dim();
        let mut out = Mat::zeros((t, k * c));
        for row in 0..t {
            for j in 0..k {
                let src = row as isize - pad_left as isize + j as isize;
                if src >= 0 && (src as usize) < t {
                    out.slice_mut(s![row, j * c..(j + 1) * c]).assign(&va.row(src as usize));
                }
            }
        }
        self.push_op(out, Op::Unfold(a, k, pad_left), &[a])
    }

    /// Width-2, stride-1 max pooling over time with same-length output.
    pub fn max_pool_pair(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (t, c) = va.dim();
        let mut out = va.clone();
        // 1.0 where the later frame wins.
        let mut winner = Mat::zeros((t, c));
        for row in 0..t.saturating_sub(1) {
            for col in 0..c {
                if va[[row + 1, col]] > va[[row, col]] {
                    out[[row, col]] = va[[row + 1, col]];
                    winner[[row, col]] = 1.0;
                }
            }
        }
        let v = self.push_op(out, Op::MaxPoolPair(a), &[a]);
        self.nodes[v.0].aux = Some(winner);
        v
    }

    /// Normalizes each column to zero mean and unit variance over time.
    pub fn norm_time(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mean = va.mean_axis(Axis(0)).unwrap();
        let centered = va - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let out = &centered * &inv_std;
        let v = self.push_op(out, Op::NormTime(a), &[a]);
        self.nodes[v.0].aux = Some(inv_std.insert_axis(Axis(0)));
        v
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push_op(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy of `logits` against fixed `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim());
        let n = z.len() as f64;
        let total: f64 = Zip::from(z)
            .and(&targets)
            .fold(0.0, |acc, &z, &y| acc + z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        self.push_op(
            Mat::from_elem((1, 1), total / n),
            Op::BceLogits(logits, targets),
            &[logits],
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar");
        m[[0, 0]]
    }

    /// Back-propagates from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            // Interior gradients are dropped once consumed; leaves keep theirs.
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads[v.0].take() {
                params.insert(id, g);
            }
        }
        Gradients { nodes: grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulator of `v`, zero-initialized on first use; `None`
    /// when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Mat>], v: Var) -> Option<&'g mut Mat> {
        if !self.wants(v) {
            return None;
        }
        let dim = self.value(v).dim();
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(dim)))
    }

    fn acc_owned(&self, grads: &mut [Option<Mat>], v: Var, m: Mat) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &m,
            slot @ None => *slot = Some(m),
        }
    }

    fn acc_view(&self, grads: &mut [Option<Mat>], v: Var, m: ArrayView2<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &m,
            slot @ None => *slot = Some(m.to_owned()),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        if let Op::MatMul(a, b) = node.op {
            if self.wants(a) {
                acc_product(&mut grads[a.0], g.view(), self.value(b).t());
            }
            if self.wants(b) {
                acc_product(&mut grads[b.0], self.value(a).t(), g.view());
            }
            return;
        }
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(..) => unreachable!("handled above"),
            Op::Add(a, b) => {
                self.acc_view(grads, *a, g.view());
                self.acc_view(grads, *b, g.view());
            }
            Op::Sub(a, b) => {
                self.acc_view(grads, *a, g.view());
                self.acc_owned(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc_owned(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.acc_owned(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.acc_view(grads, *a, g.view());
                if self.wants(*row) {
                    self.acc_owned(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.wants(*a) {
                    self.acc_owned(grads, *a, g * self.value(*row));
                }
                if self.wants(*row) {
                    self.acc_owned(grads, *row, (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => self.acc_owned(grads, *a, g * *k),
            Op::Sigmoid(a) => self.acc_owned(
                grads,
                *a,
                Zip::from(g).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y)),
            ),
            Op::Tanh(a) => self.acc_owned(
                grads,
                *a,
                Zip::from(g).and(&node.value).map_collect(|&g, &y| g * (1.0 - y * y)),
            ),
            Op::Relu(a) => self.acc_owned(
                grads,
                *a,
                Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&g, &y| if y > 0.0 { g } else { 0.0 }),
            ),
            Op::Abs(a) => self.acc_owned(
                grads,
                *a,
                Zip::from(g).and(self.value(*a)).map_collect(|&g, &x| g * sign(x)),
            ),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    self.acc_view(grads, p, g.slice(s![.., off..off + w]));
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    self.acc_view(grads, p, g.slice(s![off..off + h, ..]));
                    off += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                if let Some(full) = self.slot(grads, *a) {
                    let mut dst = full.slice_mut(s![.., *start..*end]);
                    dst += g;
                }
            }
            Op::SliceRows(a, start, end) => {
                if let Some(full) = self.slot(grads, *a) {
                    let mut dst = full.slice_mut(s![*start..*end, ..]);
                    dst += g;
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(full) = self.slot(grads, *a) {
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dst = full.row_mut(r);
                        dst += &g.row(i);
                    }
                }
            }
            Op::ExpandRows(a, counts) => {
                if let Some(full) = self.slot(grads, *a) {
                    let mut off = 0;
                    for (s, &n) in counts.iter().enumerate() {
                        let mut dst = full.row_mut(s);
                        for i in off..off + n {
                            dst += &g.row(i);
                        }
                        off += n;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = y * g;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = row.sum();
                    row.scaled_add(-dot, &yrow);
                }
                self.acc_owned(grads, *a, ga);
            }
            Op::SegmentSoftmax(a, counts) => {
                let y = &node.value;
                let mut ga = y * g;
                let mut off = 0;
                for &n in counts {
                    let dot: f64 = ga.slice(s![off..off + n, 0]).sum();
                    for i in off..off + n {
                        ga[[i, 0]] -= dot * y[[i, 0]];
                    }
                    off += n;
                }
                self.acc_owned(grads, *a, ga);
            }
            Op::SegmentWeightedSum(w, v, counts) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let mut gw = Mat::zeros(wv.dim());
                let mut gv = Mat::zeros(vv.dim());
                let mut off = 0;
                for (s, &n) in counts.iter().enumerate() {
                    let gs = g.row(s);
                    for i in off..off + n {
                        gw[[i, 0]] = gs.dot(&vv.row(i));
                        gv.row_mut(i).scaled_add(wv[[i, 0]], &gs);
                    }
                    off += n;
                }
                self.acc_owned(grads, *w, gw);
                self.acc_owned(grads, *v, gv);
            }
            Op::Unfold(a, k, pad_left) => {
                let (t, c) = self.value(*a).dim();
                let mut full = Mat::zeros((t, c));
                for row in 0..t {
                    for j in 0..*k {
                        let src = row as isize - *pad_left as isize + j as isize;
                        if src >= 0 && (src as usize) < t {
                            let mut dst = full.row_mut(src as usize);
                            dst += &g.slice(s![row, j * c..(j + 1) * c]);
                        }
                    }
                }
                self.acc_owned(grads, *a, full);
            }
            Op::MaxPoolPair(a) => {
                let winner = node.aux.as_ref().expect("max-pool winners");
                let (t, c) = g.dim();
                let mut full = Mat::zeros((t, c));
                for row in 0..t {
                    for col in 0..c {
                        let target = if winner[[row, col]] > 0.5 { row + 1 } else { row };
                        full[[target, col]] += g[[row, col]];
                    }
                }
                self.acc_owned(grads, *a, full);
            }
            Op::NormTime(a) => {
                let inv_std = node.aux.as_ref().expect("normalization scale");
                let xhat = &node.value;
                let mean_g = g.mean_axis(Axis(0)).unwrap();
                let mean_gx = (g * xhat).mean_axis(Axis(0)).unwrap();
                let ga = (g - &mean_g - &(xhat * &mean_gx)) * inv_std;
                self.acc_owned(grads, *a, ga);
            }
            Op::Transpose(a) => self.acc_owned(grads, *a, g.t().to_owned()),
            Op::SumAll(a) => {
                let dim = self.value(*a).dim();
                self.acc_owned(grads, *a, Mat::from_elem(dim, g[[0, 0]]));
            }
            Op::BceLogits(z, y) => {
                let zv = self.value(*z);
                let n = zv.len() as f64;
                let scale = g[[0, 0]] / n;
                self.acc_owned(
                    grads,
                    *z,
                    Zip::from(zv).and(y).map_collect(|&z, &y| (sigmoid(z) - y) * scale),
                );
            }
        }
    }
}

/// `slot += x y`, allocating on first use.
fn acc_product(slot: &mut Option<Mat>, x: ArrayView2<f64>, y: ArrayView2<f64>) {
    match slot {
        Some(existing) => general_mat_mul(1.0, &x, &y, 1.0, existing),
        None => *slot = Some(x.dot(&y)),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    /// Central-difference check of d(sum(w * f(x)))/dx for a one-input op.
    fn check_unary(x: Mat, f: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = {
            let mut g = Graph::eval(&store);
            let xv = g.constant(x.clone());
            let y = f(&mut g, xv);
            let dim = g.shape(y);
            Mat::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
        };
        let loss_of = |x: &Mat| {
            let mut g = Graph::eval(&store);
            let xv = g.constant(x.clone());
            let y = f(&mut g, xv);
            (g.value(y) * &probe).sum()
        };
        let mut g = Graph::eval(&store);
        let xv = g.input(x.clone());
        let y = f(&mut g, xv);
        let w = g.constant(probe.clone());
        let prod = g.mul(y, w);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let analytic = grads.wrt(xv).unwrap().clone();
        let eps = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            let numeric = (loss_of(&xp) - loss_of(&xm)) / (2.0 * eps);
            let a = analytic[[r, c]];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "grad mismatch at ({r},{c}): analytic {a} numeric {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(sample(3, 4, 1), |g, x| g.sigmoid(x));
        check_unary(sample(3, 4, 2), |g, x| g.tanh(x));
        check_unary(sample(3, 4, 3), |g, x| g.relu(x));
        check_unary(sample(3, 4, 4), |g, x| g.abs(x));
        check_unary(sample(3, 4, 5), |g, x| g.scale(x, -2.5));
        check_unary(sample(3, 4, 6), |g, x| g.transpose(x));
    }

    #[test]
    fn structural_gradients() {
        check_unary(sample(4, 3, 7), |g, x| {
            let a = g.slice_cols(x, 1, 3);
            let c = g.concat_cols(&[x, a]);
            let b = g.slice_rows(c, 0, 2);
            let bt = g.transpose(b);
            let d = g.gather_rows(c, &[3, 0, 0, 2]);
            let e = g.matmul(d, bt);
            let f = g.concat_rows(&[e, a]);
            g.softmax_rows(f)
        });
        check_unary(sample(5, 3, 8), |g, x| g.unfold(x, 4, 2));
        check_unary(sample(5, 3, 9), |g, x| g.max_pool_pair(x));
        check_unary(sample(5, 3, 10), |g, x| g.norm_time(x));
        check_unary(sample(2, 3, 11), |g, x| g.expand_rows(x, &[3, 1]));
    }

    #[test]
    fn segment_attention_gradients() {
        check_unary(sample(5, 1, 12), |g, x| g.segment_softmax(x, &[2, 3]));
        let values = sample(5, 3, 13);
        check_unary(sample(5, 1, 14), move |g, x| {
            let v = g.constant(values.clone());
            let w = g.segment_softmax(x, &[3, 2]);
            g.segment_weighted_sum(w, v, &[3, 2])
        });
        let weights = sample(5, 1, 15);
        check_unary(sample(5, 3, 16), move |g, v| {
            let w = g.constant(weights.clone());
            g.segment_weighted_sum(w, v, &[1, 4])
        });
    }

    #[test]
    fn broadcast_and_loss_gradients() {
        let row = sample(1, 3, 17);
        check_unary(sample(4, 3, 18), move |g, x| {
            let r = g.constant(row.clone());
            let a = g.add_row(x, r);
            let b = g.mul_row(a, r);
            g.mul(a, b)
        });
        let other = sample(4, 3, 19);
        check_unary(sample(1, 3, 20), move |g, r| {
            let x = g.constant(other.clone());
            let a = g.add_row(x, r);
            g.mul_row(a, r)
        });
        let targets = array![[1.0, 0.0, 1.0]];
        check_unary(sample(1, 3, 21), move |g, z| g.bce_with_logits(z, targets.clone()));
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.constant(array![[1000.0, 0.0, -1000.0], [0.5, 0.5, 0.5]]);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn params_are_shared_leaves() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[2.0]]);
        let mut g = Graph::eval(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let x = g.constant(array![[3.0]]);
        let y1 = g.mul(a, x);
        let y2 = g.mul(b, a);
        let s = g.add(y1, y2);
        let grads = g.backward(s);
        // d/dw (3w + w^2) = 3 + 2w = 7
        assert_eq!(grads.param(id).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[2.0]]);
        store.set_trainable(id, false);
        let mut g = Graph::eval(&store);
        let w = g.param(id);
        let x = g.input(array![[3.0]]);
        let y = g.mul(w, x);
        let grads = g.backward(y);
        assert!(grads.param(id).is_none());
        assert_eq!(grads.wrt(x).unwrap()[[0, 0]], 2.0);
    }
}
