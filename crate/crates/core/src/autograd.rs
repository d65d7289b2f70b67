//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Token streams are flattened to
//! `(batch * seq) x width` rows; bias vectors are `1 x width`; scalar losses are
//! `1 x 1`. Parameters are bound lazily by name, and binding the same name twice
//! returns the same leaf, so a layer applied several times accumulates the sum
//! of its per-application gradients.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct AttentionCache {
    probs: Vec<Array2<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Array2<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        cache: AttentionCache,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
        scale: f64,
    },
    SoftTargetKl {
        logits: Var,
        targets: Array2<f64>,
        probs: Array2<f64>,
        temperature: f64,
        scale: f64,
    },
    Cosine {
        a: Var,
        b: Var,
        scale: f64,
    },
    Sum(Var),
    Weighted(Vec<(Var, f64)>),
    Column {
        x: Var,
        col: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the bound parameters, keyed by parameter name and shaped as
/// 2-D tape values.
pub type RawGradients = HashMap<String, Array2<f64>>;

pub struct Graph<'p> {
    params: Option<&'p ParameterSet>,
    trainable: bool,
    bound: HashMap<String, Var>,
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

const LAYER_NORM_EPS: f64 = 1e-12;

impl<'p> Graph<'p> {
    /// A tape whose bound parameters receive gradients.
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params: Some(params),
            trainable: true,
            bound: HashMap::new(),
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// A tape whose parameters are treated as constants.
    pub fn frozen(params: &'p ParameterSet) -> Self {
        Self {
            trainable: false,
            ..Self::new(params)
        }
    }

    /// A tape with no parameter source; only constants can enter it.
    pub fn detached() -> Self {
        Self {
            params: None,
            trainable: false,
            bound: HashMap::new(),
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn params(&self) -> Option<&'p ParameterSet> {
        self.params
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a named parameter.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds the named parameter, returning the existing leaf when it was
    /// already bound.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let params = self
            .params
            .ok_or_else(|| Error::InvalidArgument("graph has no parameter source".into()))?;
        let tensor = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        let value = as_matrix(tensor);
        let v = self.push(value, Op::Leaf, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let value = self.value(a).dot(self.value(b));
        let needs = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by ({m}x{k2})ᵀ")));
        }
        let value = self.value(a).dot(&self.value(b).t());
        let needs = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMulBt(a, b), needs))
    }

    /// Adds a `1 x m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.shape(x);
        if self.shape(bias) != (1, m) {
            return Err(Error::Shape(format!("bias {:?} for width {m}", self.shape(bias))));
        }
        let value = self.value(x) + self.value(bias);
        let needs = self.grad_of(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), needs))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_row(h, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let value = self.value(a) + self.value(b);
        let needs = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let needs = self.grad_of(&[x]);
        self.push(value, Op::Gelu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let needs = self.grad_of(&[x]);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        if self.shape(gain) != (1, m) || self.shape(bias) != (1, m) {
            return Err(Error::Shape(format!("layer norm parameters for width {m}")));
        }
        let xv = self.value(x);
        let mut normalized = Array2::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (row, mut out) in xv.rows().into_iter().zip(normalized.rows_mut()) {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = &normalized * self.value(gain) + self.value(bias);
        let needs = self.grad_of(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Selects rows of `x` (embedding lookup or position gathering).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} out of {n}")));
        }
        let src = self.value(x);
        let mut value = Array2::zeros((rows.len(), m));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let needs = self.grad_of(&[x]);
        Ok(self.push(value, Op::Gather { x, rows: rows.to_vec() }, needs))
    }

    /// Inverted dropout; identity when the tape is not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let (n, m) = self.nodes[x.0].value.dim();
        let keep = 1.0 - p;
        let mask = Array2::from_shape_simple_fn((n, m), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let value = self.value(x) * &mask;
        let needs = self.grad_of(&[x]);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// length `seq`. Keys whose `key_mask` entry is false get a score of −∞.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize, key_mask: &[bool]) -> Result<Var> {
        let (n, width) = self.shape(q);
        if self.shape(k) != (n, width) || self.shape(v) != (n, width) {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if seq == 0 || n % seq != 0 || key_mask.len() != n || width % heads != 0 {
            return Err(Error::Shape(format!(
                "attention over {n} rows, seq {seq}, width {width}, heads {heads}"
            )));
        }
        let batch = n / seq;
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((n, width));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            let mask = &key_mask[rows.clone()];
            if !mask.iter().any(|&m| m) {
                return Err(Error::InvalidArgument(format!(
                    "sequence {b} has no attendable position"
                )));
            }
            for h in 0..heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for mut row in p.rows_mut() {
                    for (x, &m) in row.iter_mut().zip(mask) {
                        if !m {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let needs = self.grad_of(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                cache: AttentionCache { probs },
            },
            needs,
        ))
    }

    /// Summed softmax cross-entropy of each row against its target class,
    /// multiplied by `scale` (pass `1 / rows` for the mean).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("target {bad} out of {c} classes")));
        }
        let mut probs = self.value(logits).clone();
        let mut total = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let slice = row.as_slice_mut().expect("contiguous row");
            total -= log_softmax_at(slice, t);
            softmax_in_place(slice);
        }
        let value = Array2::from_elem((1, 1), total * scale);
        let needs = self.grad_of(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            needs,
        ))
    }

    /// `scale · Σ_rows KL(targets ‖ softmax(logits / T))`. Target rows must be
    /// probability distributions.
    pub fn soft_target_kl(&mut self, logits: Var, targets: Array2<f64>, temperature: f64, scale: f64) -> Result<Var> {
        if self.shape(logits) != targets.dim() {
            return Err(Error::Shape("soft targets and logits differ in shape".into()));
        }
        let mut probs = self.value(logits) / temperature;
        let mut total = 0.0;
        for (mut row, target) in probs.rows_mut().into_iter().zip(targets.rows()) {
            let slice = row.as_slice_mut().expect("contiguous row");
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + slice.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            let scaled = slice.to_vec();
            softmax_in_place(slice);
            for ((&x, &p), &q) in scaled.iter().zip(slice.iter()).zip(target.iter()) {
                if q > 0.0 {
                    // ln p from the probability itself so that identical
                    // distributions cancel exactly.
                    let log_p = if p >= f64::MIN_POSITIVE { p.ln() } else { x - log_z };
                    total += q * (q.ln() - log_p);
                }
            }
        }
        let value = Array2::from_elem((1, 1), total * scale);
        let needs = self.grad_of(&[logits]);
        Ok(self.push(
            value,
            Op::SoftTargetKl {
                logits,
                targets,
                probs,
                temperature,
                scale,
            },
            needs,
        ))
    }

    /// `scale · Σ_rows (1 − cos(a_r, b_r))`.
    pub fn cosine_distance(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape("cosine inputs differ in shape".into()));
        }
        let total: f64 = self
            .value(a)
            .rows()
            .into_iter()
            .zip(self.value(b).rows())
            .map(|(x, y)| 1.0 - cosine(x.as_slice().unwrap(), y.as_slice().unwrap()).0)
            .sum();
        let needs = self.grad_of(&[a, b]);
        Ok(self.push(
            Array2::from_elem((1, 1), total * scale),
            Op::Cosine { a, b, scale },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let needs = self.grad_of(&[x]);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x), needs)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.shape(v) != (1, 1) {
                return Err(Error::Shape("weighted_sum takes scalars".into()));
            }
            total += w * self.scalar(v);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.grad_of(&vars);
        Ok(self.push(Array2::from_elem((1, 1), total), Op::Weighted(terms.to_vec()), needs))
    }

    /// Reshapes column `col` of an `(batch * seq) x c` node into `batch x seq`.
    pub fn column(&mut self, x: Var, col: usize, seq: usize) -> Result<Var> {
        let (n, c) = self.shape(x);
        if col >= c || seq == 0 || n % seq != 0 {
            return Err(Error::Shape(format!("column {col} of {n}x{c} by seq {seq}")));
        }
        let value = self
            .value(x)
            .column(col)
            .to_owned()
            .into_shape_with_order((n / seq, seq))
            .expect("row count divisible by seq");
        let needs = self.grad_of(&[x]);
        Ok(self.push(value, Op::Column { x, col }, needs))
    }

    /// Runs the reverse sweep from a scalar `loss` and returns the gradient of
    /// every bound trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<RawGradients> {
        let mut leaves = self.backward_leaves(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, v)| leaves.remove(&v.0).map(|g| (name.clone(), g)))
            .collect())
    }

    /// Gradients of `loss` with respect to the given leaf nodes (zeros when a
    /// leaf does not influence the loss).
    pub fn backward_inputs(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        let mut leaves = self.backward_leaves(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                leaves
                    .remove(&v.0)
                    .unwrap_or_else(|| Array2::zeros(self.value(*v).dim()))
            })
            .collect())
    }

    fn backward_leaves(&self, loss: Var) -> Result<HashMap<usize, Array2<f64>>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape("loss must be a scalar".into()));
        }
        let value = self.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value}")));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(g) => *g += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.insert(idx, grad);
                }
                Op::MatMul(a, b) => {
                    acc(*a, grad.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&grad));
                }
                Op::MatMulBt(a, b) => {
                    acc(*a, grad.dot(self.value(*b)));
                    acc(*b, grad.t().dot(self.value(*a)));
                }
                Op::AddRow(x, bias) => {
                    acc(*bias, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, grad);
                }
                Op::Add(a, b) => {
                    acc(*a, grad.clone());
                    acc(*b, grad);
                }
                Op::Gelu(x) => {
                    let d = ndarray::Zip::from(&grad)
                        .and(self.value(*x))
                        .map_collect(|&g, &v| g * gelu_derivative(v));
                    acc(*x, d);
                }
                Op::Tanh(x) => {
                    let d = ndarray::Zip::from(&grad)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(*x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    acc(*bias, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*gain, (&grad * normalized).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dnorm = &grad * self.value(*gain);
                    let m = normalized.ncols() as f64;
                    let mut dx = Array2::zeros(normalized.dim());
                    for r in 0..normalized.nrows() {
                        let dn = dnorm.row(r);
                        let xn = normalized.row(r);
                        let sum_dn = dn.sum();
                        let sum_dn_xn = dn.dot(&xn);
                        for c in 0..normalized.ncols() {
                            dx[[r, c]] = inv_std[r] / m * (m * dn[c] - sum_dn - xn[c] * sum_dn_xn);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Gather { x, rows } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut target = dx.row_mut(r);
                        target += &grad.row(i);
                    }
                    acc(*x, dx);
                }
                Op::Dropout { x, mask } => acc(*x, grad * mask),
                Op::Attention {
                    q,
                    k,
                    v,
                    seq,
                    heads,
                    cache,
                } => {
                    let (dq, dk, dv) = self.attention_backward(&grad, (*q, *k, *v), *seq, *heads, &cache.probs);
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    scale,
                } => {
                    let upstream = grad[[0, 0]] * scale;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    d *= upstream;
                    acc(*logits, d);
                }
                Op::SoftTargetKl {
                    logits,
                    targets,
                    probs,
                    temperature,
                    scale,
                } => {
                    let upstream = grad[[0, 0]] * scale / temperature;
                    acc(*logits, (probs - targets) * upstream);
                }
                Op::Cosine { a, b, scale } => {
                    let upstream = -grad[[0, 0]] * scale;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(bv.dim());
                    for r in 0..av.nrows() {
                        let x = av.row(r);
                        let y = bv.row(r);
                        let (cos, nx, ny) = cosine(x.as_slice().unwrap(), y.as_slice().unwrap());
                        for c in 0..av.ncols() {
                            da[[r, c]] = upstream * (y[c] / (nx * ny) - cos * x[c] / (nx * nx));
                            db[[r, c]] = upstream * (x[c] / (nx * ny) - cos * y[c] / (ny * ny));
                        }
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Sum(x) => {
                    let d = Array2::from_elem(self.value(*x).dim(), grad[[0, 0]]);
                    acc(*x, d);
                }
                Op::Weighted(terms) => {
                    for &(v, w) in terms {
                        acc(v, Array2::from_elem((1, 1), grad[[0, 0]] * w));
                    }
                }
                Op::Column { x, col } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (r, &g) in grad.iter().enumerate() {
                        d[[r, *col]] = g;
                    }
                    acc(*x, d);
                }
            }
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        grad: &Array2<f64>,
        (q, k, v): (Var, Var, Var),
        seq: usize,
        heads: usize,
        probs: &[Array2<f64>],
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, width) = qv.dim();
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut dq = Array2::zeros((n, width));
        let mut dk = Array2::zeros((n, width));
        let mut dv = Array2::zeros((n, width));
        for b in 0..n / seq {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let p = &probs[b * heads + h];
                let dctx = grad.slice(s![rows.clone(), cols.clone()]);
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dctx));
                let dp = dctx.dot(&vh.t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = row.sum();
                    for (x, &pv) in row.iter_mut().zip(prow.iter()) {
                        *x -= pv * dot;
                    }
                }
                ds *= scale;
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        (dq, dk, dv)
    }
}

/// Views a 1-D or 2-D parameter tensor as a tape matrix (vectors become rows).
pub fn as_matrix(tensor: &ndarray::ArrayD<f64>) -> Array2<f64> {
    match tensor.ndim() {
        1 => tensor
            .view()
            .insert_axis(Axis(0))
            .into_dimensionality::<Ix2>()
            .expect("1-D tensor")
            .to_owned(),
        2 => tensor
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D tensor")
            .to_owned(),
        d => panic!("parameters are 1-D or 2-D, got {d}-D"),
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row[index] - log_z
}

/// `(cos, |a|, |b|)` with norms floored away from zero.
/// `(cos, ‖a‖, ‖b‖)`. Dividing by `sqrt(‖a‖² ‖b‖²)` makes `cos(a, a)` exactly 1.
fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    const FLOOR: f64 = 1e-24;
    let sa = a.iter().map(|x| x * x).sum::<f64>().max(FLOOR);
    let sb = b.iter().map(|x| x * x).sum::<f64>().max(FLOOR);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (sa * sb).sqrt(), sa.sqrt(), sb.sqrt())
}

/// Evaluates a scalar function of one input matrix together with its gradient.
pub fn value_and_grad<F>(input: &Array2<f64>, f: F) -> Result<(f64, Array2<f64>)>
where
    F: FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::detached();
    let x = g.input(input.clone());
    let loss = f(&mut g, x)?;
    let value = g.scalar(loss);
    let grad = g.backward_inputs(loss, &[x])?.pop().expect("one input");
    Ok((value, grad))
}
