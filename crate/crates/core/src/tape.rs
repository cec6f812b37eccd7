//! Reverse-mode automatic differentiation over vector-valued nodes.
//!
//! Forward values are computed eagerly as operations are recorded; a single
//! `backward` pass then yields exact gradients for every trainable leaf.
//! Constants recorded with `constant` never receive gradients, which is how
//! detached quantities (noise draws, frozen parameters, stop-gradient
//! inputs) are expressed.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{
    add_bias_rows, column_sums, concat_cols, gaussian_kl_sum, log_softmax_rows, matmul, matmul_nt,
    matmul_tn, multinomial_nll_sum, normalize_rows, softmax_rows, sparse_dense_matmul,
    sparse_lookup, sparse_lookup_backward, SparseRows, Tensor,
};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    SparseDense { x: Rc<SparseRows<S>>, v: Var, w: Var },
    SparseLookup { x: Rc<SparseRows<S>>, table: Var },
    AddBias { a: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, c: S },
    ElemMul { a: Var, b: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Softmax { a: Var },
    ConcatCols { a: Var, b: Var },
    NormalizeRows { a: Var },
    MultinomialNll { logits: Var, rows: Rc<Vec<Vec<usize>>> },
    GaussianKl { mu: Var, logvar: Var },
    EntropyMean { logits: Var },
    MeanLogSigmoid { pre: Var, complement: bool },
    SumSq { a: Var },
}

pub struct Tape<S> {
    ops: Vec<Op<S>>,
    values: Vec<Tensor<S>>,
    /// True when a gradient must flow into or through this node.
    needs_grad: Vec<bool>,
    /// Named leaves, trainable or frozen; at most one node per name.
    bound: HashMap<String, Var>,
}

pub fn log_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Mean over rows of the softmax entropy of the logits.
pub fn entropy_mean_value<S: Scalar>(logits: &Tensor<S>) -> S {
    let ls = log_softmax_rows(logits);
    let (n, _) = ls.mat_dims();
    let mut total = S::zero();
    for i in 0..n {
        let mut h = S::zero();
        for &l in ls.row(i) {
            h -= l.exp() * l;
        }
        total += h;
    }
    total / S::from_f64_lossy(n as f64)
}

/// Mean of log sigmoid(pre), or of log(1 − sigmoid(pre)) when `complement`
/// is set, straight from the pre-activations for stability.
pub fn mean_log_sigmoid_value<S: Scalar>(pre: &Tensor<S>, complement: bool) -> S {
    let vals = pre.as_slice();
    let mut total = S::zero();
    for &x in vals {
        total += log_sigmoid(if complement { -x } else { x });
    }
    total / S::from_f64_lossy(vals.len() as f64)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs);
        Var(self.ops.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Named leaf holding a copy of the parameter. Frozen leaves (trainable
    /// = false) receive no gradients: that is the stop-gradient mechanism
    /// for the side of the min-max game not being updated. Repeated calls
    /// with the same name return the same node; rebinding a name with the
    /// other trainability is a contract violation.
    pub fn bind(&mut self, params: &ParamSet<S>, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            if self.needs_grad[v.0] != trainable {
                return Err(Error::Contract(format!(
                    "{name:?} bound both trainable and frozen on one tape"
                )));
            }
            return Ok(v);
        }
        let value = params.get(name)?.clone();
        let v = self.push(Op::Leaf, value, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Trainable leaf holding a copy of the named parameter.
    pub fn param(&mut self, params: &ParamSet<S>, name: &str) -> Result<Var> {
        self.bind(params, name, true)
    }

    /// Anonymous non-trainable leaf; nothing flows back into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(&self.values[a.0], &self.values[b.0])?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, value, needs))
    }

    /// Rows of a sparse matrix and a dense block multiplied against a single
    /// stacked weight matrix: out = X_sparse · W[..n_cols] + V · W[n_cols..].
    pub fn sparse_dense(&mut self, x: Rc<SparseRows<S>>, v: Var, w: Var) -> Result<Var> {
        let value = sparse_dense_matmul(&x, &self.values[v.0], &self.values[w.0])?;
        let needs = self.needs(v) || self.needs(w);
        Ok(self.push(Op::SparseDense { x, v, w }, value, needs))
    }

    pub fn sparse_lookup(&mut self, x: Rc<SparseRows<S>>, table: Var) -> Result<Var> {
        let value = sparse_lookup(&x, &self.values[table.0])?;
        let needs = self.needs(table);
        Ok(self.push(Op::SparseLookup { x, table }, value, needs))
    }

    /// Row-broadcast bias add: bias length must equal the column count.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = add_bias_rows(&self.values[a.0], &self.values[bias.0])?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias { a, bias }, value, needs))
    }

    /// x·W + b in one call.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.values[a.0].same_shape(&self.values[b.0]) {
            return Err(Error::Shape(format!(
                "add shapes {:?} vs {:?}",
                self.values[a.0].dims(),
                self.values[b.0].dims()
            )));
        }
        let mut value = self.values[a.0].clone();
        value.add_assign(&self.values[b.0]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, needs))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let mut value = self.values[a.0].clone();
        value.scale_in_place(c);
        let needs = self.needs(a);
        self.push(Op::Scale { a, c }, value, needs)
    }

    pub fn elem_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.values[a.0].same_shape(&self.values[b.0]) {
            return Err(Error::Shape(format!(
                "elementwise product shapes {:?} vs {:?}",
                self.values[a.0].dims(),
                self.values[b.0].dims()
            )));
        }
        let value = Tensor::new(
            self.values[a.0].dims().to_vec(),
            self.values[a.0]
                .as_slice()
                .iter()
                .zip(self.values[b.0].as_slice())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ElemMul { a, b }, value, needs))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|v| v.tanh());
        let needs = self.needs(a);
        self.push(Op::Tanh { a }, value, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zero = S::zero();
        let value = self.values[a.0].map(|v| if v > zero { v } else { zero });
        let needs = self.needs(a);
        self.push(Op::Relu { a }, value, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(crate::layers::sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid { a }, value, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|v| v.exp());
        let needs = self.needs(a);
        self.push(Op::Exp { a }, value, needs)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.values[a.0]);
        let needs = self.needs(a);
        self.push(Op::Softmax { a }, value, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = concat_cols(&self.values[a.0], &self.values[b.0])?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols { a, b }, value, needs))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let value = normalize_rows(&self.values[a.0]);
        let needs = self.needs(a);
        self.push(Op::NormalizeRows { a }, value, needs)
    }

    /// Scalar −Σ_i Σ_{j ∈ rows_i} log softmax(logits_i)_j.
    pub fn multinomial_nll(&mut self, logits: Var, rows: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let total = multinomial_nll_sum(&self.values[logits.0], &rows)?;
        let needs = self.needs(logits);
        Ok(self.push(Op::MultinomialNll { logits, rows }, Tensor::scalar(total), needs))
    }

    /// Scalar ½ Σ (exp(logvar) + mu² − 1 − logvar), the divergence of
    /// N(mu, diag(exp(logvar))) from the standard normal, summed over rows.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let total = gaussian_kl_sum(&self.values[mu.0], &self.values[logvar.0])?;
        let needs = self.needs(mu) || self.needs(logvar);
        Ok(self.push(Op::GaussianKl { mu, logvar }, Tensor::scalar(total), needs))
    }

    /// Scalar mean over rows of the softmax entropy of the logits.
    pub fn entropy_mean(&mut self, logits: Var) -> Var {
        let value = Tensor::scalar(entropy_mean_value(&self.values[logits.0]));
        let needs = self.needs(logits);
        self.push(Op::EntropyMean { logits }, value, needs)
    }

    /// Scalar mean of log sigmoid(pre), or of log(1 − sigmoid(pre)) when
    /// `complement` is set. Works on the pre-activation for stability.
    pub fn mean_log_sigmoid(&mut self, pre: Var, complement: bool) -> Var {
        let value = Tensor::scalar(mean_log_sigmoid_value(&self.values[pre.0], complement));
        let needs = self.needs(pre);
        self.push(Op::MeanLogSigmoid { pre, complement }, value, needs)
    }

    /// Scalar Σ x².
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let total = self.values[a.0].as_slice().iter().map(|&v| v * v).sum();
        let needs = self.needs(a);
        self.push(Op::SumSq { a }, Tensor::scalar(total), needs)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    /// Leaves never reached by the backward sweep get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<GradSet<S>> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.values[loss.0].dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for ix in (0..=loss.0).rev() {
            if !self.needs_grad[ix] {
                continue;
            }
            let g = match grads[ix].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_one(ix, &g, &mut grads);
            if matches!(self.ops[ix], Op::Leaf) {
                grads[ix] = Some(g);
            }
        }
        let mut out = GradSet::new();
        for (name, &var) in &self.bound {
            if !self.needs_grad[var.0] {
                continue;
            }
            let g = match grads[var.0].take() {
                Some(g) => g,
                None => Tensor::zeros(self.values[var.0].dims().to_vec()),
            };
            out.insert(name.clone(), g);
        }
        out.sort_keys();
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], target: Var, g: Tensor<S>) {
        if !self.needs_grad[target.0] {
            return;
        }
        let g = reshaped_like(g, self.values[target.0].dims());
        match &mut grads[target.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_one(&self, ix: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.ops[ix] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                if self.needs(*a) {
                    let ga = matmul_nt(g, &self.values[b.0]).expect("shapes fixed at build");
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = matmul_tn(&self.values[a.0], g).expect("shapes fixed at build");
                    self.acc(grads, *b, gb);
                }
            }
            Op::SparseDense { x, v, w } => {
                let (_, h) = self.values[ix].mat_dims();
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(self.values[w.0].dims().to_vec());
                    for (i, row) in x.rows.iter().enumerate() {
                        let gr = g.row(i);
                        for &(j, val) in row {
                            for (o, &gv) in gw.row_mut(j).iter_mut().zip(gr) {
                                *o += val * gv;
                            }
                        }
                        let vr = self.values[v.0].row(i);
                        for (p, &vv) in vr.iter().enumerate() {
                            if vv == S::zero() {
                                continue;
                            }
                            for (o, &gv) in gw.row_mut(x.n_cols + p).iter_mut().zip(gr) {
                                *o += vv * gv;
                            }
                        }
                    }
                    self.acc(grads, *w, gw);
                }
                if self.needs(*v) {
                    let (n, d) = self.values[v.0].mat_dims();
                    let mut gv = Tensor::zeros(vec![n, d]);
                    let wd = self.values[w.0].as_slice();
                    for i in 0..n {
                        let gr = g.row(i);
                        let dst = gv.row_mut(i);
                        for (p, o) in dst.iter_mut().enumerate() {
                            let w_row = &wd[(x.n_cols + p) * h..(x.n_cols + p + 1) * h];
                            let mut s = S::zero();
                            for (&a, &b) in gr.iter().zip(w_row) {
                                s += a * b;
                            }
                            *o = s;
                        }
                    }
                    self.acc(grads, *v, gv);
                }
            }
            Op::SparseLookup { x, table } => {
                if self.needs(*table) {
                    let mut gt = Tensor::zeros(self.values[table.0].dims().to_vec());
                    sparse_lookup_backward(x, g, &mut gt);
                    self.acc(grads, *table, gt);
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.needs(*bias) {
                    self.acc(grads, *bias, column_sums(g));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.clone());
                }
            }
            Op::Scale { a, c } => {
                let mut ga = g.clone();
                ga.scale_in_place(*c);
                self.acc(grads, *a, ga);
            }
            Op::ElemMul { a, b } => {
                if self.needs(*a) {
                    let ga = hadamard(g, &self.values[b.0]);
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = hadamard(g, &self.values[a.0]);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Tanh { a } => {
                let one = S::one();
                let ga = zip_map(g, &self.values[ix], |gv, y| gv * (one - y * y));
                self.acc(grads, *a, ga);
            }
            Op::Relu { a } => {
                let zero = S::zero();
                let ga = zip_map(g, &self.values[a.0], |gv, x| if x > zero { gv } else { zero });
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid { a } => {
                let one = S::one();
                let ga = zip_map(g, &self.values[ix], |gv, y| gv * y * (one - y));
                self.acc(grads, *a, ga);
            }
            Op::Exp { a } => {
                let ga = hadamard(g, &self.values[ix]);
                self.acc(grads, *a, ga);
            }
            Op::Softmax { a } => {
                let y = &self.values[ix];
                let (n, m) = y.mat_dims();
                let mut ga = Tensor::zeros(vec![n, m]);
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mut dot = S::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols { a, b } => {
                let (n, ca) = self.values[a.0].mat_dims();
                let (_, cb) = self.values[b.0].mat_dims();
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(vec![n, ca]);
                    for i in 0..n {
                        ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(vec![n, cb]);
                    for i in 0..n {
                        gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::NormalizeRows { a } => {
                let x = &self.values[a.0];
                let y = &self.values[ix];
                let (n, m) = x.mat_dims();
                let mut ga = Tensor::zeros(vec![n, m]);
                for i in 0..n {
                    let xr = x.row(i);
                    let mut norm_sq = S::zero();
                    for &v in xr {
                        norm_sq += v * v;
                    }
                    if norm_sq == S::zero() {
                        continue;
                    }
                    let norm = norm_sq.sqrt();
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mut dot = S::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::MultinomialNll { logits, rows } => {
                let gs = g.as_slice()[0];
                let p = softmax_rows(&self.values[logits.0]);
                let (n, m) = p.mat_dims();
                let mut ga = Tensor::zeros(vec![n, m]);
                for (i, row) in rows.iter().enumerate() {
                    let count = S::from_f64_lossy(row.len() as f64);
                    for (o, &pv) in ga.row_mut(i).iter_mut().zip(p.row(i)) {
                        *o = gs * count * pv;
                    }
                    for &j in row.iter() {
                        ga.row_mut(i)[j] -= gs;
                    }
                }
                self.acc(grads, *logits, ga);
            }
            Op::GaussianKl { mu, logvar } => {
                let gs = g.as_slice()[0];
                let half = S::from_f64_lossy(0.5);
                if self.needs(*mu) {
                    let gm = self.values[mu.0].map(|v| gs * v);
                    self.acc(grads, *mu, gm);
                }
                if self.needs(*logvar) {
                    let gl = self.values[logvar.0].map(|v| gs * half * (v.exp() - S::one()));
                    self.acc(grads, *logvar, gl);
                }
            }
            Op::EntropyMean { logits } => {
                let gs = g.as_slice()[0];
                let ls = log_softmax_rows(&self.values[logits.0]);
                let (n, m) = ls.mat_dims();
                let scale = gs / S::from_f64_lossy(n as f64);
                let mut ga = Tensor::zeros(vec![n, m]);
                for i in 0..n {
                    let lsr = ls.row(i);
                    let mut h = S::zero();
                    for &l in lsr {
                        h -= l.exp() * l;
                    }
                    for (o, &l) in ga.row_mut(i).iter_mut().zip(lsr) {
                        *o = -scale * l.exp() * (l + h);
                    }
                }
                self.acc(grads, *logits, ga);
            }
            Op::MeanLogSigmoid { pre, complement } => {
                let gs = g.as_slice()[0];
                let vals = &self.values[pre.0];
                let scale = gs / S::from_f64_lossy(vals.len() as f64);
                let ga = if *complement {
                    vals.map(|x| -scale * crate::layers::sigmoid(x))
                } else {
                    vals.map(|x| scale * crate::layers::sigmoid(-x))
                };
                self.acc(grads, *pre, ga);
            }
            Op::SumSq { a } => {
                let gs = g.as_slice()[0];
                let two = S::from_f64_lossy(2.0);
                let ga = self.values[a.0].map(|v| two * gs * v);
                self.acc(grads, *a, ga);
            }
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn reshaped_like<S: Scalar>(g: Tensor<S>, dims: &[usize]) -> Tensor<S> {
    if g.dims() == dims {
        g
    } else {
        debug_assert_eq!(g.len(), dims.iter().product::<usize>());
        Tensor::new(dims.to_vec(), g.as_slice().to_vec()).expect("same length")
    }
}

fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.len(), b.len());
    Tensor::new(
        a.dims().to_vec(),
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("congruent shapes")
}
