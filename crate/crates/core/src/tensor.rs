//! Dense row-major tensors and the numeric kernels built on them.
//!
//! Everything here is rank 1 or 2; rank-1 tensors act as row vectors where a
//! matrix is expected. The kernels are the single source of truth for forward
//! arithmetic: both the autodiff tape and the plain inference paths call them,
//! so the two routes agree bit for bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} entries, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![S::zero(); n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) with rank-1 tensors read as a single row.
    pub fn mat_dims(&self) -> (usize, usize) {
        match self.dims.len() {
            1 => (1, self.dims[0]),
            2 => (self.dims[0], self.dims[1]),
            _ => unreachable!("tensors are rank 1 or 2"),
        }
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (r, c) = self.mat_dims();
        assert!(i < r, "row {i} out of {r}");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let (r, c) = self.mat_dims();
        assert!(i < r, "row {i} out of {r}");
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Value of a scalar (single-entry) tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite_all(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor<S>) -> bool {
        self.dims == other.dims
    }

    /// self += alpha * other (shapes must match).
    pub fn axpy(&mut self, alpha: S, other: &Tensor<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, alpha: S) {
        for v in self.data.iter_mut() {
            *v *= alpha;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }
}

/// A batch of sparse row vectors: per row, (column, value) pairs with columns
/// strictly increasing. Stands in for the observation side of the input,
/// which is a handful of nonzeros out of the full item vocabulary.
#[derive(Clone, Debug)]
pub struct SparseRows<S> {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, S)>>,
}

impl<S: Scalar> SparseRows<S> {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// One row per index set, every listed column set to `value(row_len)`.
    pub fn uniform(index_rows: &[Vec<usize>], n_cols: usize, value: impl Fn(usize) -> S) -> Self {
        let rows = index_rows
            .iter()
            .map(|idx| {
                let v = value(idx.len());
                idx.iter().map(|&j| (j, v)).collect()
            })
            .collect();
        SparseRows { n_cols, rows }
    }

    pub fn to_dense(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(vec![self.rows.len(), self.n_cols]);
        for (i, row) in self.rows.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, v) in row {
                dst[j] = v;
            }
        }
        out
    }
}

fn check_mat(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    if t.rank() > 2 {
        return Err(Error::Shape(format!("{what} must be rank 1 or 2")));
    }
    Ok(t.mat_dims())
}

/// C = A · B.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = check_mat(a, "lhs")?;
    let (kb, m) = check_mat(b, "rhs")?;
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims {k} vs {kb} (lhs {:?}, rhs {:?})",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = Tensor::zeros(vec![n, m]);
    let bd = b.as_slice();
    for i in 0..n {
        let a_row = a.row(i);
        let o_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let b_row = &bd[p * m..(p + 1) * m];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
    Ok(out)
}

fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact(4);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        for l in 0..4 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = S::zero();
    for (&a, &b) in xc.remainder().iter().zip(yc.remainder()) {
        tail += a * b;
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// C = A · Bᵀ.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = check_mat(a, "lhs")?;
    let (m, kb) = check_mat(b, "rhs")?;
    if k != kb {
        return Err(Error::Shape(format!("matmul_nt inner dims {k} vs {kb}")));
    }
    let mut out = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let a_row = a.row(i);
        let o_row = out.row_mut(i);
        for (j, o) in o_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// C = Aᵀ · B.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = check_mat(a, "lhs")?;
    let (nb, m) = check_mat(b, "rhs")?;
    if n != nb {
        return Err(Error::Shape(format!("matmul_tn outer dims {n} vs {nb}")));
    }
    let mut out = Tensor::zeros(vec![k, m]);
    let od = out.as_mut_slice();
    for i in 0..n {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let o_row = &mut od[p * m..(p + 1) * m];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
    Ok(out)
}

/// Rows of `table` gathered and summed with the sparse coefficients:
/// out_i = Σ_j v_ij · table_j.
pub fn sparse_lookup<S: Scalar>(x: &SparseRows<S>, table: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, width) = check_mat(table, "table")?;
    if rows != x.n_cols {
        return Err(Error::Shape(format!(
            "lookup table has {rows} rows, sparse input addresses {}",
            x.n_cols
        )));
    }
    let mut out = Tensor::zeros(vec![x.n_rows(), width]);
    for (i, row) in x.rows.iter().enumerate() {
        let dst = out.row_mut(i);
        for &(j, v) in row {
            if j >= rows {
                return Err(Error::Shape(format!("sparse column {j} out of {rows}")));
            }
            for (d, &t) in dst.iter_mut().zip(table.row(j)) {
                *d += v * t;
            }
        }
    }
    Ok(out)
}

/// Transpose-accumulate of `sparse_lookup`: table_grad_j += Σ_i v_ij · g_i.
pub fn sparse_lookup_backward<S: Scalar>(
    x: &SparseRows<S>,
    grad_out: &Tensor<S>,
    table_grad: &mut Tensor<S>,
) {
    for (i, row) in x.rows.iter().enumerate() {
        let g = grad_out.row(i);
        for &(j, v) in row {
            for (t, &gv) in table_grad.row_mut(j).iter_mut().zip(g) {
                *t += v * gv;
            }
        }
    }
}

/// First affine block of the recommender: the input is the concatenation of a
/// sparse observation row and a dense feedback row, the weight matrix holds
/// the observation rows first: out = X_sparse · W[..M] + V · W[M..].
pub fn sparse_dense_matmul<S: Scalar>(
    x: &SparseRows<S>,
    v: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (w_rows, h) = check_mat(w, "weights")?;
    let (vn, vd) = check_mat(v, "dense part")?;
    if vn != x.n_rows() {
        return Err(Error::Shape(format!(
            "sparse part has {} rows, dense part {vn}",
            x.n_rows()
        )));
    }
    if w_rows != x.n_cols + vd {
        return Err(Error::Shape(format!(
            "weights have {w_rows} rows, input width is {} + {vd}",
            x.n_cols
        )));
    }
    let wd = w.as_slice();
    let mut out = Tensor::zeros(vec![x.n_rows(), h]);
    for (i, row) in x.rows.iter().enumerate() {
        let o_row = out.row_mut(i);
        for &(j, val) in row {
            let w_row = &wd[j * h..(j + 1) * h];
            for (o, &wv) in o_row.iter_mut().zip(w_row) {
                *o += val * wv;
            }
        }
        let v_row = v.row(i);
        for (p, &vv) in v_row.iter().enumerate() {
            if vv == S::zero() {
                continue;
            }
            let w_row = &wd[(x.n_cols + p) * h..(x.n_cols + p + 1) * h];
            for (o, &wv) in o_row.iter_mut().zip(w_row) {
                *o += vv * wv;
            }
        }
    }
    Ok(out)
}

/// Per-row softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (n, m) = logits.mat_dims();
    let mut out = logits.clone();
    for i in 0..n {
        let row = &mut out.as_mut_slice()[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row log-softmax, numerically stable.
pub fn log_softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (n, m) = logits.mat_dims();
    let mut out = logits.clone();
    for i in 0..n {
        let row = &mut out.as_mut_slice()[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Per-row L2 normalization; all-zero rows stay zero.
pub fn normalize_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, m) = x.mat_dims();
    let mut out = x.clone();
    for i in 0..n {
        let row = &mut out.as_mut_slice()[i * m..(i + 1) * m];
        let norm = dot(row, row).sqrt();
        if norm > S::zero() {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Column sums of a matrix (bias gradient reduction).
pub fn column_sums<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, m) = x.mat_dims();
    let mut out = Tensor::zeros(vec![m]);
    for i in 0..n {
        let row = x.row(i);
        for (o, &v) in out.as_mut_slice().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Bias broadcast over rows: out[i] = a[i] + bias.
pub fn add_bias_rows<S: Scalar>(a: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, m) = a.mat_dims();
    if bias.len() != m {
        return Err(Error::Shape(format!("bias length {} vs {m} columns", bias.len())));
    }
    let mut out = a.clone();
    for i in 0..n {
        for (o, &b) in out.row_mut(i).iter_mut().zip(bias.as_slice()) {
            *o += b;
        }
    }
    Ok(out)
}

/// −Σ_i Σ_{j ∈ rows_i} log softmax(logits_i)_j.
pub fn multinomial_nll_sum<S: Scalar>(logits: &Tensor<S>, rows: &[Vec<usize>]) -> Result<S> {
    let (n, m) = logits.mat_dims();
    if rows.len() != n {
        return Err(Error::Shape(format!("{} index rows vs {n} logit rows", rows.len())));
    }
    let ls = log_softmax_rows(logits);
    let mut total = S::zero();
    for (i, row) in rows.iter().enumerate() {
        let lsr = ls.row(i);
        for &j in row {
            if j >= m {
                return Err(Error::Shape(format!("item index {j} out of {m}")));
            }
            total -= lsr[j];
        }
    }
    Ok(total)
}

/// ½ Σ (exp(logvar) + mu² − 1 − logvar), the divergence of
/// N(mu, diag(exp(logvar))) from the standard normal, summed over entries.
pub fn gaussian_kl_sum<S: Scalar>(mu: &Tensor<S>, logvar: &Tensor<S>) -> Result<S> {
    if !mu.same_shape(logvar) {
        return Err(Error::Shape("mu and logvar shapes differ".into()));
    }
    let half = S::from_f64_lossy(0.5);
    let mut total = S::zero();
    for (&m, &lv) in mu.as_slice().iter().zip(logvar.as_slice()) {
        total += half * (lv.exp() + m * m - S::one() - lv);
    }
    Ok(total)
}

/// Two matrices side by side: [a | b].
pub fn concat_cols<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (na, ca) = check_mat(a, "lhs")?;
    let (nb, cb) = check_mat(b, "rhs")?;
    if na != nb {
        return Err(Error::Shape(format!("concat rows {na} vs {nb}")));
    }
    let mut out = Tensor::zeros(vec![na, ca + cb]);
    for i in 0..na {
        let dst = out.row_mut(i);
        dst[..ca].copy_from_slice(a.row(i));
        dst[ca..].copy_from_slice(b.row(i));
    }
    Ok(out)
}
