//! The virtual user: fusion of observation and recommendation into a shared
//! embedding, scalar reward estimation, and feedback-embedding generation.
//!
//! As in the policy module, each forward exists as a plain function and as
//! a tape builder calling the same kernels in the same order, so outputs
//! are bit-identical across the two paths.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layers::sigmoid;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{add_bias_rows, concat_cols, matmul, sparse_lookup, SparseRows, Tensor};

/// Rows whose listed entries all carry 1/max(1,n): the mean-pooled
/// observation, and likewise the uniform preference an expert places on the
/// n items they interacted with. Empty rows stay zero.
pub fn mean_pooled_rows<S: Scalar>(index_rows: &[Vec<usize>], n_items: usize) -> SparseRows<S> {
    SparseRows::uniform(index_rows, n_items, |n| {
        S::one() / S::from_f64_lossy(n.max(1) as f64)
    })
}

fn check_fuse_dims<S: Scalar>(x_mean: &SparseRows<S>, n_action_rows: usize, n_action_cols: usize, table: &Tensor<S>) -> Result<()> {
    let (m, _) = table.mat_dims();
    if x_mean.n_cols != m || n_action_cols != m {
        return Err(Error::Shape(format!(
            "observation width {} and action width {n_action_cols} vs {m} table rows",
            x_mean.n_cols
        )));
    }
    if x_mean.n_rows() != n_action_rows {
        return Err(Error::Shape(format!(
            "{} observation rows vs {n_action_rows} action rows",
            x_mean.n_rows()
        )));
    }
    Ok(())
}

/// Fused embedding h = mean of the observed items' table rows plus the
/// action-weighted sum of all table rows.
pub fn fuse<S: Scalar>(
    x_mean: &SparseRows<S>,
    action: &Tensor<S>,
    table: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, cols) = action.mat_dims();
    check_fuse_dims(x_mean, n, cols, table)?;
    let mut h = sparse_lookup(x_mean, table)?;
    h.add_assign(&matmul(action, table)?);
    Ok(h)
}

/// Tape twin of `fuse`; `trainable` controls the fusion table.
pub fn fuse_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    trainable: bool,
    x_mean: Rc<SparseRows<S>>,
    action: Var,
) -> Result<Var> {
    let (n, cols) = tape.value(action).mat_dims();
    check_fuse_dims(&x_mean, n, cols, params.get("fusion.table")?)?;
    let table = tape.bind(params, "fusion.table", trainable)?;
    let pooled = tape.sparse_lookup(x_mean, table)?;
    let weighted = tape.matmul(action, table)?;
    tape.add(pooled, weighted)
}

/// `fuse` for a sparse action (an expert's uniform preference over their
/// items): both terms become table lookups.
pub fn fuse_sparse<S: Scalar>(
    x_mean: &SparseRows<S>,
    action: &SparseRows<S>,
    table: &Tensor<S>,
) -> Result<Tensor<S>> {
    check_fuse_dims(x_mean, action.n_rows(), action.n_cols, table)?;
    let mut h = sparse_lookup(x_mean, table)?;
    h.add_assign(&sparse_lookup(action, table)?);
    Ok(h)
}

/// Tape twin of `fuse_sparse`.
pub fn fuse_sparse_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    trainable: bool,
    x_mean: Rc<SparseRows<S>>,
    action: Rc<SparseRows<S>>,
) -> Result<Var> {
    check_fuse_dims(&x_mean, action.n_rows(), action.n_cols, params.get("fusion.table")?)?;
    let table = tape.bind(params, "fusion.table", trainable)?;
    let pooled = tape.sparse_lookup(x_mean, table)?;
    let weighted = tape.sparse_lookup(action, table)?;
    tape.add(pooled, weighted)
}

fn relu_layer<S: Scalar>(input: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let pre = add_bias_rows(&matmul(input, w)?, b)?;
    Ok(pre.map(|t| if t > S::zero() { t } else { S::zero() }))
}

/// Reward estimate per row: the sigmoid pre-activation and the reward
/// itself, which sits strictly inside (0,1).
#[derive(Clone, Debug)]
pub struct Reward<S> {
    pub pre: Tensor<S>,
    pub r: Tensor<S>,
}

/// h through the reward MLP: three rectified layers, an affine head to one
/// unit, and a sigmoid.
pub fn estimate_reward<S: Scalar>(params: &ParamSet<S>, h: &Tensor<S>) -> Result<Reward<S>> {
    let a1 = relu_layer(h, params.get("reward.w1")?, params.get("reward.b1")?)?;
    let a2 = relu_layer(&a1, params.get("reward.w2")?, params.get("reward.b2")?)?;
    let a3 = relu_layer(&a2, params.get("reward.w3")?, params.get("reward.b3")?)?;
    let pre = add_bias_rows(&matmul(&a3, params.get("reward.w4")?)?, params.get("reward.b4")?)?;
    let r = pre.map(sigmoid);
    Ok(Reward { pre, r })
}

/// Tape twin of `estimate_reward`; returns (pre, r) nodes. Losses that need
/// log r or log(1-r) should reduce the pre-activation node directly.
pub fn estimate_reward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    trainable: bool,
    h: Var,
) -> Result<(Var, Var)> {
    let mut a = h;
    for layer in ["1", "2", "3"] {
        let w = tape.bind(params, &format!("reward.w{layer}"), trainable)?;
        let b = tape.bind(params, &format!("reward.b{layer}"), trainable)?;
        let pre = tape.affine(a, w, b)?;
        a = tape.relu(pre);
    }
    let w4 = tape.bind(params, "reward.w4", trainable)?;
    let b4 = tape.bind(params, "reward.b4", trainable)?;
    let pre = tape.affine(a, w4, b4)?;
    let r = tape.sigmoid(pre);
    Ok((pre, r))
}

/// [h; r] through the feedback MLP: two rectified layers and an affine head
/// to the feedback width.
pub fn generate_feedback<S: Scalar>(
    params: &ParamSet<S>,
    h: &Tensor<S>,
    r: &Tensor<S>,
) -> Result<Tensor<S>> {
    let hr = concat_cols(h, r)?;
    let a1 = relu_layer(&hr, params.get("feedback.w1")?, params.get("feedback.b1")?)?;
    let a2 = relu_layer(&a1, params.get("feedback.w2")?, params.get("feedback.b2")?)?;
    add_bias_rows(&matmul(&a2, params.get("feedback.w3")?)?, params.get("feedback.b3")?)
}

/// Tape twin of `generate_feedback`.
pub fn generate_feedback_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    trainable: bool,
    h: Var,
    r: Var,
) -> Result<Var> {
    let hr = tape.concat_cols(h, r)?;
    let mut a = hr;
    for layer in ["1", "2"] {
        let w = tape.bind(params, &format!("feedback.w{layer}"), trainable)?;
        let b = tape.bind(params, &format!("feedback.b{layer}"), trainable)?;
        let pre = tape.affine(a, w, b)?;
        a = tape.relu(pre);
    }
    let w3 = tape.bind(params, "feedback.w3", trainable)?;
    let b3 = tape.bind(params, "feedback.b3", trainable)?;
    tape.affine(a, w3, b3)
}
