//! The recommendation policy: a multinomial variational autoencoder, or a
//! denoising autoencoder variant, over the concatenated input [x_norm; v],
//! with top-k item selection.
//!
//! Every forward function exists twice: a plain version for evaluation and
//! a tape version for training. Both call the same tensor kernels in the
//! same order, so their outputs are bit-identical.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{RecommenderConfig, RecommenderKind};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{
    add_bias_rows, gaussian_kl_sum, matmul, multinomial_nll_sum, softmax_rows,
    sparse_dense_matmul, SparseRows, Tensor,
};

/// Encoder output: per-row latent mean and, for the variational model, the
/// log-variance. The deterministic variant carries no log-variance.
#[derive(Clone, Debug)]
pub struct Encoded<S> {
    pub mu: Tensor<S>,
    pub logvar: Option<Tensor<S>>,
}

/// Tape-resident counterpart of `Encoded`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVar {
    pub mu: Var,
    pub logvar: Option<Var>,
}

/// How the latent is realized: a reparameterized draw during training, the
/// mean during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    Sample,
    Mean,
}

/// Unit-normalized sparse observation rows: each listed item gets 1/sqrt(n)
/// so nonempty rows have unit norm and empty rows stay zero.
pub fn unit_observation_rows<S: Scalar>(
    index_rows: &[Vec<usize>],
    n_items: usize,
) -> SparseRows<S> {
    SparseRows::uniform(index_rows, n_items, |n| {
        if n == 0 {
            S::zero()
        } else {
            S::one() / S::from_f64_lossy(n as f64).sqrt()
        }
    })
}

/// Input dropout on the sparse observation block only: entries dropped
/// independently with the given rate, survivors rescaled by 1/(1-rate) so
/// the expectation is unchanged. Consumes one uniform draw per stored entry
/// in row order.
pub fn dropout_rows<S: Scalar>(
    x: &SparseRows<S>,
    rate: f64,
    rng: &mut ChaCha12Rng,
) -> Result<SparseRows<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} outside [0,1)")));
    }
    let scale = S::from_f64_lossy(1.0 / (1.0 - rate));
    let rows = x
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .filter(|_| rng.gen::<f64>() >= rate)
                .map(|&(j, v)| (j, v * scale))
                .collect()
        })
        .collect();
    Ok(SparseRows { n_cols: x.n_cols, rows })
}

/// Standard normal draws as an n-by-dim tensor. Draws happen in f64 so
/// every scalar type consumes the same stream.
pub fn standard_normal<S: Scalar>(n: usize, dim: usize, rng: &mut ChaCha12Rng) -> Tensor<S> {
    let data = (0..n * dim)
        .map(|_| {
            let draw: f64 = rng.sample(StandardNormal);
            S::from_f64_lossy(draw)
        })
        .collect();
    Tensor::new(vec![n, dim], data).expect("consistent dims")
}

fn check_input_dims<S: Scalar>(
    cfg: &RecommenderConfig,
    x: &SparseRows<S>,
    v: &Tensor<S>,
) -> Result<()> {
    if x.n_cols != cfg.n_items {
        return Err(Error::Shape(format!(
            "observation width {} vs {} items",
            x.n_cols, cfg.n_items
        )));
    }
    let (n, d) = v.mat_dims();
    if d != cfg.feedback_dim {
        return Err(Error::Shape(format!(
            "feedback width {d} vs {}",
            cfg.feedback_dim
        )));
    }
    if n != x.n_rows() {
        return Err(Error::Shape(format!(
            "{} observation rows vs {n} feedback rows",
            x.n_rows()
        )));
    }
    Ok(())
}

/// [x_norm; v] through the shared hidden layer and the latent heads.
pub fn encode<S: Scalar>(
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    x: &SparseRows<S>,
    v: &Tensor<S>,
) -> Result<Encoded<S>> {
    check_input_dims(cfg, x, v)?;
    let pre = sparse_dense_matmul(x, v, params.get("enc.w1")?)?;
    let pre = add_bias_rows(&pre, params.get("enc.b1")?)?;
    let h = pre.map(|t| t.tanh());
    match cfg.kind {
        RecommenderKind::Vae => {
            let mu = add_bias_rows(&matmul(&h, params.get("enc.w_mu")?)?, params.get("enc.b_mu")?)?;
            let logvar = add_bias_rows(
                &matmul(&h, params.get("enc.w_logvar")?)?,
                params.get("enc.b_logvar")?,
            )?;
            Ok(Encoded { mu, logvar: Some(logvar) })
        }
        RecommenderKind::Dae => {
            let pre = add_bias_rows(&matmul(&h, params.get("enc.w_z")?)?, params.get("enc.b_z")?)?;
            Ok(Encoded { mu: pre.map(|t| t.tanh()), logvar: None })
        }
    }
}

/// Tape twin of `encode`. `trainable` decides whether gradients reach the
/// encoder parameters.
pub fn encode_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    trainable: bool,
    x: Rc<SparseRows<S>>,
    v: Var,
) -> Result<EncodedVar> {
    check_input_dims(cfg, &x, tape.value(v))?;
    let w1 = tape.bind(params, "enc.w1", trainable)?;
    let b1 = tape.bind(params, "enc.b1", trainable)?;
    let pre = tape.sparse_dense(x, v, w1)?;
    let pre = tape.add_bias(pre, b1)?;
    let h = tape.tanh(pre);
    match cfg.kind {
        RecommenderKind::Vae => {
            let w_mu = tape.bind(params, "enc.w_mu", trainable)?;
            let b_mu = tape.bind(params, "enc.b_mu", trainable)?;
            let w_lv = tape.bind(params, "enc.w_logvar", trainable)?;
            let b_lv = tape.bind(params, "enc.b_logvar", trainable)?;
            let mu = tape.affine(h, w_mu, b_mu)?;
            let logvar = tape.affine(h, w_lv, b_lv)?;
            Ok(EncodedVar { mu, logvar: Some(logvar) })
        }
        RecommenderKind::Dae => {
            let w_z = tape.bind(params, "enc.w_z", trainable)?;
            let b_z = tape.bind(params, "enc.b_z", trainable)?;
            let pre = tape.affine(h, w_z, b_z)?;
            Ok(EncodedVar { mu: tape.tanh(pre), logvar: None })
        }
    }
}

/// mu + exp(logvar/2) * eps when sampling a variational latent; the mean
/// otherwise. `eps` is required exactly when a draw happens.
pub fn reparameterize<S: Scalar>(
    enc: &Encoded<S>,
    mode: LatentMode,
    eps: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let lv = match (&enc.logvar, mode) {
        (Some(lv), LatentMode::Sample) => lv,
        _ => return Ok(enc.mu.clone()),
    };
    let eps = eps.ok_or_else(|| Error::Contract("sampling needs a noise tensor".into()))?;
    if !eps.same_shape(&enc.mu) {
        return Err(Error::Shape(format!(
            "noise dims {:?} vs latent {:?}",
            eps.dims(),
            enc.mu.dims()
        )));
    }
    let half_lv = lv.map(|t| t * S::from_f64_lossy(0.5));
    let std = half_lv.map(|t| t.exp());
    let noise = Tensor::new(
        std.dims().to_vec(),
        std.as_slice().iter().zip(eps.as_slice()).map(|(&a, &b)| a * b).collect(),
    )?;
    let mut z = enc.mu.clone();
    z.add_assign(&noise);
    Ok(z)
}

/// Tape twin of `reparameterize`; the noise enters as a constant so no
/// gradient flows into the draw.
pub fn reparameterize_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    enc: &EncodedVar,
    mode: LatentMode,
    eps: Option<&Tensor<S>>,
) -> Result<Var> {
    let lv = match (enc.logvar, mode) {
        (Some(lv), LatentMode::Sample) => lv,
        _ => return Ok(enc.mu),
    };
    let eps = eps.ok_or_else(|| Error::Contract("sampling needs a noise tensor".into()))?;
    if !eps.same_shape(tape.value(enc.mu)) {
        return Err(Error::Shape(format!(
            "noise dims {:?} vs latent {:?}",
            eps.dims(),
            tape.value(enc.mu).dims()
        )));
    }
    let half_lv = tape.scale(lv, S::from_f64_lossy(0.5));
    let std = tape.exp(half_lv);
    let e = tape.constant(eps.clone());
    let noise = tape.elem_mul(std, e)?;
    tape.add(enc.mu, noise)
}

/// Latent through the decoder up to the pre-softmax item scores.
pub fn decode_logits<S: Scalar>(
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (_, d) = z.mat_dims();
    if d != cfg.latent {
        return Err(Error::Shape(format!("latent width {d} vs {}", cfg.latent)));
    }
    let pre = add_bias_rows(&matmul(z, params.get("dec.w1")?)?, params.get("dec.b1")?)?;
    let h = pre.map(|t| t.tanh());
    add_bias_rows(&matmul(&h, params.get("dec.w2")?)?, params.get("dec.b2")?)
}

/// Softmax of `decode_logits`: one preference distribution per row, each
/// summing to one.
pub fn decode<S: Scalar>(
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    Ok(softmax_rows(&decode_logits(cfg, params, z)?))
}

/// Tape twin of `decode_logits`.
pub fn decode_logits_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    trainable: bool,
    z: Var,
) -> Result<Var> {
    let (_, d) = tape.value(z).mat_dims();
    if d != cfg.latent {
        return Err(Error::Shape(format!("latent width {d} vs {}", cfg.latent)));
    }
    let w1 = tape.bind(params, "dec.w1", trainable)?;
    let b1 = tape.bind(params, "dec.b1", trainable)?;
    let w2 = tape.bind(params, "dec.w2", trainable)?;
    let b2 = tape.bind(params, "dec.b2", trainable)?;
    let pre = tape.affine(z, w1, b1)?;
    let h = tape.tanh(pre);
    tape.affine(h, w2, b2)
}

/// Negative multinomial log-likelihood of the observed items plus beta
/// times the latent divergence, summed over the batch. The deterministic
/// variant has no divergence term.
pub fn elbo_loss<S: Scalar>(
    index_rows: &[Vec<usize>],
    logits: &Tensor<S>,
    enc: &Encoded<S>,
    beta: S,
) -> Result<S> {
    check_elbo_inputs(index_rows, beta)?;
    let nll = multinomial_nll_sum(logits, index_rows)?;
    match &enc.logvar {
        Some(lv) => Ok(nll + gaussian_kl_sum(&enc.mu, lv)? * beta),
        None => Ok(nll),
    }
}

/// Tape twin of `elbo_loss`; returns a scalar node.
pub fn elbo_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    index_rows: Rc<Vec<Vec<usize>>>,
    logits: Var,
    enc: &EncodedVar,
    beta: S,
) -> Result<Var> {
    check_elbo_inputs(&index_rows, beta)?;
    let nll = tape.multinomial_nll(logits, index_rows)?;
    match enc.logvar {
        Some(lv) => {
            let kl = tape.gaussian_kl(enc.mu, lv)?;
            let scaled = tape.scale(kl, beta);
            tape.add(nll, scaled)
        }
        None => Ok(nll),
    }
}

fn check_elbo_inputs<S: Scalar>(index_rows: &[Vec<usize>], beta: S) -> Result<()> {
    if beta < S::zero() {
        return Err(Error::Parameter("beta must be nonnegative".into()));
    }
    if index_rows.iter().any(|r| r.is_empty()) {
        return Err(Error::Contract("likelihood over an empty observation row".into()));
    }
    Ok(())
}

/// Ranked recommendation slate: up to k items by descending score, history
/// excluded, score ties broken toward the lower item index. `short` marks
/// fewer than k items remaining outside the history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopK {
    pub items: Vec<usize>,
    pub short: bool,
}

struct Entry<S> {
    score: S,
    index: usize,
}

impl<S: Scalar> Ord for Entry<S> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match self.score.partial_cmp(&other.score).expect("finite scores") {
            std::cmp::Ordering::Equal => other.index.cmp(&self.index),
            o => o,
        }
    }
}

impl<S: Scalar> PartialOrd for Entry<S> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<S: Scalar> PartialEq for Entry<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl<S: Scalar> Eq for Entry<S> {}

/// The k highest-scoring items outside the history, kept in a min-heap of
/// size k so the cost is one pass over the scores.
pub fn recommend_top_k<S: Scalar>(scores: &[S], history: &[usize], k: usize) -> Result<TopK> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    if k == 0 {
        return Err(Error::Parameter("slate size must be at least 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite recommendation scores".into()));
    }
    let m = scores.len();
    let mut excluded = vec![false; m];
    for &j in history {
        if j >= m {
            return Err(Error::Shape(format!("history index {j} out of {m}")));
        }
        excluded[j] = true;
    }
    let mut heap: BinaryHeap<Reverse<Entry<S>>> = BinaryHeap::with_capacity(k + 1);
    for (index, &score) in scores.iter().enumerate() {
        if excluded[index] {
            continue;
        }
        let entry = Entry { score, index };
        if heap.len() < k {
            heap.push(Reverse(entry));
        } else if entry > heap.peek().expect("nonempty").0 {
            heap.pop();
            heap.push(Reverse(entry));
        }
    }
    let mut kept: Vec<Entry<S>> = heap.into_iter().map(|r| r.0).collect();
    kept.sort_by(|a, b| b.cmp(a));
    let items: Vec<usize> = kept.iter().map(|e| e.index).collect();
    let short = items.len() < k;
    Ok(TopK { items, short })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{init_weight, Activation};
    use crate::params::Owner;
    use crate::rng::stream;

    fn toy_config(kind: RecommenderKind) -> RecommenderConfig {
        let mut cfg = RecommenderConfig::new(6);
        cfg.kind = kind;
        cfg.feedback_dim = 3;
        cfg.hidden = 5;
        cfg.latent = 3;
        cfg
    }

    fn toy_params(cfg: &RecommenderConfig, seed: u64) -> ParamSet<f64> {
        let m = cfg.n_items;
        let d = cfg.feedback_dim;
        let h = cfg.hidden;
        let z = cfg.latent;
        let mut heads = vec![("enc.w1", m + d, h), ("dec.w1", z, h), ("dec.w2", h, m)];
        match cfg.kind {
            RecommenderKind::Vae => heads.extend([("enc.w_mu", h, z), ("enc.w_logvar", h, z)]),
            RecommenderKind::Dae => heads.push(("enc.w_z", h, z)),
        }
        let mut ps = ParamSet::new();
        for (name, rows, cols) in heads {
            let w = init_weight(rows, cols, Activation::Tanh, &mut stream(seed, name, &[]));
            ps.insert(name, Owner::Recommender, w).unwrap();
            let bias_name = name.replace(".w", ".b");
            let b = init_weight(1, cols, Activation::Tanh, &mut stream(seed, &bias_name, &[]));
            ps.insert(&bias_name, Owner::Recommender, Tensor::vector(b.as_slice().to_vec()))
                .unwrap();
        }
        ps
    }

    fn toy_inputs(cfg: &RecommenderConfig, seed: u64) -> (Vec<Vec<usize>>, SparseRows<f64>, Tensor<f64>) {
        let rows = vec![vec![0, 2, 5], vec![1, 3]];
        let x = unit_observation_rows(&rows, cfg.n_items);
        let mut r = stream(seed, "v", &[]);
        let v = Tensor::new(
            vec![rows.len(), cfg.feedback_dim],
            (0..rows.len() * cfg.feedback_dim).map(|_| r.gen_range(-1.0f64..1.0)).collect(),
        )
        .unwrap();
        (rows, x, v)
    }

    #[test]
    fn unit_rows_have_unit_norm_and_empty_rows_stay_zero() {
        let x: SparseRows<f64> = unit_observation_rows(&[vec![1, 4, 7], vec![]], 9);
        let n: f64 = x.rows[0].iter().map(|&(_, v)| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(x.rows[1].is_empty());
    }

    #[test]
    fn zero_state_and_zero_biases_give_zero_latent_stats() {
        let cfg = toy_config(RecommenderKind::Vae);
        let mut ps = toy_params(&cfg, 3);
        for b in ["enc.b1", "enc.b_mu", "enc.b_logvar"] {
            let t = ps.get_mut(b).unwrap();
            *t = Tensor::zeros(t.dims().to_vec());
        }
        let x = unit_observation_rows(&[vec![]], cfg.n_items);
        let v = Tensor::zeros(vec![1, cfg.feedback_dim]);
        let enc = encode(&cfg, &ps, &x, &v).unwrap();
        assert!(enc.mu.as_slice().iter().all(|&t| t == 0.0));
        assert!(enc.logvar.unwrap().as_slice().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = toy_config(RecommenderKind::Vae);
        let ps = toy_params(&cfg, 5);
        let (_, x, v) = toy_inputs(&cfg, 5);
        let a = encode(&cfg, &ps, &x, &v).unwrap();
        let b = encode(&cfg, &ps, &x, &v).unwrap();
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.logvar, b.logvar);
    }

    fn layer_ref(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (din, dout) = w.mat_dims();
        assert_eq!(x.len(), din);
        (0..dout)
            .map(|j| {
                let mut s = b.as_slice()[j];
                for (p, &xv) in x.iter().enumerate() {
                    s += xv * w.as_slice()[p * dout + j];
                }
                s
            })
            .collect()
    }

    #[test]
    fn encode_matches_straight_line_reference() {
        let cfg = toy_config(RecommenderKind::Vae);
        let ps = toy_params(&cfg, 11);
        let (rows, x, v) = toy_inputs(&cfg, 11);
        let enc = encode(&cfg, &ps, &x, &v).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let mut xin = vec![0.0; cfg.n_items + cfg.feedback_dim];
            for &j in row {
                xin[j] = 1.0 / (row.len() as f64).sqrt();
            }
            xin[cfg.n_items..].copy_from_slice(v.row(i));
            let h: Vec<f64> = layer_ref(&xin, ps.get("enc.w1").unwrap(), ps.get("enc.b1").unwrap())
                .iter()
                .map(|t| t.tanh())
                .collect();
            let mu = layer_ref(&h, ps.get("enc.w_mu").unwrap(), ps.get("enc.b_mu").unwrap());
            let lv = layer_ref(&h, ps.get("enc.w_logvar").unwrap(), ps.get("enc.b_logvar").unwrap());
            for j in 0..cfg.latent {
                assert!((enc.mu.row(i)[j] - mu[j]).abs() < 1e-12);
                assert!((enc.logvar.as_ref().unwrap().row(i)[j] - lv[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_draws_are_seeded() {
        let x: SparseRows<f64> = unit_observation_rows(&[vec![0, 1, 2, 3, 4]], 5);
        let kept = dropout_rows(&x, 0.0, &mut stream(1, "drop", &[])).unwrap();
        assert_eq!(kept.rows, x.rows);
        let a = dropout_rows(&x, 0.6, &mut stream(1, "drop", &[])).unwrap();
        let b = dropout_rows(&x, 0.6, &mut stream(1, "drop", &[])).unwrap();
        let c = dropout_rows(&x, 0.6, &mut stream(2, "drop", &[])).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_ne!(a.rows, c.rows);
        assert!(matches!(dropout_rows(&x, 1.0, &mut stream(1, "d", &[])), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_rescaling_preserves_the_expectation() {
        let x: SparseRows<f64> = unit_observation_rows(&[vec![2, 7, 9]], 12);
        let orig = x.rows[0][0].1;
        let rate = 0.5;
        let mut rng = stream(9, "drop-mean", &[]);
        let trials = 4000;
        let mut sums = [0.0f64; 3];
        let mut any_dropped = false;
        for _ in 0..trials {
            let d = dropout_rows(&x, rate, &mut rng).unwrap();
            any_dropped |= d.rows[0].len() < 3;
            for &(j, val) in &d.rows[0] {
                let slot = [2, 7, 9].iter().position(|&c| c == j).unwrap();
                assert!((val - orig * 2.0).abs() < 1e-12);
                sums[slot] += val;
            }
        }
        assert!(any_dropped);
        for s in sums {
            let mean = s / trials as f64;
            assert!((mean - orig).abs() < 0.1 * orig, "mean {mean} vs {orig}");
        }
    }

    #[test]
    fn mean_mode_returns_mu_exactly() {
        let enc = Encoded {
            mu: Tensor::matrix(1, 3, vec![0.3, -0.7, 2.0]).unwrap(),
            logvar: Some(Tensor::matrix(1, 3, vec![0.5, -0.5, 0.1]).unwrap()),
        };
        let z = reparameterize(&enc, LatentMode::Mean, None).unwrap();
        assert_eq!(z, enc.mu);
    }

    #[test]
    fn vanishing_variance_sends_samples_to_mu() {
        let enc = Encoded {
            mu: Tensor::matrix(1, 3, vec![0.3, -0.7, 2.0]).unwrap(),
            logvar: Some(Tensor::matrix(1, 3, vec![-50.0; 3]).unwrap()),
        };
        let eps = standard_normal(1, 3, &mut stream(4, "eps", &[]));
        let z = reparameterize(&enc, LatentMode::Sample, Some(&eps)).unwrap();
        assert!(z.max_abs_diff(&enc.mu) < 1e-10);
    }

    #[test]
    fn sampling_requires_noise_of_matching_shape() {
        let enc = Encoded {
            mu: Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(),
            logvar: Some(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()),
        };
        assert!(matches!(
            reparameterize(&enc, LatentMode::Sample, None),
            Err(Error::Contract(_))
        ));
        let bad = Tensor::matrix(1, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(
            reparameterize(&enc, LatentMode::Sample, Some(&bad)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sample_mean_converges_to_mu() {
        let mu = [0.3, -1.2, 0.7, 2.0];
        let lv = [0.2, -0.5, 1.0, -2.0];
        let enc = Encoded {
            mu: Tensor::matrix(1, 4, mu.to_vec()).unwrap(),
            logvar: Some(Tensor::matrix(1, 4, lv.to_vec()).unwrap()),
        };
        let mut rng = stream(8, "mc", &[]);
        let n = 100_000;
        let mut sums = [0.0f64; 4];
        for _ in 0..n {
            let eps = standard_normal(1, 4, &mut rng);
            let z = reparameterize(&enc, LatentMode::Sample, Some(&eps)).unwrap();
            for (s, &zv) in sums.iter_mut().zip(z.as_slice()) {
                *s += zv;
            }
        }
        for j in 0..4 {
            let mean = sums[j] / n as f64;
            let sigma = (lv[j] / 2.0).exp();
            let tol = 4.0 * sigma / (n as f64).sqrt();
            assert!((mean - mu[j]).abs() < tol, "coord {j}: {mean} vs {}", mu[j]);
        }
    }

    #[test]
    fn zero_decoder_gives_the_uniform_distribution() {
        let cfg = toy_config(RecommenderKind::Vae);
        let mut ps = toy_params(&cfg, 2);
        for name in ["dec.w1", "dec.b1", "dec.w2", "dec.b2"] {
            let t = ps.get_mut(name).unwrap();
            *t = Tensor::zeros(t.dims().to_vec());
        }
        let z = Tensor::matrix(2, cfg.latent, vec![0.4; 2 * cfg.latent]).unwrap();
        let probs = decode(&cfg, &ps, &z).unwrap();
        let want = 1.0 / cfg.n_items as f64;
        assert!(probs.as_slice().iter().all(|&p| (p - want).abs() < 1e-12));
    }

    #[test]
    fn decoded_rows_are_probability_vectors() {
        let cfg = toy_config(RecommenderKind::Vae);
        let ps = toy_params(&cfg, 6);
        let mut r = stream(6, "z", &[]);
        let z = Tensor::new(
            vec![3, cfg.latent],
            (0..3 * cfg.latent).map(|_| r.gen_range(-2.0f64..2.0)).collect(),
        )
        .unwrap();
        let probs = decode(&cfg, &ps, &z).unwrap();
        for i in 0..3 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(probs.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn decode_matches_straight_line_reference() {
        let cfg = toy_config(RecommenderKind::Vae);
        let ps = toy_params(&cfg, 13);
        let z = Tensor::matrix(1, 3, vec![0.2, -1.1, 0.8]).unwrap();
        let probs = decode(&cfg, &ps, &z).unwrap();
        let h: Vec<f64> = layer_ref(z.row(0), ps.get("dec.w1").unwrap(), ps.get("dec.b1").unwrap())
            .iter()
            .map(|t| t.tanh())
            .collect();
        let logits = layer_ref(&h, ps.get("dec.w2").unwrap(), ps.get("dec.b2").unwrap());
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, want) in probs.as_slice().iter().zip(exps.iter().map(|e| e / total)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_terms_match_closed_forms() {
        let rows = vec![vec![0, 1], vec![2]];
        let logits = Tensor::zeros(vec![2, 4]);
        let enc = Encoded {
            mu: Tensor::zeros(vec![2, 3]),
            logvar: Some(Tensor::zeros(vec![2, 3])),
        };
        let loss = elbo_loss(&rows, &logits, &enc, 0.7).unwrap();
        assert!((loss - 3.0 * (4.0f64).ln()).abs() < 1e-12);

        let mu = Tensor::matrix(2, 3, vec![0.3, -0.2, 1.0, 0.0, 0.5, -0.5]).unwrap();
        let lv = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.0, 0.2, -1.0, 0.3]).unwrap();
        let enc2 = Encoded { mu: mu.clone(), logvar: Some(lv.clone()) };
        let beta = 0.4;
        let with_kl = elbo_loss(&rows, &logits, &enc2, beta).unwrap();
        let mut kl = 0.0;
        for (&m, &l) in mu.as_slice().iter().zip(lv.as_slice()) {
            kl += 0.5 * (l.exp() + m * m - 1.0 - l);
        }
        assert!((with_kl - (3.0 * (4.0f64).ln() + beta * kl)).abs() < 1e-10);
        assert!(matches!(
            elbo_loss(&[vec![0], vec![]], &logits, &enc2, beta),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            elbo_loss(&rows, &logits, &enc2, -0.1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn deterministic_variant_has_no_divergence_and_bounded_latents() {
        let cfg = toy_config(RecommenderKind::Dae);
        let ps = toy_params(&cfg, 21);
        let (rows, x, v) = toy_inputs(&cfg, 21);
        let enc = encode(&cfg, &ps, &x, &v).unwrap();
        assert!(enc.logvar.is_none());
        assert!(enc.mu.as_slice().iter().all(|&t| t.abs() < 1.0));
        let eps = standard_normal(rows.len(), cfg.latent, &mut stream(21, "eps", &[]));
        let z = reparameterize(&enc, LatentMode::Sample, Some(&eps)).unwrap();
        assert_eq!(z, enc.mu);
        let logits = decode_logits(&cfg, &ps, &z).unwrap();
        let a = elbo_loss(&rows, &logits, &enc, 0.0).unwrap();
        let b = elbo_loss(&rows, &logits, &enc, 5.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_and_taped_forwards_are_bit_identical() {
        for kind in [RecommenderKind::Vae, RecommenderKind::Dae] {
            let cfg = toy_config(kind);
            let ps = toy_params(&cfg, 17);
            let (rows, x, v) = toy_inputs(&cfg, 17);
            let eps = standard_normal(rows.len(), cfg.latent, &mut stream(17, "eps", &[]));
            let beta = 0.3;

            let enc = encode(&cfg, &ps, &x, &v).unwrap();
            let z = reparameterize(&enc, LatentMode::Sample, Some(&eps)).unwrap();
            let logits = decode_logits(&cfg, &ps, &z).unwrap();
            let probs = softmax_rows(&logits);
            let loss = elbo_loss(&rows, &logits, &enc, beta).unwrap();

            let mut tape = Tape::new();
            let vt = tape.constant(v.clone());
            let enc_t =
                encode_on_tape(&mut tape, &cfg, &ps, true, Rc::new(x.clone()), vt).unwrap();
            let z_t = reparameterize_on_tape(&mut tape, &enc_t, LatentMode::Sample, Some(&eps))
                .unwrap();
            let logits_t = decode_logits_on_tape(&mut tape, &cfg, &ps, true, z_t).unwrap();
            let probs_t = tape.softmax(logits_t);
            let loss_t =
                elbo_on_tape(&mut tape, Rc::new(rows.clone()), logits_t, &enc_t, beta).unwrap();

            assert_eq!(tape.value(enc_t.mu), &enc.mu);
            assert_eq!(tape.value(z_t), &z);
            assert_eq!(tape.value(logits_t), &logits);
            assert_eq!(tape.value(probs_t), &probs);
            assert_eq!(tape.value(loss_t).item().unwrap(), loss);

            let grads = tape.backward(loss_t).unwrap();
            assert_eq!(grads.len(), ps.len());
        }
    }

    #[test]
    fn elbo_gradient_passes_finite_differences() {
        let cfg = toy_config(RecommenderKind::Vae);
        let ps = toy_params(&cfg, 23);
        let (rows, x, v) = toy_inputs(&cfg, 23);
        let rows = Rc::new(rows);
        let x = Rc::new(x);
        let max_err = crate::gradcheck::grad_check(
            |p: &ParamSet<f64>| {
                let mut tape = Tape::new();
                let vt = tape.constant(v.clone());
                let enc = encode_on_tape(&mut tape, &cfg, p, true, x.clone(), vt)?;
                let z = reparameterize_on_tape(&mut tape, &enc, LatentMode::Mean, None)?;
                let logits = decode_logits_on_tape(&mut tape, &cfg, p, true, z)?;
                let loss = elbo_on_tape(&mut tape, rows.clone(), logits, &enc, 0.25)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item()?, grads))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(max_err < 1e-4, "max relative error {max_err}");
    }

    #[test]
    fn top_k_excludes_history_and_breaks_ties_low() {
        let got = recommend_top_k(&[0.1, 0.5, 0.4], &[], 1).unwrap();
        assert_eq!(got, TopK { items: vec![1], short: false });
        let got = recommend_top_k(&[0.1, 0.5, 0.4], &[1], 1).unwrap();
        assert_eq!(got, TopK { items: vec![2], short: false });
        let got = recommend_top_k(&[0.2, 0.5, 0.5, 0.2], &[], 4).unwrap();
        assert_eq!(got.items, vec![1, 2, 0, 3]);
        let got = recommend_top_k(&[0.1, 0.5, 0.4], &[1], 5).unwrap();
        assert_eq!(got, TopK { items: vec![2, 0], short: true });
        assert!(matches!(recommend_top_k(&[0.1], &[], 0), Err(Error::Parameter(_))));
        assert!(matches!(recommend_top_k(&[0.1], &[3], 1), Err(Error::Shape(_))));
        assert!(matches!(
            recommend_top_k(&[f64::NAN, 0.1], &[], 1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn top_k_matches_the_full_sort_oracle() {
        let mut rng = stream(31, "topk", &[]);
        for trial in 0..25 {
            let m = 50;
            let mut scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0f64..1.0)).collect();
            for i in (0..m).step_by(7) {
                scores[i] = 0.25;
            }
            let history: Vec<usize> =
                (0..m).filter(|_| rng.gen_bool(0.2)).collect();
            let k = 1 + trial % 12;
            let got = recommend_top_k(&scores, &history, k).unwrap();

            let mut order: Vec<usize> = (0..m).filter(|j| !history.contains(j)).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            order.truncate(k);
            assert_eq!(got.items, order, "trial {trial}");
            assert!(!got.items.iter().any(|j| history.contains(j)));
            for w in got.items.windows(2) {
                assert!(scores[w[0]] >= scores[w[1]]);
            }
        }
    }
}
