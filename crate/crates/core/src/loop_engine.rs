//! The closed recommendation loop: T-step unrolled feedback, the
//! collaborative and adversarial losses over it, and the three-stage
//! alternating training schedule.
//!
//! Losses exist twice, like the forward passes they are built from: a plain
//! version for inspection and oracles, a tape version for training. Both
//! run the same kernels in the same order, so they agree bitwise.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::{recommender_weight_names, ModelBundle, RecommenderConfig, RecommenderKind};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Owner, ParamSet};
use crate::recommender::{
    decode, decode_logits, decode_logits_on_tape, dropout_rows, elbo_loss, elbo_on_tape, encode,
    encode_on_tape, reparameterize, reparameterize_on_tape, standard_normal,
    unit_observation_rows, Encoded, EncodedVar, LatentMode,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{entropy_mean_value, mean_log_sigmoid_value, Tape, Var};
use crate::tensor::{normalize_rows, softmax_rows, SparseRows, Tensor};
use crate::virtual_user::{
    estimate_reward, estimate_reward_on_tape, fuse, fuse_on_tape, fuse_sparse,
    fuse_sparse_on_tape, generate_feedback, generate_feedback_on_tape, mean_pooled_rows, Reward,
};

/// How a forward pass is randomized: training samples the latent and drops
/// observation entries, evaluation uses the mean and the full row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnrollMode {
    Train,
    Eval,
}

/// One pass around the loop: the policy's preference distribution, the
/// estimated reward on it, and the normalized feedback embedding handed to
/// the next pass.
#[derive(Clone, Debug)]
pub struct LoopStep<S> {
    pub action: Tensor<S>,
    pub reward: Reward<S>,
    pub feedback: Tensor<S>,
}

/// A finished unroll. `steps` holds one entry per loop pass and is empty
/// for T = 0, where the recommender runs once on a zero feedback embedding.
/// The final pass's encoder output, logits, and preference distribution sit
/// alongside; for T >= 1, `action` equals the last step's action.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub steps: Vec<LoopStep<S>>,
    pub encoded: Encoded<S>,
    pub logits: Tensor<S>,
    pub action: Tensor<S>,
}

/// Which parameter families learn on a tape. Frozen families still shape
/// the forward values but receive no gradient entries.
#[derive(Clone, Copy, Debug)]
pub struct TapeRoles {
    pub recommender: bool,
    pub fusion: bool,
    pub feedback: bool,
    pub reward: bool,
}

impl TapeRoles {
    /// Generator-side update: everything but the reward estimator learns.
    pub const COLLABORATIVE: TapeRoles = TapeRoles {
        recommender: true,
        fusion: true,
        feedback: true,
        reward: false,
    };
}

/// Tape-resident counterpart of `LoopStep`; the reward keeps its sigmoid
/// pre-activation so losses can reduce it stably.
#[derive(Clone, Copy, Debug)]
pub struct TapedStep {
    pub action: Var,
    pub reward_pre: Var,
    pub reward: Var,
    pub feedback: Var,
}

/// Tape-resident counterpart of `Trajectory`.
#[derive(Clone, Debug)]
pub struct TapedTrajectory {
    pub steps: Vec<TapedStep>,
    pub encoded: EncodedVar,
    pub logits: Var,
    pub action: Var,
}

/// Randomness for one unroll, drawn up front so the plain and taped paths
/// consume identical streams. Per recommender pass: the dropout-thinned
/// observation block first, then the latent noise (drawn only for a
/// sampling variational pass). Pass count is max(T, 1).
#[derive(Clone, Debug)]
pub struct StepInputs<S> {
    pub t_steps: usize,
    pub dropped: Vec<Rc<SparseRows<S>>>,
    pub eps: Vec<Option<Tensor<S>>>,
}

pub fn draw_step_inputs<S: Scalar>(
    cfg: &RecommenderConfig,
    x_norm: &SparseRows<S>,
    t_steps: usize,
    mode: LatentMode,
    dropout: bool,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<StepInputs<S>> {
    let n = x_norm.n_rows();
    let sampling = mode == LatentMode::Sample && cfg.kind == RecommenderKind::Vae;
    let mut dropped = Vec::new();
    let mut eps = Vec::new();
    for _ in 0..t_steps.max(1) {
        dropped.push(if dropout {
            Rc::new(dropout_rows(x_norm, cfg.input_dropout_rate, need_rng(&mut rng)?)?)
        } else {
            Rc::new(x_norm.clone())
        });
        eps.push(if sampling {
            Some(standard_normal(n, cfg.latent, need_rng(&mut rng)?))
        } else {
            None
        });
    }
    Ok(StepInputs { t_steps, dropped, eps })
}

fn need_rng<'a>(rng: &'a mut Option<&mut ChaCha12Rng>) -> Result<&'a mut ChaCha12Rng> {
    rng.as_deref_mut()
        .ok_or_else(|| Error::Contract("stochastic step inputs need an rng".into()))
}

fn passes<S>(inputs: &StepInputs<S>) -> usize {
    inputs.t_steps.max(1)
}

fn check_step_inputs<S: Scalar>(inputs: &StepInputs<S>) -> Result<()> {
    if inputs.dropped.len() != passes(inputs) || inputs.eps.len() != passes(inputs) {
        return Err(Error::Contract("step inputs sized for a different unroll".into()));
    }
    if inputs.dropped[0].n_rows() == 0 {
        return Err(Error::Contract("unroll over an empty batch".into()));
    }
    Ok(())
}

/// Runs the loop from pre-drawn inputs. T = 0 is a single bare recommender
/// pass on a zero feedback embedding; otherwise each pass's action is
/// fused, rewarded, and turned into the next pass's feedback embedding.
pub fn unroll_with_inputs<S: Scalar>(
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    x_mean: &SparseRows<S>,
    mode: LatentMode,
    inputs: &StepInputs<S>,
) -> Result<Trajectory<S>> {
    check_step_inputs(inputs)?;
    let n = inputs.dropped[0].n_rows();
    let table = params.get("fusion.table")?;
    let mut v = Tensor::zeros(vec![n, cfg.feedback_dim]);
    let mut steps = Vec::with_capacity(inputs.t_steps);
    let mut last = None;
    for pass in 0..passes(inputs) {
        let enc = encode(cfg, params, &inputs.dropped[pass], &v)?;
        let z = reparameterize(&enc, mode, inputs.eps[pass].as_ref())?;
        let logits = decode_logits(cfg, params, &z)?;
        let action = softmax_rows(&logits);
        if inputs.t_steps > 0 {
            let h = fuse(x_mean, &action, table)?;
            let reward = estimate_reward(params, &h)?;
            let fb = generate_feedback(params, &h, &reward.r)?;
            let feedback = normalize_rows(&fb);
            v = feedback.clone();
            steps.push(LoopStep { action: action.clone(), reward, feedback });
        }
        last = Some((enc, logits, action));
    }
    let (encoded, logits, action) = last.expect("at least one pass");
    Ok(Trajectory { steps, encoded, logits, action })
}

/// Tape twin of `unroll_with_inputs`.
pub fn unroll_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    roles: &TapeRoles,
    x_mean: Rc<SparseRows<S>>,
    mode: LatentMode,
    inputs: &StepInputs<S>,
) -> Result<TapedTrajectory> {
    check_step_inputs(inputs)?;
    let n = inputs.dropped[0].n_rows();
    let mut v = tape.constant(Tensor::zeros(vec![n, cfg.feedback_dim]));
    let mut steps = Vec::with_capacity(inputs.t_steps);
    let mut last = None;
    for pass in 0..passes(inputs) {
        let enc = encode_on_tape(
            tape,
            cfg,
            params,
            roles.recommender,
            inputs.dropped[pass].clone(),
            v,
        )?;
        let z = reparameterize_on_tape(tape, &enc, mode, inputs.eps[pass].as_ref())?;
        let logits = decode_logits_on_tape(tape, cfg, params, roles.recommender, z)?;
        let action = tape.softmax(logits);
        if inputs.t_steps > 0 {
            let h = fuse_on_tape(tape, params, roles.fusion, x_mean.clone(), action)?;
            let (reward_pre, reward) = estimate_reward_on_tape(tape, params, roles.reward, h)?;
            let fb = generate_feedback_on_tape(tape, params, roles.feedback, h, reward)?;
            let feedback = tape.normalize_rows(fb);
            v = feedback;
            steps.push(TapedStep { action, reward_pre, reward, feedback });
        }
        last = Some((enc, logits, action));
    }
    let (encoded, logits, action) = last.expect("at least one pass");
    Ok(TapedTrajectory { steps, encoded, logits, action })
}

/// Unrolls the loop on a batch of observation rows. Train mode samples the
/// latent and drops input entries, so it needs an rng; eval mode is
/// deterministic and needs none.
pub fn unroll<S: Scalar>(
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    index_rows: &[Vec<usize>],
    t_steps: usize,
    mode: UnrollMode,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<Trajectory<S>> {
    if index_rows.is_empty() {
        return Err(Error::Contract("unroll over an empty batch".into()));
    }
    let x_norm = unit_observation_rows(index_rows, cfg.n_items);
    let x_mean = mean_pooled_rows(index_rows, cfg.n_items);
    let (latent, dropout) = match mode {
        UnrollMode::Train => (LatentMode::Sample, true),
        UnrollMode::Eval => (LatentMode::Mean, false),
    };
    let inputs = draw_step_inputs(cfg, &x_norm, t_steps, latent, dropout, rng)?;
    unroll_with_inputs(cfg, params, &x_mean, latent, &inputs)
}

/// Loss coefficients for the collaborative objective.
#[derive(Clone, Copy, Debug)]
pub struct CollaborativeWeights<S> {
    pub beta: S,
    pub entropy_weight: S,
    pub l2_penalty: S,
}

/// Collaborative loss pieces: the batch total actually minimized, the
/// evidence-bound term inside it, and the mean log reward at the final step
/// (absent for a bare T = 0 pass).
#[derive(Clone, Copy, Debug)]
pub struct CollaborativeParts<S> {
    pub total: S,
    pub elbo: S,
    pub mean_log_reward: Option<S>,
}

/// Batch training objective over a finished unroll: the summed evidence
/// bound, minus the mean log reward at the final step, minus the weighted
/// mean action entropy, plus the l2 penalty on the listed weight matrices.
/// Term order matches the taped twin exactly.
pub fn collaborative_loss<S: Scalar>(
    params: &ParamSet<S>,
    index_rows: &[Vec<usize>],
    traj: &Trajectory<S>,
    weights: CollaborativeWeights<S>,
    weight_names: &[String],
) -> Result<CollaborativeParts<S>> {
    if index_rows.is_empty() {
        return Err(Error::Contract("collaborative loss over an empty batch".into()));
    }
    let elbo = elbo_loss(index_rows, &traj.logits, &traj.encoded, weights.beta)?;
    let mut total = elbo;
    let mut mean_log_reward = None;
    if let Some(last) = traj.steps.last() {
        let mls = mean_log_sigmoid_value(&last.reward.pre, false);
        total = total + mls * -S::one();
        mean_log_reward = Some(mls);
    }
    if weights.entropy_weight != S::zero() {
        total = total + entropy_mean_value(&traj.logits) * -weights.entropy_weight;
    }
    if weights.l2_penalty != S::zero() {
        for name in weight_names {
            let sq: S = params.get(name)?.as_slice().iter().map(|&v| v * v).sum();
            total = total + sq * weights.l2_penalty;
        }
    }
    Ok(CollaborativeParts { total, elbo, mean_log_reward })
}

/// Scalar nodes of the taped collaborative loss.
#[derive(Clone, Copy, Debug)]
pub struct CollaborativeVars {
    pub total: Var,
    pub elbo: Var,
    pub mean_log_reward: Option<Var>,
}

/// Tape twin of `collaborative_loss` over its own taped unroll; returns the
/// trajectory too so callers can reuse the final action.
pub fn collaborative_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    roles: &TapeRoles,
    index_rows: Rc<Vec<Vec<usize>>>,
    x_mean: Rc<SparseRows<S>>,
    mode: LatentMode,
    inputs: &StepInputs<S>,
    weights: CollaborativeWeights<S>,
    weight_names: &[String],
) -> Result<(CollaborativeVars, TapedTrajectory)> {
    if index_rows.is_empty() {
        return Err(Error::Contract("collaborative loss over an empty batch".into()));
    }
    let traj = unroll_on_tape(tape, cfg, params, roles, x_mean, mode, inputs)?;
    let elbo = elbo_on_tape(tape, index_rows, traj.logits, &traj.encoded, weights.beta)?;
    let mut total = elbo;
    let mut mean_log_reward = None;
    if let Some(last) = traj.steps.last().copied() {
        let mls = tape.mean_log_sigmoid(last.reward_pre, false);
        let neg = tape.scale(mls, -S::one());
        total = tape.add(total, neg)?;
        mean_log_reward = Some(mls);
    }
    if weights.entropy_weight != S::zero() {
        let ent = tape.entropy_mean(traj.logits);
        let scaled = tape.scale(ent, -weights.entropy_weight);
        total = tape.add(total, scaled)?;
    }
    if weights.l2_penalty != S::zero() {
        for name in weight_names {
            let w = tape.bind(params, name, roles.recommender)?;
            let sq = tape.sum_sq(w);
            let scaled = tape.scale(sq, weights.l2_penalty);
            total = tape.add(total, scaled)?;
        }
    }
    Ok((CollaborativeVars { total, elbo, mean_log_reward }, traj))
}

/// Adversarial loss pieces: the discriminator objective (a quantity to
/// maximize) and the mean reward assigned to each side.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialParts<S> {
    pub total: S,
    pub mean_reward_expert: S,
    pub mean_reward_policy: S,
}

/// Discriminator objective: mean log reward over expert pairs plus mean
/// log(1 - reward) over policy pairs. The expert action is the pooled
/// observation row itself, a uniform preference over the user's items.
pub fn adversarial_loss<S: Scalar>(
    params: &ParamSet<S>,
    expert_pool: &SparseRows<S>,
    policy_pool: &SparseRows<S>,
    policy_action: &Tensor<S>,
) -> Result<AdversarialParts<S>> {
    if expert_pool.n_rows() == 0 || policy_pool.n_rows() == 0 {
        return Err(Error::Contract("adversarial loss over an empty batch".into()));
    }
    let table = params.get("fusion.table")?;
    let h_e = fuse_sparse(expert_pool, expert_pool, table)?;
    let r_e = estimate_reward(params, &h_e)?;
    let le = mean_log_sigmoid_value(&r_e.pre, false);
    let h_p = fuse(policy_pool, policy_action, table)?;
    let r_p = estimate_reward(params, &h_p)?;
    let lp = mean_log_sigmoid_value(&r_p.pre, true);
    Ok(AdversarialParts {
        total: le + lp,
        mean_reward_expert: tensor_mean(&r_e.r),
        mean_reward_policy: tensor_mean(&r_p.r),
    })
}

/// Scalar and reward nodes of the taped adversarial loss.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialVars {
    pub total: Var,
    pub reward_expert: Var,
    pub reward_policy: Var,
}

/// Tape twin of `adversarial_loss`: the policy action enters as a detached
/// constant, the fusion table is frozen, and only the reward estimator
/// learns. Maximize by minimizing the negated total.
pub fn adversarial_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    expert_pool: Rc<SparseRows<S>>,
    policy_pool: Rc<SparseRows<S>>,
    policy_action: Tensor<S>,
) -> Result<AdversarialVars> {
    if expert_pool.n_rows() == 0 || policy_pool.n_rows() == 0 {
        return Err(Error::Contract("adversarial loss over an empty batch".into()));
    }
    let h_e = fuse_sparse_on_tape(tape, params, false, expert_pool.clone(), expert_pool)?;
    let (pre_e, r_e) = estimate_reward_on_tape(tape, params, true, h_e)?;
    let le = tape.mean_log_sigmoid(pre_e, false);
    let action = tape.constant(policy_action);
    let h_p = fuse_on_tape(tape, params, false, policy_pool, action)?;
    let (pre_p, r_p) = estimate_reward_on_tape(tape, params, true, h_p)?;
    let lp = tape.mean_log_sigmoid(pre_p, true);
    let total = tape.add(le, lp)?;
    Ok(AdversarialVars { total, reward_expert: r_e, reward_policy: r_p })
}

/// Knobs of the three-stage schedule. Stage epochs of zero skip a stage
/// entirely; the unroll depth must be positive whenever stage 3 runs.
#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub t_steps: usize,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub entropy_weight: f64,
    pub l2_penalty: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            t_steps: 8,
            batch_size: 500,
            stage1_epochs: 0,
            stage2_epochs: 0,
            stage3_epochs: 0,
            entropy_weight: 0.0,
            l2_penalty: 0.01,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.stage3_epochs > 0 && self.t_steps == 0 {
            return Err(Error::Parameter(
                "the alternating stage needs at least one unroll step".into(),
            ));
        }
        for (name, v) in [
            ("entropy_weight", self.entropy_weight),
            ("l2_penalty", self.l2_penalty),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Per-epoch training telemetry. Loss fields are per-user-normalized batch
/// losses averaged over the epoch's batches; fields a stage does not
/// produce stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub stage: u8,
    pub epoch: usize,
    pub loss_rec: Option<f64>,
    pub loss_collab: Option<f64>,
    pub loss_adv: Option<f64>,
    pub mean_reward_expert: Option<f64>,
    pub mean_reward_policy: Option<f64>,
}

fn blank_report(stage: u8, epoch: usize) -> LossReport {
    LossReport {
        stage,
        epoch,
        loss_rec: None,
        loss_collab: None,
        loss_adv: None,
        mean_reward_expert: None,
        mean_reward_policy: None,
    }
}

fn check_training_inputs(
    config: &RecommenderConfig,
    tcfg: &TrainingConfig,
    rows: &[Vec<usize>],
) -> Result<()> {
    config.validate()?;
    tcfg.validate()?;
    if rows.is_empty() {
        return Err(Error::Data("no training users".into()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::Data(format!("training user {i} has no interactions")));
        }
        if row.iter().any(|&j| j >= config.n_items) {
            return Err(Error::Data(format!(
                "training user {i} references an item outside the catalog"
            )));
        }
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64, stage: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", &[stage, epoch]));
    order
}

fn gather_rows(rows: &[Vec<usize>], idx: &[usize]) -> Vec<Vec<usize>> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

fn annealed_beta<S: Scalar>(config: &RecommenderConfig, step: u64, total: u64) -> S {
    let frac = (step as f64 / total.max(1) as f64).min(1.0);
    S::from_f64_lossy(config.beta_max * frac)
}

fn batch_context(e: Error, stage: u8, epoch: usize, batch: usize) -> Error {
    let tag = format!("stage {stage} epoch {epoch} batch {batch}");
    match e {
        Error::Shape(m) => Error::Shape(format!("{tag}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{tag}: {m}")),
        Error::Contract(m) => Error::Contract(format!("{tag}: {m}")),
        Error::Data(m) => Error::Data(format!("{tag}: {m}")),
        Error::Format(m) => Error::Format(format!("{tag}: {m}")),
        Error::Parameter(m) => Error::Parameter(format!("{tag}: {m}")),
        Error::Io(e) => Error::Io(e),
    }
}

fn tensor_mean<S: Scalar>(t: &Tensor<S>) -> S {
    t.as_slice().iter().copied().sum::<S>() / S::from_f64_lossy(t.len().max(1) as f64)
}

/// A detached policy action batch: one sampling forward pass on a zero
/// feedback embedding.
fn policy_actions<S: Scalar>(
    cfg: &RecommenderConfig,
    params: &ParamSet<S>,
    rows: &[Vec<usize>],
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<S>> {
    let x_norm = unit_observation_rows(rows, cfg.n_items);
    let v0 = Tensor::zeros(vec![rows.len(), cfg.feedback_dim]);
    let enc = encode(cfg, params, &x_norm, &v0)?;
    let eps = match cfg.kind {
        RecommenderKind::Vae => Some(standard_normal(rows.len(), cfg.latent, rng)),
        RecommenderKind::Dae => None,
    };
    let z = reparameterize(&enc, LatentMode::Sample, eps.as_ref())?;
    decode(cfg, params, &z)
}

/// Stage 1: pretrain the recommender alone on the evidence bound with
/// input dropout, the annealed divergence weight, and the l2 penalty.
pub fn train_stage1<S: Scalar, F: FnMut(&LossReport)>(
    bundle: &mut ModelBundle<S>,
    rows: &[Vec<usize>],
    tcfg: &TrainingConfig,
    on_report: &mut F,
) -> Result<()> {
    let ModelBundle { config, params } = bundle;
    check_training_inputs(config, tcfg, rows)?;
    if tcfg.stage1_epochs == 0 {
        return Ok(());
    }
    let weight_names = recommender_weight_names(params);
    let update_names = params.names_owned_by(&[Owner::Recommender]);
    let mut opt = AdamState::new(tcfg.adam, params, &update_names)?;
    let batches = rows.len().div_ceil(tcfg.batch_size) as u64;
    let anneal_total = if config.beta_anneal_steps > 0 {
        config.beta_anneal_steps
    } else {
        tcfg.stage1_epochs as u64 * batches
    };
    let mut step: u64 = 0;
    for epoch in 1..=tcfg.stage1_epochs {
        let order = shuffled_indices(rows.len(), tcfg.seed, 1, epoch as u64);
        let mut rec_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            step += 1;
            let beta = annealed_beta::<S>(config, step, anneal_total);
            let mut rng = rng::stream(tcfg.seed, "noise", &[1, epoch as u64, b as u64 + 1]);
            let per_user = (|| -> Result<f64> {
                let batch_rows = gather_rows(rows, chunk);
                let x_norm = unit_observation_rows(&batch_rows, config.n_items);
                let x_mean = Rc::new(mean_pooled_rows(&batch_rows, config.n_items));
                let inputs =
                    draw_step_inputs(config, &x_norm, 0, LatentMode::Sample, true, Some(&mut rng))?;
                let weights = CollaborativeWeights {
                    beta,
                    entropy_weight: S::zero(),
                    l2_penalty: S::from_f64_lossy(tcfg.l2_penalty),
                };
                let mut tape = Tape::new();
                let (cv, _) = collaborative_loss_on_tape(
                    &mut tape,
                    config,
                    params,
                    &TapeRoles::COLLABORATIVE,
                    Rc::new(batch_rows),
                    x_mean,
                    LatentMode::Sample,
                    &inputs,
                    weights,
                    &weight_names,
                )?;
                let total = tape.value(cv.total).item()?;
                if !total.is_finite() {
                    return Err(Error::Numeric(format!("non-finite recommender loss {total}")));
                }
                let elbo = tape.value(cv.elbo).item()?.to_f64_lossy();
                let grads = tape.backward(cv.total)?;
                opt.step(params, &grads)?;
                Ok(elbo / chunk.len() as f64)
            })()
            .map_err(|e| batch_context(e, 1, epoch, b + 1))?;
            rec_sum += per_user;
            n_batches += 1;
        }
        let mut r = blank_report(1, epoch);
        r.loss_rec = Some(rec_sum / n_batches as f64);
        on_report(&r);
    }
    Ok(())
}

/// Stage 2: freeze the recommender and pretrain the reward estimator to
/// separate expert pairs from detached policy outputs, both on a zero
/// feedback embedding. The policy batch is drawn independently of the
/// expert batch; per-batch draw order is user sample, then latent noise.
pub fn train_stage2<S: Scalar, F: FnMut(&LossReport)>(
    bundle: &mut ModelBundle<S>,
    rows: &[Vec<usize>],
    tcfg: &TrainingConfig,
    on_report: &mut F,
) -> Result<()> {
    let ModelBundle { config, params } = bundle;
    check_training_inputs(config, tcfg, rows)?;
    if tcfg.stage2_epochs == 0 {
        return Ok(());
    }
    let update_names = params.names_owned_by(&[Owner::Reward]);
    let mut opt = AdamState::new(tcfg.adam, params, &update_names)?;
    for epoch in 1..=tcfg.stage2_epochs {
        let order = shuffled_indices(rows.len(), tcfg.seed, 2, epoch as u64);
        let (mut adv_sum, mut re_sum, mut rp_sum) = (0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let mut rng = rng::stream(tcfg.seed, "noise", &[2, epoch as u64, b as u64 + 1]);
            let (adv, re, rp) = (|| -> Result<(f64, f64, f64)> {
                let pick = rand::seq::index::sample(&mut rng, rows.len(), chunk.len()).into_vec();
                let expert_rows = gather_rows(rows, chunk);
                let policy_rows = gather_rows(rows, &pick);
                let expert_pool = Rc::new(mean_pooled_rows(&expert_rows, config.n_items));
                let policy_pool = Rc::new(mean_pooled_rows(&policy_rows, config.n_items));
                let action = policy_actions(config, params, &policy_rows, &mut rng)?;
                let mut tape = Tape::new();
                let av =
                    adversarial_loss_on_tape(&mut tape, params, expert_pool, policy_pool, action)?;
                let total = tape.value(av.total).item()?;
                if !total.is_finite() {
                    return Err(Error::Numeric(format!("non-finite adversarial loss {total}")));
                }
                let objective = tape.scale(av.total, -S::one());
                let grads = tape.backward(objective)?;
                opt.step(params, &grads)?;
                Ok((
                    total.to_f64_lossy(),
                    tensor_mean(tape.value(av.reward_expert)).to_f64_lossy(),
                    tensor_mean(tape.value(av.reward_policy)).to_f64_lossy(),
                ))
            })()
            .map_err(|e| batch_context(e, 2, epoch, b + 1))?;
            adv_sum += adv;
            re_sum += re;
            rp_sum += rp;
            n_batches += 1;
        }
        let mut r = blank_report(2, epoch);
        r.loss_adv = Some(adv_sum / n_batches as f64);
        r.mean_reward_expert = Some(re_sum / n_batches as f64);
        r.mean_reward_policy = Some(rp_sum / n_batches as f64);
        on_report(&r);
    }
    Ok(())
}

/// Stage 3: alternate per batch. First the recommender, feedback generator,
/// and fusion table take one step down the collaborative loss through a
/// T-step unroll; then the reward estimator takes one step up the
/// adversarial loss on the same users, discriminating the pooled expert
/// action from the final unrolled action, detached.
pub fn train_stage3<S: Scalar, F: FnMut(&LossReport)>(
    bundle: &mut ModelBundle<S>,
    rows: &[Vec<usize>],
    tcfg: &TrainingConfig,
    on_report: &mut F,
) -> Result<()> {
    let ModelBundle { config, params } = bundle;
    check_training_inputs(config, tcfg, rows)?;
    if tcfg.stage3_epochs == 0 {
        return Ok(());
    }
    let weight_names = recommender_weight_names(params);
    let collab_names =
        params.names_owned_by(&[Owner::Recommender, Owner::Feedback, Owner::Fusion]);
    let adv_names = params.names_owned_by(&[Owner::Reward]);
    let mut opt_collab = AdamState::new(tcfg.adam, params, &collab_names)?;
    let mut opt_adv = AdamState::new(tcfg.adam, params, &adv_names)?;
    let weights = CollaborativeWeights {
        beta: S::from_f64_lossy(config.beta_max),
        entropy_weight: S::from_f64_lossy(tcfg.entropy_weight),
        l2_penalty: S::from_f64_lossy(tcfg.l2_penalty),
    };
    for epoch in 1..=tcfg.stage3_epochs {
        let order = shuffled_indices(rows.len(), tcfg.seed, 3, epoch as u64);
        let (mut collab_sum, mut adv_sum, mut re_sum, mut rp_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let mut rng = rng::stream(tcfg.seed, "noise", &[3, epoch as u64, b as u64 + 1]);
            let (collab, adv, re, rp) = (|| -> Result<(f64, f64, f64, f64)> {
                let batch_rows = gather_rows(rows, chunk);
                let x_norm = unit_observation_rows(&batch_rows, config.n_items);
                let x_mean = Rc::new(mean_pooled_rows(&batch_rows, config.n_items));
                let inputs = draw_step_inputs(
                    config,
                    &x_norm,
                    tcfg.t_steps,
                    LatentMode::Sample,
                    true,
                    Some(&mut rng),
                )?;
                let mut tape = Tape::new();
                let (cv, traj) = collaborative_loss_on_tape(
                    &mut tape,
                    config,
                    params,
                    &TapeRoles::COLLABORATIVE,
                    Rc::new(batch_rows),
                    x_mean.clone(),
                    LatentMode::Sample,
                    &inputs,
                    weights,
                    &weight_names,
                )?;
                let collab_total = tape.value(cv.total).item()?;
                if !collab_total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite collaborative loss {collab_total}"
                    )));
                }
                let action = tape.value(traj.action).clone();
                let grads = tape.backward(cv.total)?;
                opt_collab.step(params, &grads)?;
                let mut tape = Tape::new();
                let av = adversarial_loss_on_tape(&mut tape, params, x_mean.clone(), x_mean, action)?;
                let adv_total = tape.value(av.total).item()?;
                if !adv_total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite adversarial loss {adv_total}"
                    )));
                }
                let objective = tape.scale(av.total, -S::one());
                let grads = tape.backward(objective)?;
                opt_adv.step(params, &grads)?;
                Ok((
                    collab_total.to_f64_lossy() / chunk.len() as f64,
                    adv_total.to_f64_lossy(),
                    tensor_mean(tape.value(av.reward_expert)).to_f64_lossy(),
                    tensor_mean(tape.value(av.reward_policy)).to_f64_lossy(),
                ))
            })()
            .map_err(|e| batch_context(e, 3, epoch, b + 1))?;
            collab_sum += collab;
            adv_sum += adv;
            re_sum += re;
            rp_sum += rp;
            n_batches += 1;
        }
        let mut r = blank_report(3, epoch);
        r.loss_collab = Some(collab_sum / n_batches as f64);
        r.loss_adv = Some(adv_sum / n_batches as f64);
        r.mean_reward_expert = Some(re_sum / n_batches as f64);
        r.mean_reward_policy = Some(rp_sum / n_batches as f64);
        on_report(&r);
    }
    Ok(())
}

/// The whole schedule: recommender pretraining, reward pretraining, then
/// per-batch alternation. Emits one report per epoch; deterministic given
/// the seed. Optimizer state starts fresh in every stage.
pub fn train<S: Scalar, F: FnMut(&LossReport)>(
    bundle: &mut ModelBundle<S>,
    rows: &[Vec<usize>],
    tcfg: &TrainingConfig,
    mut on_report: F,
) -> Result<()> {
    train_stage1(bundle, rows, tcfg, &mut on_report)?;
    train_stage2(bundle, rows, tcfg, &mut on_report)?;
    train_stage3(bundle, rows, tcfg, &mut on_report)
}
