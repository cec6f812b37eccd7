//! Model configuration, the named parameter catalog, and initialization.

use crate::error::{Error, Result};
use crate::layers::{init_weight, Activation};
use crate::params::{Owner, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of the fused item embedding.
pub const FUSION_DIM: usize = 64;
/// Hidden width of the reward estimator and feedback generator.
pub const VU_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecommenderKind {
    Vae,
    Dae,
}

impl RecommenderKind {
    pub fn code(self) -> &'static str {
        match self {
            RecommenderKind::Vae => "vae",
            RecommenderKind::Dae => "dae",
        }
    }

    pub fn from_code(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(RecommenderKind::Vae),
            "dae" => Ok(RecommenderKind::Dae),
            _ => Err(Error::Format(format!("unknown recommender kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecommenderConfig {
    pub kind: RecommenderKind,
    pub n_items: usize,
    pub feedback_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub input_dropout_rate: f64,
    pub beta_max: f64,
    /// Steps over which beta ramps 0 → beta_max; 0 means the whole first
    /// training stage.
    pub beta_anneal_steps: u64,
}

impl RecommenderConfig {
    pub fn new(n_items: usize) -> Self {
        RecommenderConfig {
            kind: RecommenderKind::Vae,
            n_items,
            feedback_dim: 128,
            hidden: 600,
            latent: 200,
            input_dropout_rate: 0.5,
            beta_max: 0.2,
            beta_anneal_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.feedback_dim == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout_rate) {
            return Err(Error::Parameter(format!(
                "input dropout {} outside [0,1)",
                self.input_dropout_rate
            )));
        }
        if self.beta_max < 0.0 || !self.beta_max.is_finite() {
            return Err(Error::Parameter(format!("bad beta_max {}", self.beta_max)));
        }
        Ok(())
    }
}

/// The full trainable system: configuration plus every named parameter.
#[derive(Clone, Debug)]
pub struct ModelBundle<S> {
    pub config: RecommenderConfig,
    pub params: ParamSet<S>,
}

/// Catalog entry: name, owner, rows, cols (cols 0 = bias vector), and the
/// activation the weights feed, which fixes the init scale.
fn catalog(cfg: &RecommenderConfig) -> Vec<(&'static str, Owner, usize, usize, Activation)> {
    use Activation::{Identity, Relu, Tanh};
    use Owner::{Feedback, Fusion, Recommender, Reward};
    let m = cfg.n_items;
    let d = cfg.feedback_dim;
    let h = cfg.hidden;
    let z = cfg.latent;
    let f = FUSION_DIM;
    let v = VU_HIDDEN;
    let mut cat = vec![("enc.w1", Recommender, m + d, h, Tanh), ("enc.b1", Recommender, h, 0, Tanh)];
    match cfg.kind {
        RecommenderKind::Vae => {
            cat.push(("enc.w_mu", Recommender, h, z, Identity));
            cat.push(("enc.b_mu", Recommender, z, 0, Identity));
            cat.push(("enc.w_logvar", Recommender, h, z, Identity));
            cat.push(("enc.b_logvar", Recommender, z, 0, Identity));
        }
        RecommenderKind::Dae => {
            cat.push(("enc.w_z", Recommender, h, z, Tanh));
            cat.push(("enc.b_z", Recommender, z, 0, Tanh));
        }
    }
    cat.extend([
        ("dec.w1", Recommender, z, h, Tanh),
        ("dec.b1", Recommender, h, 0, Tanh),
        ("dec.w2", Recommender, h, m, Identity),
        ("dec.b2", Recommender, m, 0, Identity),
        ("fusion.table", Fusion, m, f, Identity),
        ("reward.w1", Reward, f, v, Relu),
        ("reward.b1", Reward, v, 0, Relu),
        ("reward.w2", Reward, v, v, Relu),
        ("reward.b2", Reward, v, 0, Relu),
        ("reward.w3", Reward, v, v, Relu),
        ("reward.b3", Reward, v, 0, Relu),
        ("reward.w4", Reward, v, 1, Identity),
        ("reward.b4", Reward, 1, 0, Identity),
        ("feedback.w1", Feedback, f + 1, v, Relu),
        ("feedback.b1", Feedback, v, 0, Relu),
        ("feedback.w2", Feedback, v, v, Relu),
        ("feedback.b2", Feedback, v, 0, Relu),
        ("feedback.w3", Feedback, v, d, Identity),
        ("feedback.b3", Feedback, d, 0, Identity),
    ]);
    cat
}

impl<S: Scalar> ModelBundle<S> {
    /// Fresh parameters: weights uniform at the layer's init scale from
    /// per-name seed streams, biases zero.
    pub fn init(config: RecommenderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, owner, rows, cols, act) in catalog(&config) {
            let value = if cols == 0 {
                Tensor::zeros(vec![rows])
            } else {
                let mut stream = rng::stream(seed, &format!("init.{name}"), &[]);
                init_weight(rows, cols, act, &mut stream)
            };
            params.insert(name, owner, value)?;
        }
        Ok(ModelBundle { config, params })
    }

    /// Wraps an existing parameter set, checking it against the catalog.
    pub fn from_parts(config: RecommenderConfig, params: ParamSet<S>) -> Result<Self> {
        config.validate()?;
        let cat = catalog(&config);
        if params.len() != cat.len() {
            return Err(Error::Parameter(format!(
                "{} parameters, catalog expects {}",
                params.len(),
                cat.len()
            )));
        }
        for (name, owner, rows, cols, _) in cat {
            let t = params.get(name)?;
            let want: &[usize] = &if cols == 0 { vec![rows] } else { vec![rows, cols] };
            if t.dims() != want {
                return Err(Error::Parameter(format!(
                    "{name} has dims {:?}, expected {want:?}",
                    t.dims()
                )));
            }
            if params.owner(name)? != owner {
                return Err(Error::Parameter(format!("{name} has the wrong owner")));
            }
        }
        Ok(ModelBundle { config, params })
    }

    /// Recommender-owned weight matrices (not biases): the l2 penalty set.
    pub fn recommender_weight_names(&self) -> Vec<String> {
        recommender_weight_names(&self.params)
    }

    /// Parameters updated by the collaborative step: recommender, feedback
    /// generator, fusion table.
    pub fn collaborative_names(&self) -> Vec<String> {
        self.params
            .names_owned_by(&[Owner::Recommender, Owner::Feedback, Owner::Fusion])
    }

    /// Parameters updated by the adversarial step: the reward estimator.
    pub fn adversarial_names(&self) -> Vec<String> {
        self.params.names_owned_by(&[Owner::Reward])
    }
}

/// Recommender-owned weight matrices (not biases) in any parameter set,
/// catalog-shaped or not: the l2 penalty set.
pub fn recommender_weight_names<S: Scalar>(params: &ParamSet<S>) -> Vec<String> {
    params
        .iter()
        .filter(|(_, p)| p.owner == Owner::Recommender && p.value.rank() == 2)
        .map(|(n, _)| n.to_string())
        .collect()
}
