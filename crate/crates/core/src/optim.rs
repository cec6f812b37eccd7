//! Adam optimizer scoped to a fixed subset of parameters.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Moments<S> {
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Moment estimates for one update party. Built over an explicit name list;
/// a gradient for any other parameter is rejected, which is what keeps each
/// alternating update on its own side of the min-max split.
pub struct AdamState<S> {
    cfg: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<S>, names: &[String]) -> Result<Self> {
        let mut moments = IndexMap::new();
        for name in names {
            let value = params.get(name)?;
            moments.insert(
                name.clone(),
                Moments {
                    m: Tensor::zeros(value.dims().to_vec()),
                    v: Tensor::zeros(value.dims().to_vec()),
                },
            );
        }
        Ok(AdamState {
            cfg,
            step: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn covers(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// One bias-corrected Adam update. Every gradient name must be covered by
    /// this state; gradients may cover a subset (missing names are left as
    /// they are, their moments still decay on the next step they appear).
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &GradSet<S>) -> Result<()> {
        for (name, g) in grads {
            if !self.moments.contains_key(name.as_str()) {
                return Err(Error::Parameter(format!(
                    "gradient for {name:?} outside this optimizer's parameter set"
                )));
            }
            if !g.is_finite_all() {
                return Err(Error::Numeric(format!("non-finite gradient for {name:?}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64_lossy(self.cfg.beta1);
        let b2 = S::from_f64_lossy(self.cfg.beta2);
        let one = S::one();
        let lr = S::from_f64_lossy(self.cfg.lr);
        let eps = S::from_f64_lossy(self.cfg.epsilon);
        let c1 = one - S::from_f64_lossy(self.cfg.beta1.powi(t));
        let c2 = one - S::from_f64_lossy(self.cfg.beta2.powi(t));
        for (name, g) in grads {
            let mom = self.moments.get_mut(name.as_str()).expect("checked above");
            let p = params.get_mut(name)?;
            if !p.same_shape(g) {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} vs parameter shape {:?} for {name:?}",
                    g.dims(),
                    p.dims()
                )));
            }
            let (pd, md, vd, gd) = (
                p.as_mut_slice(),
                mom.m.as_mut_slice(),
                mom.v.as_mut_slice(),
                g.as_slice(),
            );
            for i in 0..pd.len() {
                let gi = gd[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
