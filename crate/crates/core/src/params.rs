//! Named parameter sets with ownership groups.
//!
//! Parameters are stored in insertion order under stable string names. Each
//! belongs to one owner group; the training stages select which groups a
//! given update is allowed to touch, and the optimizer enforces that split.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which training party a parameter belongs to.
///
/// `Recommender` covers the encoder and decoder, `Reward` the reward
/// estimator, `Feedback` the feedback generator, and `Fusion` the shared
/// item lookup table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Owner {
    Recommender,
    Reward,
    Feedback,
    Fusion,
}

impl Owner {
    pub fn code(self) -> &'static str {
        match self {
            Owner::Recommender => "recommender",
            Owner::Reward => "reward",
            Owner::Feedback => "feedback",
            Owner::Fusion => "fusion",
        }
    }

    pub fn from_code(s: &str) -> Result<Owner> {
        match s {
            "recommender" => Ok(Owner::Recommender),
            "reward" => Ok(Owner::Reward),
            "feedback" => Ok(Owner::Feedback),
            "fusion" => Ok(Owner::Fusion),
            _ => Err(Error::Format(format!("unknown owner {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub owner: Owner,
}

/// All trainable state of the system, keyed by name in insertion order.
#[derive(Clone, Debug)]
pub struct ParamSet<S> {
    entries: IndexMap<String, Param<S>>,
}

/// Gradients for a subset of the parameters, keyed like the set they
/// were taken against.
pub type GradSet<S> = IndexMap<String, Tensor<S>>;

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, owner: Owner, value: Tensor<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(name.to_string(), Param { value, owner });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))
    }

    pub fn owner(&self, name: &str) -> Result<Owner> {
        self.entries
            .get(name)
            .map(|p| p.owner)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names owned by any of the given groups, in insertion order.
    pub fn names_owned_by(&self, owners: &[Owner]) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| owners.contains(&p.owner))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total number of scalar entries across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite_all())
    }

    /// Converts every tensor through f64, for checkpoint round-trips.
    pub fn map_scalar<T: Scalar>(&self) -> ParamSet<T> {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| {
                let data: Vec<T> = p
                    .value
                    .as_slice()
                    .iter()
                    .map(|&v| T::from_f64_lossy(v.to_f64_lossy()))
                    .collect();
                let value = Tensor::new(p.value.dims().to_vec(), data).expect("same dims");
                (k.clone(), Param { value, owner: p.owner })
            })
            .collect();
        ParamSet { entries }
    }
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("b", Owner::Recommender, Tensor::vector(vec![1.0])).unwrap();
        ps.insert("a", Owner::Reward, Tensor::vector(vec![2.0])).unwrap();
        ps.insert("c", Owner::Fusion, Tensor::vector(vec![3.0])).unwrap();
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, vec!["b", "a", "c"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Owner::Recommender, Tensor::vector(vec![0.0])).unwrap();
        assert!(ps.insert("w", Owner::Reward, Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn owner_filtering() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("enc.w", Owner::Recommender, Tensor::vector(vec![0.0])).unwrap();
        ps.insert("reward.w", Owner::Reward, Tensor::vector(vec![0.0])).unwrap();
        ps.insert("fb.w", Owner::Feedback, Tensor::vector(vec![0.0])).unwrap();
        ps.insert("table", Owner::Fusion, Tensor::vector(vec![0.0])).unwrap();
        let theta_side = ps.names_owned_by(&[Owner::Recommender, Owner::Feedback, Owner::Fusion]);
        assert_eq!(theta_side, vec!["enc.w", "fb.w", "table"]);
        let phi_side = ps.names_owned_by(&[Owner::Reward]);
        assert_eq!(phi_side, vec!["reward.w"]);
    }

    #[test]
    fn scalar_conversion_round_trip() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Owner::Recommender, Tensor::vector(vec![0.5, -0.25])).unwrap();
        let ps32: ParamSet<f32> = ps.map_scalar();
        let back: ParamSet<f64> = ps32.map_scalar();
        assert_eq!(back.get("w").unwrap().as_slice(), &[0.5, -0.25]);
    }
}
