//! Low-rank synthetic interaction data.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Draws rank-`rank` user and item factors from a seeded standard normal
/// and samples each user's items from the softmax of that user's affinity
/// logits, without replacement. Row sizes are fixed by an allocation whose
/// mean is exactly `avg_items_per_user`.
pub fn generate_synthetic(
    n_users: usize,
    n_items: usize,
    rank: usize,
    avg_items_per_user: f64,
    seed: u64,
) -> Result<InteractionMatrix> {
    if n_users == 0 || n_items == 0 {
        return Err(Error::Parameter("empty synthetic matrix requested".into()));
    }
    if rank == 0 || rank > n_users.min(n_items) {
        return Err(Error::Parameter(format!(
            "rank {rank} outside [1, min({n_users}, {n_items})]"
        )));
    }
    if avg_items_per_user < 2.0 {
        return Err(Error::Parameter(format!(
            "need at least 2 items per user on average, got {avg_items_per_user}"
        )));
    }
    let mut factor_rng = rng::stream(seed, "synthetic-factors", &[]);
    let u: Tensor<f64> = Tensor::new(
        vec![n_users, rank],
        (0..n_users * rank)
            .map(|_| factor_rng.sample(StandardNormal))
            .collect(),
    )?;
    let v: Tensor<f64> = Tensor::new(
        vec![n_items, rank],
        (0..n_items * rank)
            .map(|_| factor_rng.sample(StandardNormal))
            .collect(),
    )?;
    let counts = allocate_counts(n_users, n_items, avg_items_per_user, seed)?;
    generate_synthetic_from_factors(&u, &v, &counts, seed)
}

/// Row sizes summing to round(avg · n_users), as equal as possible; the
/// users receiving the extra item are chosen by seed-keyed order.
fn allocate_counts(
    n_users: usize,
    n_items: usize,
    avg_items_per_user: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    let total = (avg_items_per_user * n_users as f64).round() as usize;
    let base = total / n_users;
    let extra = total % n_users;
    let ceiling = base + usize::from(extra > 0);
    if ceiling > n_items {
        return Err(Error::Parameter(format!(
            "average of {avg_items_per_user} items per user is infeasible with {n_items} items"
        )));
    }
    let mut order: Vec<usize> = (0..n_users).collect();
    order.sort_by_key(|&i| rng::sort_key(seed, "synthetic-extra", i as u64));
    let mut counts = vec![base; n_users];
    for &i in order.iter().take(extra) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Samples each user's row from softmax(U_i · Vᵀ) without replacement using
/// Gumbel perturbation: the `counts[i]` largest values of logit + Gumbel
/// noise are exactly a sequential softmax draw.
pub fn generate_synthetic_from_factors<S: Scalar>(
    user_factors: &Tensor<S>,
    item_factors: &Tensor<S>,
    counts: &[usize],
    seed: u64,
) -> Result<InteractionMatrix> {
    let (n_users, rank) = user_factors.mat_dims();
    let (n_items, rank_v) = item_factors.mat_dims();
    if rank != rank_v {
        return Err(Error::Shape(format!("factor ranks {rank} vs {rank_v}")));
    }
    if counts.len() != n_users {
        return Err(Error::Parameter(format!(
            "{} counts for {n_users} users",
            counts.len()
        )));
    }
    let mut rows = Vec::with_capacity(n_users);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n_items);
    for i in 0..n_users {
        let count = counts[i];
        if count > n_items {
            return Err(Error::Parameter(format!(
                "user {i} requests {count} of {n_items} items"
            )));
        }
        let uf = user_factors.row(i);
        let mut item_rng = rng::stream(seed, "synthetic-items", &[i as u64]);
        keyed.clear();
        for j in 0..n_items {
            let vf = item_factors.row(j);
            let mut logit = 0.0f64;
            for (&a, &b) in uf.iter().zip(vf) {
                logit += a.to_f64_lossy() * b.to_f64_lossy();
            }
            let unif = loop {
                let x: f64 = item_rng.gen();
                if x > 0.0 && x < 1.0 {
                    break x;
                }
            };
            let gumbel = -(-unif.ln()).ln();
            keyed.push((logit + gumbel, j));
        }
        keyed.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut row: Vec<usize> = keyed[..count].iter().map(|&(_, j)| j).collect();
        row.sort_unstable();
        rows.push(row);
    }
    let m = InteractionMatrix {
        n_items,
        rows,
        user_ids: (0..n_users).map(|i| format!("u{i}")).collect(),
        item_ids: (0..n_items).map(|j| format!("i{j}")).collect(),
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_the_matrix() {
        let a = generate_synthetic(50, 40, 4, 6.0, 123).unwrap();
        let b = generate_synthetic(50, 40, 4, 6.0, 123).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(50, 40, 4, 6.0, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_user_gets_the_requested_count() {
        let m = generate_synthetic(1, 30, 1, 7.0, 5).unwrap();
        assert_eq!(m.n_users(), 1);
        assert_eq!(m.rows[0].len(), 7);
    }

    #[test]
    fn average_density_is_met_exactly() {
        let m = generate_synthetic(40, 60, 3, 8.5, 2).unwrap();
        assert_eq!(m.interaction_count(), 340);
        let spread: Vec<usize> = m.rows.iter().map(|r| r.len()).collect();
        assert!(spread.iter().all(|&c| c == 8 || c == 9));
    }

    #[test]
    fn infeasible_parameters_error() {
        assert!(generate_synthetic(10, 5, 3, 6.0, 1).is_err());
        assert!(generate_synthetic(10, 20, 3, 1.0, 1).is_err());
        assert!(generate_synthetic(10, 20, 15, 4.0, 1).is_err());
        assert!(generate_synthetic(10, 20, 0, 4.0, 1).is_err());
    }

    #[test]
    fn equal_factors_give_uniform_item_popularity() {
        // With identical logits everywhere, every item is equally likely.
        // Chi-square over ~10k draws, 19 degrees of freedom, 1% critical
        // value 36.191.
        let n_users = 2000;
        let n_items = 20;
        let u = Tensor::new(vec![n_users, 1], vec![1.0f64; n_users]).unwrap();
        let v = Tensor::new(vec![n_items, 1], vec![1.0f64; n_items]).unwrap();
        let counts = vec![5usize; n_users];
        let m = generate_synthetic_from_factors(&u, &v, &counts, 31).unwrap();
        let mut pop = vec![0usize; n_items];
        for row in &m.rows {
            for &j in row {
                pop[j] += 1;
            }
        }
        let total: usize = pop.iter().sum();
        assert_eq!(total, 10_000);
        let expected = total as f64 / n_items as f64;
        let chi2: f64 = pop
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 36.191, "chi-square {chi2} rejects uniformity");
    }

    #[test]
    fn skewed_factors_give_skewed_popularity() {
        let n_users = 300;
        let n_items = 20;
        let u = Tensor::new(vec![n_users, 1], vec![1.0f64; n_users]).unwrap();
        let mut v_data = vec![0.0f64; n_items];
        v_data[0] = 3.0;
        let v = Tensor::new(vec![n_items, 1], v_data).unwrap();
        let counts = vec![4usize; n_users];
        let m = generate_synthetic_from_factors(&u, &v, &counts, 8).unwrap();
        let hot = m.rows.iter().filter(|r| r.contains(&0)).count();
        assert!(
            hot as f64 > 0.9 * n_users as f64,
            "hot item only in {hot} of {n_users} rows"
        );
    }
}
