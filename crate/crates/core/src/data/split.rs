//! Strong-generalization splitting: held-out users unseen in training.

use rand::seq::SliceRandom;

use crate::data::{HeldOutUser, InteractionMatrix, SplitSet};
use crate::error::{Error, Result};
use crate::rng;

/// Samples disjoint validation and test user sets and partitions each of
/// their rows into fold-in and held-out items. Selection and partitioning
/// are keyed per user on the seed, so the result is independent of
/// iteration order. Users with fewer than 2 items stay in training.
pub fn split_strong_generalization(
    m: &InteractionMatrix,
    n_val_users: usize,
    n_test_users: usize,
    fold_in_fraction: f64,
    seed: u64,
) -> Result<SplitSet> {
    if !(fold_in_fraction > 0.0 && fold_in_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "fold_in_fraction must lie strictly between 0 and 1, got {fold_in_fraction}"
        )));
    }
    if n_val_users + n_test_users >= m.n_users() {
        return Err(Error::Data(format!(
            "cannot hold out {} of {} users",
            n_val_users + n_test_users,
            m.n_users()
        )));
    }
    let mut eligible: Vec<usize> = (0..m.n_users()).filter(|&u| m.rows[u].len() >= 2).collect();
    if eligible.len() < n_val_users + n_test_users {
        return Err(Error::Data(format!(
            "{} eligible users, need {}",
            eligible.len(),
            n_val_users + n_test_users
        )));
    }
    eligible.sort_by_key(|&u| rng::sort_key(seed, "heldout-order", u as u64));
    let val_set: Vec<usize> = eligible[..n_val_users].to_vec();
    let test_set: Vec<usize> = eligible[n_val_users..n_val_users + n_test_users].to_vec();

    let mut held = vec![false; m.n_users()];
    for &u in val_set.iter().chain(&test_set) {
        held[u] = true;
    }
    let mut train_rows = Vec::new();
    let mut train_user_ids = Vec::new();
    for u in 0..m.n_users() {
        if !held[u] {
            train_rows.push(m.rows[u].clone());
            train_user_ids.push(m.user_ids[u].clone());
        }
    }
    let train = InteractionMatrix {
        n_items: m.n_items,
        rows: train_rows,
        user_ids: train_user_ids,
        item_ids: m.item_ids.clone(),
    };

    let partition = |users: &[usize]| -> Vec<HeldOutUser> {
        let mut out: Vec<HeldOutUser> = users
            .iter()
            .map(|&u| {
               let row = &m.rows[u];
                let want = (fold_in_fraction * row.len() as f64).floor() as usize;
                let n_fold = want.clamp(1, row.len() - 1);
                let mut shuffled = row.clone();
                shuffled.shuffle(&mut rng::stream(seed, "fold-partition", &[u as u64]));
                let mut fold_in = shuffled[..n_fold].to_vec();
                let mut held_out = shuffled[n_fold..].to_vec();
                fold_in.sort_unstable();
                held_out.sort_unstable();
                HeldOutUser {
                    user_index: u,
                    fold_in,
                    held_out,
                }
            })
            .collect();
        out.sort_by_key(|h| h.user_index);
        out
    };

    Ok(SplitSet {
        train,
        validation: partition(&val_set),
        test: partition(&test_set),
    })
}
