//! Binarization and fixpoint activity filtering.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::{InteractionMatrix, RawInteraction};
use crate::error::{Error, Result};

/// Keeps interactions rated at or above `rating_threshold`, deduplicates,
/// then alternately drops items with too few users and users with too few
/// items until both constraints hold. Surviving ids are indexed in sorted
/// original-id order.
pub fn preprocess(
    raw: &[RawInteraction],
    rating_threshold: f64,
    min_items_per_user: usize,
    min_users_per_item: usize,
) -> Result<InteractionMatrix> {
    // BTree keys give the sorted-id index assignment for free.
    let mut by_user: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in raw {
        if r.rating >= rating_threshold {
            by_user.entry(&r.user_id).or_default().insert(&r.item_id);
        }
    }
    loop {
        let mut users_per_item: BTreeMap<&str, usize> = BTreeMap::new();
        for items in by_user.values() {
            for &it in items {
                *users_per_item.entry(it).or_default() += 1;
            }
        }
        let dead_items: BTreeSet<&str> = users_per_item
            .iter()
            .filter(|&(_, &c)| c < min_users_per_item)
            .map(|(&it, _)| it)
            .collect();
        let mut changed = false;
        if !dead_items.is_empty() {
            for items in by_user.values_mut() {
                let before = items.len();
                items.retain(|it| !dead_items.contains(it));
                changed |= items.len() != before;
            }
        }
        let before_users = by_user.len();
        by_user.retain(|_, items| items.len() >= min_items_per_user && !items.is_empty());
        changed |= by_user.len() != before_users;
        if !changed {
            break;
        }
    }
    if by_user.is_empty() {
        return Err(Error::Data(
            "no interactions survive preprocessing".into(),
        ));
    }
    let item_ids: Vec<String> = {
        let mut all: BTreeSet<&str> = BTreeSet::new();
        for items in by_user.values() {
            all.extend(items.iter());
        }
        all.into_iter().map(|s| s.to_string()).collect()
    };
    let item_index: BTreeMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(ix, id)| (id.as_str(), ix))
        .collect();
    let mut user_ids = Vec::with_capacity(by_user.len());
    let mut rows = Vec::with_capacity(by_user.len());
    for (uid, items) in &by_user {
        user_ids.push(uid.to_string());
        let row: Vec<usize> = items.iter().map(|it| item_index[it]).collect();
        // BTreeSet iterates id-sorted; index order follows id order, so the
        // row comes out sorted already.
        rows.push(row);
    }
    let m = InteractionMatrix {
        n_items: item_ids.len(),
        rows,
        user_ids,
        item_ids,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(user: &str, item: &str, rating: f64) -> RawInteraction {
        RawInteraction {
            user_id: user.into(),
            item_id: item.into(),
            rating,
            timestamp: None,
        }
    }

    #[test]
    fn everything_kept_with_loose_thresholds() {
        let data = vec![raw("a", "x", 5.0), raw("a", "y", 5.0), raw("b", "x", 5.0)];
        let m = preprocess(&data, 1.0, 1, 1).unwrap();
        assert_eq!(m.n_users(), 2);
        assert_eq!(m.n_items, 2);
        assert_eq!(m.interaction_count(), 3);
    }

    #[test]
    fn rating_threshold_binarizes() {
        let data = vec![raw("a", "x", 3.0), raw("a", "y", 5.0)];
        let m = preprocess(&data, 4.0, 1, 1).unwrap();
        assert_eq!(m.interaction_count(), 1);
        assert_eq!(m.item_ids, vec!["y"]);
    }

    #[test]
    fn duplicates_collapse() {
        let data = vec![raw("a", "x", 5.0), raw("a", "x", 4.5), raw("a", "y", 5.0)];
        let m = preprocess(&data, 1.0, 1, 1).unwrap();
        assert_eq!(m.rows[0].len(), 2);
    }

    #[test]
    fn cascading_drop_reaches_fixpoint() {
        // Item y is only held by user b; dropping y pushes b under the user
        // minimum, and dropping b pushes x under the item minimum for c.
        let data = vec![
            raw("a", "w", 5.0),
            raw("a", "z", 5.0),
            raw("c", "w", 5.0),
            raw("c", "z", 5.0),
            raw("b", "y", 5.0),
            raw("b", "w", 5.0),
        ];
        let m = preprocess(&data, 1.0, 2, 2).unwrap();
        assert_eq!(m.user_ids, vec!["a", "c"]);
        assert_eq!(m.item_ids, vec!["w", "z"]);
    }

    #[test]
    fn fixpoint_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        for trial in 0..20 {
            let n_users = 12;
            let n_items = 10;
            let mut data = Vec::new();
            for u in 0..n_users {
                for i in 0..n_items {
                    if rng.gen_bool(0.25) {
                        data.push(raw(&format!("u{u:02}"), &format!("i{i:02}"), 5.0));
                    }
                }
            }
            let min_i = 2 + trial % 3;
            let min_u = 1 + trial % 3;
            let ours = preprocess(&data, 1.0, min_i, min_u);

            // Brute force: recompute surviving sets from scratch until stable.
            let mut users: BTreeSet<String> = data.iter().map(|r| r.user_id.clone()).collect();
            let mut items: BTreeSet<String> = data.iter().map(|r| r.item_id.clone()).collect();
            loop {
                let live: Vec<&RawInteraction> = data
                    .iter()
                    .filter(|r| users.contains(&r.user_id) && items.contains(&r.item_id))
                    .collect();
                let mut per_user: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
                let mut per_item: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
                for r in &live {
                    per_user.entry(&r.user_id).or_default().insert(&r.item_id);
                    per_item.entry(&r.item_id).or_default().insert(&r.user_id);
                }
                let next_users: BTreeSet<String> = per_user
                    .iter()
                    .filter(|(_, s)| s.len() >= min_i)
                    .map(|(u, _)| u.to_string())
                    .collect();
                let next_items: BTreeSet<String> = per_item
                    .iter()
                    .filter(|(_, s)| s.len() >= min_u)
                    .map(|(i, _)| i.to_string())
                    .collect();
                if next_users == users && next_items == items {
                    break;
                }
                users = next_users;
                items = next_items;
            }
            match ours {
                Ok(m) => {
                    assert_eq!(m.user_ids, users.iter().cloned().collect::<Vec<_>>());
                    assert_eq!(m.item_ids, items.iter().cloned().collect::<Vec<_>>());
                }
                Err(_) => assert!(users.is_empty() || items.is_empty()),
            }
        }
    }

    #[test]
    fn preprocess_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for u in 0..15 {
            for i in 0..12 {
                if rng.gen_bool(0.3) {
                    data.push(raw(&format!("u{u:02}"), &format!("i{i:02}"), 5.0));
                }
            }
        }
        let m1 = preprocess(&data, 1.0, 2, 2).unwrap();
        let as_raw: Vec<RawInteraction> = m1
            .rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| {
                row.iter()
                    .map(move |&i| (u, i))
                    .collect::<Vec<_>>()
            })
            .map(|(u, i)| raw(&m1.user_ids[u], &m1.item_ids[i], 5.0))
            .collect();
        let m2 = preprocess(&as_raw, 1.0, 2, 2).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_result_is_a_data_error() {
        let data = vec![raw("a", "x", 2.0)];
        assert!(matches!(
            preprocess(&data, 4.0, 1, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn indices_follow_sorted_id_order() {
        let data = vec![
            raw("zeta", "m", 5.0),
            raw("alpha", "k", 5.0),
            raw("alpha", "m", 5.0),
            raw("zeta", "k", 5.0),
        ];
        let m = preprocess(&data, 1.0, 1, 1).unwrap();
        assert_eq!(m.user_ids, vec!["alpha", "zeta"]);
        assert_eq!(m.item_ids, vec!["k", "m"]);
        assert_eq!(m.rows, vec![vec![0, 1], vec![0, 1]]);
    }
}
