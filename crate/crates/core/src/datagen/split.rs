use std::collections::BTreeMap;

use super::{DataError, Interaction};

/// Leave-one-out split of one user's truncated sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user_id: u64,
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

impl UserSplit {
    /// The truncated sequence the split was built from.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.train.clone();
        s.push(self.val);
        s.push(self.test);
        s
    }

    /// History used to predict the validation item.
    pub fn val_history(&self) -> &[usize] {
        &self.train
    }

    /// History used to predict the test item.
    pub fn test_history(&self) -> Vec<usize> {
        let mut s = self.train.clone();
        s.push(self.val);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub n_items: usize,
    pub max_len: usize,
    pub users: Vec<UserSplit>,
    /// Occurrences of each item in training prefixes only.
    pub pop: Vec<u64>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }
}

/// Groups events per user in timestamp order and keeps users with at least
/// `min_interactions` events. Users come out sorted by id.
pub fn sequences_from_interactions(
    interactions: &[Interaction],
    n_items: usize,
    min_interactions: usize,
) -> Result<Vec<(u64, Vec<usize>)>, DataError> {
    let mut per_user: BTreeMap<u64, Vec<(u64, usize)>> = BTreeMap::new();
    for ev in interactions {
        if ev.item_id >= n_items {
            return Err(DataError::UnknownItem {
                item: ev.item_id,
                n_items,
            });
        }
        per_user
            .entry(ev.user_id)
            .or_default()
            .push((ev.timestamp, ev.item_id));
    }
    Ok(per_user
        .into_iter()
        .filter(|(_, evs)| evs.len() >= min_interactions)
        .map(|(u, mut evs)| {
            // stable: equal timestamps keep file order
            evs.sort_by_key(|e| e.0);
            (u, evs.into_iter().map(|e| e.1).collect())
        })
        .collect())
}

/// Truncates each sequence to its most recent `max_len` items, then holds out
/// the last item for test and the second-to-last for validation.
pub fn split_leave_one_out(
    sequences: &[(u64, Vec<usize>)],
    n_items: usize,
    max_len: usize,
) -> Result<InteractionDataset, DataError> {
    let mut users = Vec::with_capacity(sequences.len());
    let mut pop = vec![0u64; n_items];
    for (idx, (user_id, seq)) in sequences.iter().enumerate() {
        let start = seq.len().saturating_sub(max_len);
        let seq = &seq[start..];
        if seq.len() < 3 {
            return Err(DataError::SequenceTooShort {
                user: idx,
                len: seq.len(),
            });
        }
        if let Some(&bad) = seq.iter().find(|&&i| i >= n_items) {
            return Err(DataError::UnknownItem { item: bad, n_items });
        }
        let n = seq.len();
        let train = seq[..n - 2].to_vec();
        for &i in &train {
            pop[i] += 1;
        }
        users.push(UserSplit {
            user_id: *user_id,
            train,
            val: seq[n - 2],
            test: seq[n - 1],
        });
    }
    Ok(InteractionDataset {
        n_items,
        max_len,
        users,
        pop,
    })
}
