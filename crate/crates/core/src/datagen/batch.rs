use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, InteractionDataset};

/// Where a training row is cut from its user's training prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutMode {
    /// Input is the prefix without its last item, which is the target.
    #[default]
    Last,
    /// A fresh random cut point per user and epoch.
    Random,
}

/// `B` training rows: a history and the item that follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    /// Per row, sorted items of that row's own history (its target excluded).
    pub exclusions: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sorted distinct items appearing anywhere in the batch.
    pub fn candidates(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self
            .inputs
            .iter()
            .flatten()
            .chain(&self.targets)
            .copied()
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Column of each row's target in `candidates`.
    pub fn target_columns(&self, candidates: &[usize]) -> Vec<usize> {
        self.targets
            .iter()
            .map(|t| candidates.binary_search(t).expect("target is a candidate"))
            .collect()
    }

    /// Row-major `[B, C]` flags of false negatives to drop from each row's
    /// softmax.
    pub fn blocked(&self, candidates: &[usize]) -> Vec<bool> {
        let c = candidates.len();
        let mut out = vec![false; self.len() * c];
        for (r, ex) in self.exclusions.iter().enumerate() {
            for item in ex {
                if let Ok(col) = candidates.binary_search(item) {
                    out[r * c + col] = true;
                }
            }
        }
        out
    }
}

/// Shuffles users with a stream derived from `(seed, epoch)` and partitions
/// them into batches. Users whose training prefix is shorter than 2 are
/// skipped (no input would remain).
pub fn make_batches(
    dataset: &InteractionDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    cut: CutMode,
) -> Result<Vec<Batch>, DataError> {
    if batch_size < 2 {
        return Err(DataError::BatchTooSmall(batch_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..dataset.users.len())
        .filter(|&u| dataset.users[u].train.len() >= 2)
        .collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut batch = Batch {
            users: Vec::with_capacity(chunk.len()),
            inputs: Vec::with_capacity(chunk.len()),
            targets: Vec::with_capacity(chunk.len()),
            exclusions: Vec::with_capacity(chunk.len()),
        };
        for &u in chunk {
            let train = &dataset.users[u].train;
            let at = match cut {
                CutMode::Last => train.len() - 1,
                CutMode::Random => rng.gen_range(1..train.len()),
            };
            let input = train[..at].to_vec();
            let target = train[at];
            let mut ex: Vec<usize> = input.iter().copied().filter(|&i| i != target).collect();
            ex.sort_unstable();
            ex.dedup();
            batch.users.push(u);
            batch.inputs.push(input);
            batch.targets.push(target);
            batch.exclusions.push(ex);
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::split_leave_one_out;

    fn dataset(n_users: usize) -> InteractionDataset {
        let seqs: Vec<(u64, Vec<usize>)> = (0..n_users)
            .map(|u| (u as u64, (0..6).map(|k| (u + k) % 20).collect()))
            .collect();
        split_leave_one_out(&seqs, 20, 15).unwrap()
    }

    #[test]
    fn partitions_into_full_batches_and_a_remainder() {
        let ds = dataset(10);
        let sizes: Vec<usize> = make_batches(&ds, 4, 1, 0, CutMode::Last)
            .unwrap()
            .iter()
            .map(Batch::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batch_size_below_two_is_rejected() {
        assert!(matches!(
            make_batches(&dataset(3), 1, 0, 0, CutMode::Last),
            Err(DataError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn targets_follow_inputs_and_order_is_seeded() {
        let ds = dataset(25);
        let a = make_batches(&ds, 8, 3, 2, CutMode::Random).unwrap();
        let b = make_batches(&ds, 8, 3, 2, CutMode::Random).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&ds, 8, 3, 3, CutMode::Random).unwrap();
        assert_ne!(a, c);
        for batch in &a {
            for r in 0..batch.len() {
                let train = &ds.users[batch.users[r]].train;
                let n = batch.inputs[r].len();
                assert_eq!(&train[..n], batch.inputs[r].as_slice());
                assert_eq!(train[n], batch.targets[r]);
            }
        }
    }

    #[test]
    fn overlap_with_own_history_is_blocked() {
        let batch = Batch {
            users: vec![0, 1],
            inputs: vec![vec![3, 7], vec![1, 2]],
            targets: vec![5, 7],
            exclusions: vec![vec![3, 7], vec![1, 2]],
        };
        let cands = batch.candidates();
        assert_eq!(cands, vec![1, 2, 3, 5, 7]);
        assert_eq!(batch.target_columns(&cands), vec![3, 4]);
        let blocked = batch.blocked(&cands);
        // row 0 blocks items 3 and 7 (item 7 is row 1's target)
        assert_eq!(&blocked[..5], &[false, false, true, false, true]);
        assert_eq!(&blocked[5..], &[true, true, false, false, false]);
    }

    #[test]
    fn exclusions_never_contain_the_rows_target() {
        let ds = dataset(30);
        for batch in make_batches(&ds, 7, 0, 0, CutMode::Random).unwrap() {
            for (ex, t) in batch.exclusions.iter().zip(&batch.targets) {
                assert!(!ex.contains(t));
            }
        }
    }
}
