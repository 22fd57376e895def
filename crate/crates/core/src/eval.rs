//! Full-catalog ranking metrics, overall and per popularity group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::datagen::{Catalog, InteractionDataset};
use crate::model::{Model, Streams};
use crate::numerics::{Graph, ParamStore, Tensor};

pub const ENSEMBLE: &str = "ensemble";
const ITEM_CHUNK: usize = 256;
const USER_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("rank must be at least 1, got {0}")]
    Rank(usize),
    #[error("need at least 2 popularity groups, got {0}")]
    Groups(usize),
    #[error("{items} items with nonzero popularity cannot fill {groups} groups")]
    TooFewItems { items: usize, groups: usize },
}

/// Recall and NDCG of a single held-out item at 1-based `rank`.
pub fn recall_ndcg(rank: usize, k: usize) -> Result<(f64, f64), EvalError> {
    if rank == 0 {
        return Err(EvalError::Rank(rank));
    }
    Ok(if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    })
}

/// Items ordered by descending score, ties by ascending index, minus `exclude`.
pub fn rank_full_catalog(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// 1-based position of `target` in [`rank_full_catalog`] order, in one pass.
/// `excluded` must be sorted.
pub fn target_rank(scores: &[f64], target: usize, excluded: &[usize]) -> usize {
    let st = scores[target];
    let mut ahead = 0;
    let mut ex = excluded.iter().peekable();
    for (j, &s) in scores.iter().enumerate() {
        while ex.peek().is_some_and(|&&e| e < j) {
            ex.next();
        }
        if ex.peek() == Some(&&j) || j == target {
            continue;
        }
        if s > st || (s == st && j < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// Group 0 holds never-trained items; the rest are split by ascending
/// popularity into `groups` equal-count buckets `1..=groups`.
pub fn popularity_groups(pop: &[u64], groups: usize) -> Result<Vec<usize>, EvalError> {
    if groups < 2 {
        return Err(EvalError::Groups(groups));
    }
    let mut warm: Vec<usize> = (0..pop.len()).filter(|&i| pop[i] > 0).collect();
    if warm.len() < groups {
        return Err(EvalError::TooFewItems {
            items: warm.len(),
            groups,
        });
    }
    warm.sort_by_key(|&i| (pop[i], i));
    let mut out = vec![0; pop.len()];
    let n = warm.len();
    for (rank, &i) in warm.iter().enumerate() {
        out[i] = 1 + rank * groups / n;
    }
    Ok(out)
}

/// Which held-out item is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Validation,
    Test,
}

type Scores = BTreeMap<String, f64>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub items: usize,
    pub users: usize,
    pub metrics: BTreeMap<String, Scores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    pub ks: Vec<usize>,
    /// Stream (`v`, `t`, `id`, `fused`, `ensemble`) → `recall@k` / `ndcg@k`.
    pub overall: BTreeMap<String, Scores>,
    pub groups: Vec<GroupMetrics>,
}

impl MetricsReport {
    pub fn get(&self, stream: &str, metric: &str, k: usize) -> f64 {
        self.overall
            .get(stream)
            .and_then(|m| m.get(&format!("{metric}@{k}")))
            .copied()
            .unwrap_or(f64::NAN)
    }

    pub fn group(&self, g: usize, stream: &str, metric: &str, k: usize) -> f64 {
        self.groups
            .iter()
            .find(|x| x.group == g)
            .and_then(|x| x.metrics.get(stream))
            .and_then(|m| m.get(&format!("{metric}@{k}")))
            .copied()
            .unwrap_or(f64::NAN)
    }
}

/// Running sums per stream and cutoff.
#[derive(Default)]
struct Acc {
    users: usize,
    sums: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Acc {
    fn add(&mut self, stream: &str, rank: usize, ks: &[usize]) {
        let m = self.sums.entry(stream.to_string()).or_default();
        for &k in ks {
            let (r, n) = recall_ndcg(rank, k).expect("ranks start at 1");
            *m.entry(format!("recall@{k}")).or_default() += r;
            *m.entry(format!("ndcg@{k}")).or_default() += n;
        }
    }

    fn finish(&self) -> BTreeMap<String, Scores> {
        let n = self.users.max(1) as f64;
        self.sums
            .iter()
            .map(|(s, m)| (s.clone(), m.iter().map(|(k, v)| (k.clone(), v / n)).collect()))
            .collect()
    }
}

fn score_matrix(users: &Tensor, items: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let u = g.constant(users.clone());
    let i = g.constant(items.clone());
    let s = g.matmul_nt(u, i);
    g.value(s).clone()
}

/// Ranks each user's held-out item against the full catalog, excluding the
/// items of the history used to predict it.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    catalog: &Catalog,
    dataset: &InteractionDataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    let groups = popularity_groups(&dataset.pop, cfg.groups)?;
    let items = model.catalog_embeddings(store, catalog, ITEM_CHUNK);
    let named = items.named();
    let n = catalog.n_items;
    let mut overall = Acc::default();
    let mut per_group: Vec<Acc> = (0..=cfg.groups).map(|_| Acc::default()).collect();
    for chunk in dataset.users.chunks(USER_CHUNK) {
        let histories: Vec<Vec<usize>> = chunk
            .iter()
            .map(|u| match split {
                Split::Validation => u.val_history().to_vec(),
                Split::Test => u.test_history(),
            })
            .collect();
        let refs: Vec<&[usize]> = histories.iter().map(Vec::as_slice).collect();
        let users: Streams<Tensor> = model.user_vectors(store, &items, &refs);
        let scores: Vec<(&str, Tensor)> = users
            .named()
            .into_iter()
            .zip(&named)
            .map(|((name, h), (_, d))| (name, score_matrix(h, d)))
            .collect();
        let ensemble = if scores.len() == 1 {
            scores[0].1.clone()
        } else {
            let mut e = scores[0].1.clone();
            for (_, s) in &scores[1..] {
                e.add_assign(s);
            }
            let f = 1.0 / scores.len() as f64;
            e.data_mut().iter_mut().for_each(|x| *x *= f);
            e
        };
        for (r, (u, hist)) in chunk.iter().zip(&histories).enumerate() {
            let target = match split {
                Split::Validation => u.val,
                Split::Test => u.test,
            };
            let mut excluded: Vec<usize> = hist.iter().copied().filter(|&i| i != target).collect();
            excluded.sort_unstable();
            excluded.dedup();
            let group = groups[target];
            overall.users += 1;
            per_group[group].users += 1;
            for (name, s) in scores.iter().map(|(n, s)| (*n, s)).chain([(ENSEMBLE, &ensemble)]) {
                let row = &s.data()[r * n..(r + 1) * n];
                let rank = target_rank(row, target, &excluded);
                overall.add(name, rank, &cfg.ks);
                per_group[group].add(name, rank, &cfg.ks);
            }
        }
    }
    let mut item_counts = vec![0; cfg.groups + 1];
    for &g in &groups {
        item_counts[g] += 1;
    }
    Ok(MetricsReport {
        users: overall.users,
        ks: cfg.ks.clone(),
        overall: overall.finish(),
        groups: per_group
            .iter()
            .enumerate()
            .map(|(g, acc)| GroupMetrics {
                group: g,
                items: item_counts[g],
                users: acc.users,
                metrics: acc.finish(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recall_and_ndcg_spot_values() {
        assert_eq!(recall_ndcg(1, 10).unwrap(), (1.0, 1.0));
        assert_eq!(recall_ndcg(3, 10).unwrap(), (1.0, 0.5));
        assert_eq!(recall_ndcg(11, 10).unwrap(), (0.0, 0.0));
        assert_eq!(recall_ndcg(0, 10).unwrap_err(), EvalError::Rank(0));
    }

    #[test]
    fn ranking_sorts_and_excludes() {
        assert_eq!(rank_full_catalog(&[0.1, 0.9, 0.5], &[]), vec![1, 2, 0]);
        assert_eq!(rank_full_catalog(&[0.1, 0.9, 0.5], &[1]), vec![2, 0]);
        assert_eq!(rank_full_catalog(&[0.5, 0.5, 0.5], &[]), vec![0, 1, 2]);
    }

    #[test]
    fn popularity_groups_by_hand() {
        let g = popularity_groups(&[0, 0, 1, 2, 3, 4], 2).unwrap();
        assert_eq!(g, vec![0, 0, 1, 1, 2, 2]);
        assert!(popularity_groups(&[1, 2, 3], 2).unwrap().iter().all(|&x| x > 0));
        assert_eq!(popularity_groups(&[0, 5], 2).unwrap_err(), EvalError::TooFewItems { items: 1, groups: 2 });
        assert_eq!(popularity_groups(&[1, 5], 1).unwrap_err(), EvalError::Groups(1));
    }

    proptest! {
        #[test]
        fn group_sizes_differ_by_at_most_one(
            pop in proptest::collection::vec(0u64..20, 10..200),
            groups in 2usize..9,
        ) {
            prop_assume!(pop.iter().filter(|&&p| p > 0).count() >= groups);
            let g = popularity_groups(&pop, groups).unwrap();
            let mut sizes = vec![0usize; groups + 1];
            for (i, &x) in g.iter().enumerate() {
                prop_assert_eq!(x == 0, pop[i] == 0);
                sizes[x] += 1;
            }
            let warm = &sizes[1..];
            prop_assert!(warm.iter().max().unwrap() - warm.iter().min().unwrap() <= 1);
        }
    }

    /// Brute force: sort, scan for the target, score the position.
    fn oracle(scores: &[f64], target: usize, exclude: &[usize], k: usize) -> (f64, f64) {
        let order = rank_full_catalog(scores, exclude);
        let pos = order.iter().position(|&i| i == target).unwrap() + 1;
        if pos <= k {
            (1.0, 1.0 / (pos as f64 + 1.0).log2())
        } else {
            (0.0, 0.0)
        }
    }

    #[test]
    fn one_pass_rank_matches_sorting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.gen_range(2..60);
            // coarse values force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 * 0.25).collect();
            let target = rng.gen_range(0..n);
            let mut exclude: Vec<usize> = (0..n).filter(|&i| i != target && rng.gen_bool(0.2)).collect();
            exclude.sort_unstable();
            let k = rng.gen_range(1..20);
            let rank = target_rank(&scores, target, &exclude);
            assert_eq!(recall_ndcg(rank, k).unwrap(), oracle(&scores, target, &exclude, k));
        }
    }
}
