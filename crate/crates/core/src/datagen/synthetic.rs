//! Clustered synthetic catalogs whose modality features genuinely predict
//! what users interact with next.
//!
//! Items are split evenly over clusters. Each item's visual and textual rows
//! are its cluster centroid plus an item-level offset (shared by all rows of
//! that item), a per-position signature and per-row noise. Each user has a
//! home cluster and a secondary cluster; every interaction comes from the
//! home cluster with probability `p_intra`, otherwise from the secondary or a
//! uniformly random cluster. Within a cluster, items are drawn with Zipf
//! weights over a random popularity rank, without repeats per user.
//!
//! A `fresh_fraction` of items is only released after all earlier events, so
//! those items can appear solely as a user's final interaction and therefore
//! never enter training prefixes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::split::{split_leave_one_out, InteractionDataset};
use super::{Catalog, DataError, Interaction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_clusters: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub p_intra: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub zipf_exponent: f64,
    pub centroid_scale: f64,
    pub item_noise: f64,
    pub modality_noise: f64,
    pub fresh_fraction: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_users: 5000,
            n_clusters: 64,
            n_v: 4,
            n_t: 8,
            d_v: 32,
            d_t: 32,
            p_intra: 0.8,
            min_interactions: 5,
            max_interactions: 15,
            zipf_exponent: 1.0,
            centroid_scale: 1.0,
            item_noise: 0.5,
            modality_noise: 0.3,
            fresh_fraction: 0.05,
            max_len: 15,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidSize(msg));
        if self.n_items == 0 || self.n_users == 0 || self.n_clusters == 0 {
            return bad("n_items, n_users and n_clusters must be positive".into());
        }
        if self.n_clusters > self.n_items {
            return bad(format!(
                "n_clusters ({}) exceeds n_items ({})",
                self.n_clusters, self.n_items
            ));
        }
        if self.n_v == 0 || self.n_t == 0 || self.d_v == 0 || self.d_t == 0 {
            return bad("feature counts and dimensions must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_intra) || !(0.0..1.0).contains(&self.fresh_fraction) {
            return bad("p_intra must lie in [0, 1] and fresh_fraction in [0, 1)".into());
        }
        if self.min_interactions < 3 || self.max_interactions < self.min_interactions {
            return bad(format!(
                "interaction range [{}, {}] is invalid (minimum is 3)",
                self.min_interactions, self.max_interactions
            ));
        }
        let stale = self.n_items - (self.fresh_fraction * self.n_items as f64) as usize;
        if stale < self.max_interactions {
            return bad("too few non-fresh items for the longest user sequence".into());
        }
        for (name, v) in [
            ("centroid_scale", self.centroid_scale),
            ("item_noise", self.item_noise),
            ("modality_noise", self.modality_noise),
            ("zipf_exponent", self.zipf_exponent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.max_len < 3 {
            return bad("max_len must be at least 3".into());
        }
        Ok(())
    }
}

/// Everything the generator produces.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub catalog: Catalog,
    pub interactions: Vec<Interaction>,
    pub dataset: InteractionDataset,
    /// Cluster of every item.
    pub item_cluster: Vec<usize>,
    /// Items held back until the final interaction.
    pub fresh: Vec<bool>,
}

const RELEASE_TIME: u64 = 1_000_000;

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_items;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut item_cluster = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        item_cluster[item] = pos % cfg.n_clusters;
    }

    let catalog = generate_features(cfg, &item_cluster, &mut rng)?;

    let mut fresh = vec![false; n];
    let n_fresh = (cfg.fresh_fraction * n as f64) as usize;
    let mut pick: Vec<usize> = (0..n).collect();
    pick.shuffle(&mut rng);
    for &i in &pick[..n_fresh] {
        fresh[i] = true;
    }

    // Zipf weights over a random within-cluster rank.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
    for (item, &c) in item_cluster.iter().enumerate() {
        members[c].push(item);
    }
    let mut weight = vec![0.0; n];
    for m in &mut members {
        m.shuffle(&mut rng);
        for (rank, &item) in m.iter().enumerate() {
            weight[item] = 1.0 / ((rank + 1) as f64).powf(cfg.zipf_exponent);
        }
    }

    let mut interactions = Vec::new();
    let mut sequences = Vec::with_capacity(cfg.n_users);
    for user in 0..cfg.n_users {
        let home = rng.gen_range(0..cfg.n_clusters);
        let secondary = if cfg.n_clusters > 1 {
            let s = rng.gen_range(0..cfg.n_clusters - 1);
            if s >= home {
                s + 1
            } else {
                s
            }
        } else {
            home
        };
        let len = rng.gen_range(cfg.min_interactions..=cfg.max_interactions);
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        for step in 0..len {
            let last = step + 1 == len;
            let item = loop {
                let u: f64 = rng.gen();
                let cluster = if u < cfg.p_intra {
                    home
                } else if u < cfg.p_intra + (1.0 - cfg.p_intra) / 2.0 {
                    secondary
                } else {
                    rng.gen_range(0..cfg.n_clusters)
                };
                let candidates: Vec<usize> = members[cluster]
                    .iter()
                    .copied()
                    .filter(|&i| (last || !fresh[i]) && !seq.contains(&i))
                    .collect();
                if candidates.is_empty() {
                    continue;
                }
                let w: Vec<f64> = candidates.iter().map(|&i| weight[i]).collect();
                let dist = WeightedIndex::new(&w).expect("positive weights");
                break candidates[dist.sample(&mut rng)];
            };
            let timestamp = if last {
                RELEASE_TIME + step as u64
            } else {
                step as u64
            };
            interactions.push(Interaction {
                user_id: user as u64,
                item_id: item,
                timestamp,
            });
            seq.push(item);
        }
        sequences.push((user as u64, seq));
    }

    let dataset = split_leave_one_out(&sequences, n, cfg.max_len)?;
    Ok(SyntheticData {
        catalog,
        interactions,
        dataset,
        item_cluster,
        fresh,
    })
}

fn generate_features(
    cfg: &SyntheticConfig,
    item_cluster: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Catalog, DataError> {
    let modality = |rows: usize, dim: usize, cls_first: bool, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let unit = Normal::new(0.0, 1.0).unwrap();
        let draw = |scale: f64, len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len).map(|_| scale * unit.sample(rng)).collect()
        };
        let centroids: Vec<Vec<f64>> = (0..cfg.n_clusters)
            .map(|_| draw(cfg.centroid_scale, dim, rng))
            .collect();
        // Position signatures for the non-cls rows.
        let positions: Vec<Vec<f64>> = (0..rows).map(|_| draw(0.5, dim, rng)).collect();
        let mut out = Vec::with_capacity(item_cluster.len() * (rows + 1) * dim);
        for &c in item_cluster {
            let offset = draw(cfg.item_noise, dim, rng);
            let base: Vec<f64> = centroids[c].iter().zip(&offset).map(|(a, b)| a + b).collect();
            let row = |sig: Option<&Vec<f64>>, rng: &mut ChaCha8Rng| -> Vec<f64> {
                let noise = (0..dim).map(|_| cfg.modality_noise * unit.sample(rng));
                base.iter()
                    .zip(noise)
                    .enumerate()
                    .map(|(k, (b, e))| b + e + sig.map_or(0.0, |s| s[k]))
                    .collect()
            };
            if cls_first {
                out.extend(row(None, rng));
            }
            for p in &positions {
                out.extend(row(Some(p), rng));
            }
            if !cls_first {
                out.extend(row(None, rng));
            }
        }
        out
    };
    let visual = modality(cfg.n_v, cfg.d_v, false, rng);
    let textual = modality(cfg.n_t, cfg.d_t, true, rng);
    Catalog::new(
        item_cluster.len(),
        (cfg.n_v, cfg.d_v),
        (cfg.n_t, cfg.d_t),
        visual,
        textual,
    )
}
