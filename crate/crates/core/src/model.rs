//! Item tower plus sequence towers, wired per fusion mode.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branches::PerBranch;
use crate::config::{Fusion, ModelConfig};
use crate::datagen::{Batch, Catalog};
use crate::item_tower::{ItemTower, TowerError};
use crate::losses::{debiased_scores, ensemble, total_loss, LossError, LossReport, Objective};
use crate::nn::{Ctx, Init};
use crate::numerics::{ParamStore, Tensor, Var};
use crate::seq_tower::{SeqSpec, SeqTower};

/// Name of the single score stream of early fusion.
pub const FUSED: &str = "fused";

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub item: ItemTower,
    towers: PerBranch<SeqTower>,
    fused: Option<SeqTower>,
}

/// Score streams of a forward pass: one per branch, or a single fused one.
#[derive(Clone, Debug)]
pub struct Streams<T> {
    pub branches: PerBranch<T>,
    pub fused: Option<T>,
}

impl<T> Streams<T> {
    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        match &self.fused {
            Some(f) => vec![(FUSED, f)],
            None => self.branches.iter().map(|(b, v)| (b.tag(), v)).collect(),
        }
    }
}

/// Forward results of a training batch.
pub struct BatchForward {
    pub candidates: Vec<usize>,
    pub target_cols: Vec<usize>,
    pub blocked: Arc<Vec<bool>>,
    pub logits: Streams<Var>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, catalog: &Catalog, max_len: usize, seed: u64) -> Result<(Self, ParamStore), TowerError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let item = ItemTower::new(cfg, catalog, &mut init)?;
        let spec = SeqSpec {
            backbone: cfg.backbone,
            d: cfg.d,
            max_len,
            layers: cfg.seq_layers,
            heads: cfg.seq_heads,
            ffn: cfg.ffn_mult * cfg.d,
        };
        let mut towers = PerBranch::empty();
        let mut fused = None;
        if cfg.fusion == Fusion::Early {
            fused = Some(SeqTower::new(&mut init, "seq.fused", &spec));
        } else {
            for b in cfg.branch_list() {
                towers.set(b, SeqTower::new(&mut init, &format!("seq.{b}"), &spec));
            }
        }
        Ok((
            Self {
                cfg: cfg.clone(),
                item,
                towers,
                fused,
            },
            store,
        ))
    }

    fn mean_embedding(ctx: &mut Ctx, emb: &PerBranch<Var>) -> Var {
        let parts: Vec<Var> = emb.iter().map(|(_, v)| *v).collect();
        ensemble(&mut ctx.g, &parts)
    }

    /// Debiased in-batch scores `[B, C]` for every stream.
    pub fn batch_forward(&self, ctx: &mut Ctx, catalog: &Catalog, batch: &Batch, pop: &[u64]) -> Result<BatchForward, LossError> {
        let candidates = batch.candidates();
        let target_cols = batch.target_columns(&candidates);
        let blocked = Arc::new(batch.blocked(&candidates));
        let cand_pop: Vec<u64> = candidates.iter().map(|&i| pop[i]).collect();
        let rows: Vec<Vec<usize>> = batch
            .inputs
            .iter()
            .map(|r| r.iter().map(|i| candidates.binary_search(i).unwrap()).collect())
            .collect();
        let rows: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        let emb = self.item.forward(ctx, catalog, &candidates);
        let logits = match &self.fused {
            Some(tower) => {
                let d = Self::mean_embedding(ctx, &emb);
                let h = tower.encode_batch(ctx, d, &rows);
                Streams {
                    branches: PerBranch::empty(),
                    fused: Some(debiased_scores(&mut ctx.g, h, d, &cand_pop)?),
                }
            }
            None => {
                let mut out = PerBranch::empty();
                for (b, tower) in self.towers.iter() {
                    let d = *emb.get(b).expect("tower has an item branch");
                    let h = tower.encode_batch(ctx, d, &rows);
                    out.set(b, debiased_scores(&mut ctx.g, h, d, &cand_pop)?);
                }
                Streams {
                    branches: out,
                    fused: None,
                }
            }
        };
        Ok(BatchForward {
            candidates,
            target_cols,
            blocked,
            logits,
        })
    }

    /// Objective for this model's fusion mode; `distill` carries `(T, w)`.
    pub fn loss(&self, ctx: &mut Ctx, fwd: &BatchForward, distill: Option<(f64, f64)>) -> Result<(Var, LossReport), LossError> {
        let objective = match self.cfg.fusion {
            Fusion::Collaborative => Objective::Collaborative {
                temperature: distill.map(|d| d.0),
                w: distill.map_or(0.0, |d| d.1),
            },
            Fusion::Early | Fusion::Late => Objective::Single,
        };
        total_loss(
            &mut ctx.g,
            &fwd.logits.branches,
            fwd.logits.fused,
            &fwd.target_cols,
            &fwd.blocked,
            &objective,
        )
    }

    /// Final item embeddings of the whole catalog, `[n_items, d]` per stream.
    pub fn catalog_embeddings(&self, store: &ParamStore, catalog: &Catalog, chunk: usize) -> Streams<Tensor> {
        let n = catalog.n_items;
        let d = self.cfg.d;
        let mut acc: PerBranch<Vec<f64>> = PerBranch::empty();
        for b in self.cfg.branch_list() {
            acc.set(b, Vec::with_capacity(n * d));
        }
        let items: Vec<usize> = (0..n).collect();
        for part in items.chunks(chunk.max(1)) {
            let mut ctx = Ctx::eval(store);
            let emb = self.item.forward(&mut ctx, catalog, part);
            for (b, v) in emb.iter() {
                acc.get_mut(b)
                    .expect("branch buffer")
                    .extend_from_slice(ctx.g.value(*v).data());
            }
        }
        let branches = acc.map(|_, data| Tensor::new(&[n, d], data.clone()).unwrap());
        if self.fused.is_some() {
            let parts: Vec<&Tensor> = branches.iter().map(|(_, t)| t).collect();
            // same arithmetic as the training-time ensemble
            let mut mean = parts[0].clone();
            for p in &parts[1..] {
                mean.add_assign(p);
            }
            if parts.len() > 1 {
                let s = 1.0 / parts.len() as f64;
                mean.data_mut().iter_mut().for_each(|x| *x *= s);
            }
            Streams {
                branches: PerBranch::empty(),
                fused: Some(mean),
            }
        } else {
            Streams {
                branches,
                fused: None,
            }
        }
    }

    /// User vectors `[B, d]` per stream from item-id histories.
    pub fn user_vectors(&self, store: &ParamStore, items: &Streams<Tensor>, histories: &[&[usize]]) -> Streams<Tensor> {
        let run = |tower: &SeqTower, table: &Tensor| {
            let mut ctx = Ctx::eval(store);
            let x = ctx.g.constant(table.clone());
            let h = tower.encode_batch(&mut ctx, x, histories);
            ctx.g.value(h).clone()
        };
        match (&self.fused, &items.fused) {
            (Some(tower), Some(table)) => Streams {
                branches: PerBranch::empty(),
                fused: Some(run(tower, table)),
            },
            _ => Streams {
                branches: self.towers.map(|b, tower| run(tower, items.branches.get(b).expect("branch embeddings"))),
                fused: None,
            },
        }
    }

    /// Checkpoint names owned by each sequence tower.
    pub fn tower_prefixes(&self) -> Vec<String> {
        match &self.fused {
            Some(_) => vec!["seq.fused.".into()],
            None => self.towers.iter().map(|(b, _)| format!("seq.{b}.")).collect(),
        }
    }
}
