//! Raw item features to final per-branch item embeddings.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::branches::{Branch, PerBranch};
use crate::config::{FstKind, IdInit, ModelConfig};
use crate::datagen::Catalog;
use crate::nn::{encode_stack, Ctx, Init, Linear, MlpHead, TransformerLayer};
use crate::numerics::{AttnMask, Tensor, Var, BLOCKED};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TowerError {
    #[error("mask needs n_v >= 1 and n_t >= 1, got n_v={n_v}, n_t={n_t}")]
    EmptyModality { n_v: usize, n_t: usize },
    #[error("average-of-modalities ID init needs d_v == d_t, got {d_v} and {d_t}; pick id_init = text, image or random")]
    InitWidthMismatch { d_v: usize, d_t: usize },
    #[error("ID table width {found} does not match hidden size {d} required by fst = none")]
    IdWidth { found: usize, d: usize },
}

/// Additive mask of side `n_v + n_t + 3` over `[visual (cls last); id; text
/// (cls first)]`: column `n_v + 1` is hidden from every row but its own.
pub fn build_imt_mask(n_v: usize, n_t: usize) -> Result<Vec<f64>, TowerError> {
    if n_v == 0 || n_t == 0 {
        return Err(TowerError::EmptyModality { n_v, n_t });
    }
    let side = n_v + n_t + 3;
    let id = n_v + 1;
    let mut m = vec![0.0; side * side];
    for r in (0..side).filter(|&r| r != id) {
        m[r * side + id] = BLOCKED;
    }
    Ok(m)
}

/// Initial ID table rows, `[n_items, width]`.
pub fn init_id_table(
    catalog: &Catalog,
    mode: IdInit,
    random_width: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, TowerError> {
    let n = catalog.n_items;
    let rows = |f: &dyn Fn(usize) -> Vec<f64>, w: usize| {
        let data = (0..n).flat_map(f).collect();
        Tensor::new(&[n, w], data).expect("row widths are consistent")
    };
    Ok(match mode {
        IdInit::AvgModal => {
            if catalog.d_v != catalog.d_t {
                return Err(TowerError::InitWidthMismatch {
                    d_v: catalog.d_v,
                    d_t: catalog.d_t,
                });
            }
            rows(
                &|i| {
                    catalog
                        .visual_cls(i)
                        .iter()
                        .zip(catalog.textual_cls(i))
                        .map(|(a, b)| (a + b) / 2.0)
                        .collect()
                },
                catalog.d_v,
            )
        }
        IdInit::Text => rows(&|i| catalog.textual_cls(i).to_vec(), catalog.d_t),
        IdInit::Image => rows(&|i| catalog.visual_cls(i).to_vec(), catalog.d_v),
        IdInit::Random => Tensor::randn(&[n, random_width], std, rng),
    })
}

/// Per-item inputs gathered for one forward pass.
fn modality_input(catalog: &Catalog, items: &[usize], visual: bool) -> Tensor {
    let (rows, width) = if visual {
        (catalog.n_v + 1, catalog.d_v)
    } else {
        (catalog.n_t + 1, catalog.d_t)
    };
    let mut data = Vec::with_capacity(items.len() * rows * width);
    for &i in items {
        data.extend_from_slice(if visual {
            catalog.visual(i)
        } else {
            catalog.textual(i)
        });
    }
    Tensor::new(&[items.len(), rows, width], data).expect("catalog rows are consistent")
}

#[derive(Clone, Debug)]
pub struct ItemTower {
    fst: FstKind,
    branches: Vec<Branch>,
    d: usize,
    n_v: usize,
    id_table: Option<crate::numerics::ParamId>,
    proj: PerBranch<Linear>,
    joint: Vec<TransformerLayer>,
    sep_v: Vec<TransformerLayer>,
    sep_t: Vec<TransformerLayer>,
    heads: PerBranch<MlpHead>,
    mask: AttnMask,
}

impl ItemTower {
    pub fn new(cfg: &ModelConfig, catalog: &Catalog, init: &mut Init) -> Result<Self, TowerError> {
        let d = cfg.d;
        let ffn = cfg.ffn_mult * d;
        let branches = cfg.branch_list();
        let mut proj = PerBranch::empty();
        let mut heads = PerBranch::empty();
        let mut id_table = None;
        if cfg.has(Branch::Id) {
            let table = init_id_table(catalog, cfg.id_init, d, cfg.id_init_std, init.rng)?;
            if cfg.fst == FstKind::None && table.last_dim() != d {
                return Err(TowerError::IdWidth {
                    found: table.last_dim(),
                    d,
                });
            }
            let width = table.last_dim();
            id_table = Some(init.store.add("item.id_table", table));
            if cfg.fst != FstKind::None {
                proj.set(Branch::Id, Linear::new(init, "item.proj.id", width, d));
            }
        }
        if cfg.has(Branch::Visual) {
            proj.set(Branch::Visual, Linear::new(init, "item.proj.v", catalog.d_v, d));
        }
        if cfg.has(Branch::Textual) {
            proj.set(Branch::Textual, Linear::new(init, "item.proj.t", catalog.d_t, d));
        }
        let stack = |init: &mut Init, name: &str, n: usize| -> Vec<TransformerLayer> {
            (0..n)
                .map(|l| TransformerLayer::new(init, &format!("{name}.{l}"), d, cfg.heads, ffn))
                .collect()
        };
        let (mut joint, mut sep_v, mut sep_t) = (Vec::new(), Vec::new(), Vec::new());
        let mut mask = AttnMask::None;
        match cfg.fst {
            FstKind::Imt => {
                joint = stack(init, "item.imt", cfg.fst_layers);
                if cfg.has(Branch::Id) && cfg.id_mask {
                    mask = AttnMask::Shared(Arc::new(build_imt_mask(catalog.n_v, catalog.n_t)?));
                }
            }
            FstKind::Separate => {
                if cfg.has(Branch::Visual) {
                    sep_v = stack(init, "item.sep.v", cfg.fst_layers);
                }
                if cfg.has(Branch::Textual) {
                    sep_t = stack(init, "item.sep.t", cfg.fst_layers);
                }
            }
            FstKind::Dnn | FstKind::None => {}
        }
        if cfg.fst != FstKind::None {
            for &b in &branches {
                heads.set(b, MlpHead::new(init, &format!("item.head.{b}"), d));
            }
        }
        Ok(Self {
            fst: cfg.fst,
            branches,
            d,
            n_v: catalog.n_v,
            id_table,
            proj,
            joint,
            sep_v,
            sep_t,
            heads,
            mask,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn id_table(&self) -> Option<crate::numerics::ParamId> {
        self.id_table
    }

    /// Final embeddings `D^m: [items, d]` for each branch.
    pub fn forward(&self, ctx: &mut Ctx, catalog: &Catalog, items: &[usize]) -> PerBranch<Var> {
        let pre = self.encode(ctx, catalog, items, None);
        self.apply_heads(ctx, pre)
    }

    /// Transformation outputs before the heads: `Ê^v_cls`, `Ê^t_cls`, `Ê^id`,
    /// each `[items, d]`. `id_input` replaces the gathered ID table rows.
    pub fn encode(
        &self,
        ctx: &mut Ctx,
        catalog: &Catalog,
        items: &[usize],
        id_input: Option<Var>,
    ) -> PerBranch<Var> {
        let n = items.len();
        let d = self.d;
        let id_raw = self.id_table.map(|table| {
            id_input.unwrap_or_else(|| {
                let t = ctx.param(table);
                ctx.g.gather_rows(t, items)
            })
        });
        let mut out = PerBranch::empty();
        if self.fst == FstKind::None {
            out.id = id_raw;
            return out;
        }
        let id_proj = id_raw.map(|x| self.proj.id.as_ref().unwrap().forward(ctx, x));
        let vis = self.proj.v.as_ref().map(|p| {
            let x = ctx.g.constant(modality_input(catalog, items, true));
            p.forward(ctx, x)
        });
        let txt = self.proj.t.as_ref().map(|p| {
            let x = ctx.g.constant(modality_input(catalog, items, false));
            p.forward(ctx, x)
        });
        let flat = |ctx: &mut Ctx, x: Var| ctx.g.reshape(x, &[n, d]);
        match self.fst {
            FstKind::Imt => {
                let (v, t) = (vis.unwrap(), txt.unwrap());
                let (seq, outputs) = match id_proj {
                    Some(id) => {
                        let id = ctx.g.reshape(id, &[n, 1, d]);
                        let seq = ctx.g.concat(&[v, id, t]);
                        (seq, vec![self.n_v, self.n_v + 1, self.n_v + 2])
                    }
                    None => (ctx.g.concat(&[v, t]), vec![self.n_v, self.n_v + 1]),
                };
                let h = encode_stack(ctx, &self.joint, seq, &self.mask, &outputs);
                let pick = |ctx: &mut Ctx, j: usize| {
                    let s = ctx.g.select(h, &[j]);
                    flat(ctx, s)
                };
                out.v = Some(pick(ctx, 0));
                if id_proj.is_some() {
                    out.id = Some(pick(ctx, 1));
                    out.t = Some(pick(ctx, 2));
                } else {
                    out.t = Some(pick(ctx, 1));
                }
            }
            FstKind::Separate => {
                if let Some(v) = vis {
                    let h = encode_stack(ctx, &self.sep_v, v, &AttnMask::None, &[self.n_v]);
                    out.v = Some(flat(ctx, h));
                }
                if let Some(t) = txt {
                    let h = encode_stack(ctx, &self.sep_t, t, &AttnMask::None, &[0]);
                    out.t = Some(flat(ctx, h));
                }
                out.id = id_proj;
            }
            FstKind::Dnn => {
                if let Some(v) = vis {
                    let s = ctx.g.select(v, &[self.n_v]);
                    out.v = Some(flat(ctx, s));
                }
                if let Some(t) = txt {
                    let s = ctx.g.select(t, &[0]);
                    out.t = Some(flat(ctx, s));
                }
                out.id = id_proj;
            }
            FstKind::None => unreachable!(),
        }
        out
    }

    pub fn apply_heads(&self, ctx: &mut Ctx, pre: PerBranch<Var>) -> PerBranch<Var> {
        if self.fst == FstKind::None {
            return pre;
        }
        let mut out = PerBranch::empty();
        for &b in &self.branches {
            let x = *pre.get(b).expect("branch encoded");
            let head = self.heads.get(b).expect("branch head");
            out.set(b, head.forward(ctx, x));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, SyntheticConfig};
    use crate::numerics::ParamStore;
    use rand::SeedableRng;

    fn blocked_set(m: &[f64], side: usize) -> Vec<(usize, usize)> {
        (0..side * side)
            .filter(|&i| m[i] == BLOCKED)
            .map(|i| (i / side, i % side))
            .collect()
    }

    #[test]
    fn mask_one_patch_one_token() {
        let m = build_imt_mask(1, 1).unwrap();
        assert_eq!(m.len(), 25);
        assert_eq!(blocked_set(&m, 5), vec![(0, 2), (1, 2), (3, 2), (4, 2)]);
    }

    #[test]
    fn mask_two_patches_three_tokens() {
        let m = build_imt_mask(2, 3).unwrap();
        let blocked = blocked_set(&m, 8);
        assert!(blocked.iter().all(|&(_, c)| c == 3));
        let rows: Vec<usize> = blocked.iter().map(|&(r, _)| r).collect();
        assert_eq!(rows, vec![0, 1, 2, 4, 5, 6, 7]);
        // the ID row sees everything
        assert!(m[3 * 8..4 * 8].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_rejects_empty_modalities() {
        assert!(build_imt_mask(0, 2).is_err());
        assert!(build_imt_mask(2, 0).is_err());
    }

    fn tiny_catalog(d_v: usize, d_t: usize) -> Catalog {
        let cfg = SyntheticConfig {
            n_items: 12,
            n_users: 10,
            n_clusters: 3,
            min_interactions: 3,
            max_interactions: 5,
            n_v: 2,
            n_t: 2,
            d_v,
            d_t,
            ..Default::default()
        };
        generate_synthetic(&cfg).unwrap().catalog
    }

    #[test]
    fn average_init_is_the_mean_of_cls_rows() {
        let visual = vec![0.0, 0.0, 2.0, 0.0];
        let textual = vec![0.0, 2.0, 5.0, 5.0];
        let cat = Catalog::new(1, (1, 2), (1, 2), visual, textual).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = init_id_table(&cat, IdInit::AvgModal, 2, 0.1, &mut rng).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0]);
        let text = init_id_table(&cat, IdInit::Text, 2, 0.1, &mut rng).unwrap();
        assert_eq!(text.data(), cat.textual_cls(0));
        let image = init_id_table(&cat, IdInit::Image, 2, 0.1, &mut rng).unwrap();
        assert_eq!(image.data(), cat.visual_cls(0));
    }

    #[test]
    fn average_init_needs_equal_widths() {
        let cat = tiny_catalog(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            init_id_table(&cat, IdInit::AvgModal, 8, 0.1, &mut rng).unwrap_err(),
            TowerError::InitWidthMismatch { d_v: 4, d_t: 6 }
        );
        assert_eq!(init_id_table(&cat, IdInit::Text, 8, 0.1, &mut rng).unwrap().shape(), &[12, 6]);
    }

    #[test]
    fn random_init_is_seeded() {
        let cat = tiny_catalog(4, 4);
        let a = init_id_table(&cat, IdInit::Random, 8, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_id_table(&cat, IdInit::Random, 8, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[12, 8]);
    }

    fn tower(cfg: &ModelConfig, cat: &Catalog) -> (ItemTower, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = ItemTower::new(cfg, cat, &mut Init { store: &mut store, rng: &mut rng }).unwrap();
        (t, store)
    }

    fn model_cfg(fst: FstKind) -> ModelConfig {
        ModelConfig {
            d: 8,
            fst,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn every_variant_yields_d_wide_branch_outputs() {
        let cat = tiny_catalog(6, 6);
        for fst in [FstKind::Imt, FstKind::Separate, FstKind::Dnn] {
            let (t, store) = tower(&model_cfg(fst), &cat);
            let mut ctx = Ctx::eval(&store);
            let out = t.forward(&mut ctx, &cat, &[0, 5, 7]);
            assert_eq!(out.len(), 3);
            for (_, v) in out.iter() {
                assert_eq!(ctx.g.shape(*v), &[3, 8]);
                assert!(ctx.g.value(*v).is_finite());
            }
        }
        let mut id_only = model_cfg(FstKind::None);
        id_only.branches = vec![Branch::Id];
        id_only.id_init = IdInit::Random;
        let (t, store) = tower(&id_only, &cat);
        let mut ctx = Ctx::eval(&store);
        let out = t.forward(&mut ctx, &cat, &[1, 2]);
        assert_eq!(out.len(), 1);
        let table = store.value(t.id_table().unwrap());
        assert_eq!(ctx.g.value(out.id.unwrap()).data(), &table.data()[8..24]);
    }

    #[test]
    fn output_of_an_item_does_not_depend_on_its_batch() {
        let cat = tiny_catalog(6, 6);
        let (t, store) = tower(&model_cfg(FstKind::Imt), &cat);
        let mut ctx = Ctx::eval(&store);
        let all = t.forward(&mut ctx, &cat, &[3, 4, 9]);
        let mut ctx1 = Ctx::eval(&store);
        let one = t.forward(&mut ctx1, &cat, &[4]);
        for b in Branch::ALL {
            let a = ctx.g.value(*all.get(b).unwrap()).row(1).to_vec();
            let s = ctx1.g.value(*one.get(b).unwrap()).row(0).to_vec();
            for (x, y) in a.iter().zip(&s) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn cls_with_id_input(t: &ItemTower, store: &ParamStore, cat: &Catalog, id: Tensor) -> (Tensor, Tensor) {
        let mut ctx = Ctx::eval(store);
        let leaf = ctx.g.leaf(id);
        let e = t.encode(&mut ctx, cat, &[0, 1, 2], Some(leaf));
        (ctx.g.value(e.v.unwrap()).clone(), ctx.g.value(e.t.unwrap()).clone())
    }

    #[test]
    fn masked_id_input_cannot_reach_modality_outputs() {
        let cat = tiny_catalog(6, 6);
        let (t, store) = tower(&model_cfg(FstKind::Imt), &cat);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cls_with_id_input(&t, &store, &cat, Tensor::randn(&[3, 6], 1.0, &mut rng));
        let b = cls_with_id_input(&t, &store, &cat, Tensor::randn(&[3, 6], 1.0, &mut rng));
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());

        // analytic gradients are exactly zero too
        let mut ctx = Ctx::eval(&store);
        let leaf = ctx.g.leaf(Tensor::randn(&[3, 6], 1.0, &mut rng));
        let e = t.encode(&mut ctx, &cat, &[0, 1, 2], Some(leaf));
        for out in [e.v.unwrap(), e.t.unwrap()] {
            // layer norm rows sum to a constant, so weight them first
            let w = ctx.g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
            let o = ctx.g.mul(out, w);
            let s = ctx.g.sum(o);
            let grads = ctx.g.backward(s).unwrap();
            let g = grads.wrt(leaf).map(|g| g.data().to_vec()).unwrap_or_default();
            assert!(g.iter().all(|&x| x == 0.0), "{g:?}");
        }
        let w = ctx.g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let o = ctx.g.mul(e.id.unwrap(), w);
        let s = ctx.g.sum(o);
        let grads = ctx.g.backward(s).unwrap();
        assert!(grads.wrt(leaf).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn without_the_mask_id_input_leaks_into_modality_outputs() {
        let cat = tiny_catalog(6, 6);
        let mut cfg = model_cfg(FstKind::Imt);
        cfg.id_mask = false;
        let (t, store) = tower(&cfg, &cat);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cls_with_id_input(&t, &store, &cat, Tensor::randn(&[3, 6], 1.0, &mut rng));
        let b = cls_with_id_input(&t, &store, &cat, Tensor::randn(&[3, 6], 1.0, &mut rng));
        assert!(a.0.max_abs_diff(&b.0) > 0.0);
        assert!(a.1.max_abs_diff(&b.1) > 0.0);
    }

    #[test]
    fn equal_patch_rows_make_order_irrelevant() {
        // two identical patch rows: swapping them is a no-op on the input,
        // so only the text cls output is checked for stability
        let d = 4;
        let mut visual = vec![0.3; 3 * d];
        visual[2 * d..].copy_from_slice(&[1.0, -1.0, 0.5, 0.0]);
        let textual: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let cat = Catalog::new(1, (2, d), (2, d), visual.clone(), textual.clone()).unwrap();
        let cfg = ModelConfig {
            d: 4,
            dropout: 0.0,
            ..Default::default()
        };
        let (t, store) = tower(&cfg, &cat);
        let mut ctx = Ctx::eval(&store);
        let a = t.forward(&mut ctx, &cat, &[0]);
        let mut swapped = visual;
        swapped.swap(0, d);
        let cat2 = Catalog::new(1, (2, d), (2, d), swapped, textual).unwrap();
        let mut ctx2 = Ctx::eval(&store);
        let b = t.forward(&mut ctx2, &cat2, &[0]);
        assert_eq!(ctx.g.value(a.t.unwrap()), ctx2.g.value(b.t.unwrap()));
    }

    #[test]
    fn separate_stacks_ignore_the_id_table() {
        let cat = tiny_catalog(6, 6);
        let (t, mut store) = tower(&model_cfg(FstKind::Separate), &cat);
        let run = |store: &ParamStore| {
            let mut ctx = Ctx::eval(store);
            let out = t.forward(&mut ctx, &cat, &[0, 1]);
            (ctx.g.value(out.v.unwrap()).clone(), ctx.g.value(out.t.unwrap()).clone())
        };
        let before = run(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store
            .set_value("item.id_table", Tensor::randn(&[12, 6], 3.0, &mut rng))
            .unwrap();
        assert_eq!(run(&store), before);
        assert!(store.names().any(|n| n.starts_with("item.sep.v.1")));
        assert!(store.names().all(|n| !n.starts_with("item.imt")));
    }
}
