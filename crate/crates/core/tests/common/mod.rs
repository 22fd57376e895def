//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use odmt::branches::PerBranch;
use odmt::config::{ExperimentConfig, ModelConfig};
use odmt::datagen::{Batch, Catalog};
use odmt::losses::{distill_kl, ensemble, inbatch_ce};
use odmt::model::Model;
use odmt::nn::Ctx;
use odmt::numerics::gradcheck::{check_params, relative_error, GradCheckReport};
use odmt::numerics::{Graph, ParamStore, Tensor, Var};

pub const N_V: usize = 2;
pub const N_T: usize = 2;
pub const FEAT: usize = 6;

/// Six items with Gaussian features: two patches and two tokens each.
pub fn toy_catalog(seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let v = Tensor::randn(&[n * (N_V + 1) * FEAT], 1.0, &mut rng);
    let t = Tensor::randn(&[n * (N_T + 1) * FEAT], 1.0, &mut rng);
    Catalog::new(n, (N_V, FEAT), (N_T, FEAT), v.data().to_vec(), t.data().to_vec()).unwrap()
}

/// Two rows over exactly four candidates; each row blocks its own history.
pub fn toy_batch() -> Batch {
    Batch {
        users: vec![0, 1],
        inputs: vec![vec![0, 1], vec![1]],
        targets: vec![2, 3],
        exclusions: vec![vec![0, 1], vec![1]],
    }
}

pub const TOY_POP: [u64; 6] = [3, 1, 2, 5, 4, 1];

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        seq_heads: 2,
        dropout: 0.0,
        ..Default::default()
    }
}

/// Small synthetic experiment that trains in seconds.
pub fn small_experiment(epochs: usize) -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[
            "data.synthetic.n_items=300",
            "data.synthetic.n_users=400",
            "data.synthetic.n_clusters=10",
            "model.d=16",
            &format!("train.epochs={epochs}"),
        ])
        .unwrap()
}

/// `ΣCE + w·ΣKL` with every teacher replaced by a fixed score matrix.
#[allow(clippy::too_many_arguments)]
fn frozen_objective(
    g: &mut Graph,
    logits: &PerBranch<Var>,
    fused: Option<Var>,
    teachers: &PerBranch<Tensor>,
    target_cols: &[usize],
    blocked: &Arc<Vec<bool>>,
    distill: Option<(f64, f64)>,
    collaborative: bool,
) -> Var {
    if !collaborative {
        let z = fused.unwrap_or_else(|| {
            let all: Vec<Var> = logits.iter().map(|(_, v)| *v).collect();
            ensemble(g, &all)
        });
        return inbatch_ce(g, z, target_cols, blocked);
    }
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph, v: Var| {
        total = Some(match total {
            Some(t) => g.add(t, v),
            None => v,
        })
    };
    for (_, &z) in logits.iter() {
        let ce = inbatch_ce(g, z, target_cols, blocked);
        push(g, ce);
    }
    if let Some((temp, w)) = distill {
        for (b, &z) in logits.iter() {
            let teacher = g.constant(teachers.get(b).unwrap().clone());
            let kl = distill_kl(g, teacher, z, temp, blocked).unwrap();
            let kl = g.scale(kl, w);
            push(g, kl);
        }
    }
    total.unwrap()
}

pub struct GradCheck {
    pub report: GradCheckReport,
    /// Largest relative gap between the production gradient and the gradient
    /// of the frozen-teacher objective at the base point.
    pub production_gap: f64,
}

/// Checks every parameter of a toy model against central differences of the
/// total loss. Teachers are treated as constants, as in training.
pub fn whole_model_gradcheck(cfg: &ModelConfig, distill: Option<(f64, f64)>, h: f64, per_param: usize) -> GradCheck {
    let catalog = toy_catalog(3);
    let batch = toy_batch();
    let (model, store) = Model::new(cfg, &catalog, 4, 11).unwrap();
    let collaborative = cfg.fusion == odmt::config::Fusion::Collaborative;

    let mut ctx = Ctx::eval(&store);
    let fwd = model.batch_forward(&mut ctx, &catalog, &batch, &TOY_POP).unwrap();
    assert_eq!(fwd.candidates.len(), 4);
    let (loss, _) = model.loss(&mut ctx, &fwd, distill).unwrap();
    let production = ctx.g.backward(loss).unwrap();

    // teacher values at the base point
    let all: Vec<Var> = fwd.logits.branches.iter().map(|(_, v)| *v).collect();
    let teachers = if all.is_empty() {
        PerBranch::empty()
    } else {
        let z_e = ensemble(&mut ctx.g, &all);
        let z_e = ctx.g.value(z_e).clone();
        let z_id = fwd.logits.branches.id.map(|v| ctx.g.value(v).clone());
        fwd.logits.branches.map(|b, _| match b {
            odmt::branches::Branch::Id => z_e.clone(),
            _ => z_id.clone().unwrap_or_else(|| z_e.clone()),
        })
    };
    drop(ctx);

    let eval = |store: &ParamStore| {
        let mut ctx = Ctx::eval(store);
        let fwd = model.batch_forward(&mut ctx, &catalog, &batch, &TOY_POP).unwrap();
        let l = frozen_objective(
            &mut ctx.g,
            &fwd.logits.branches,
            fwd.logits.fused,
            &teachers,
            &fwd.target_cols,
            &fwd.blocked,
            distill,
            collaborative,
        );
        let v = ctx.g.value(l).item();
        (ctx.g.backward(l).unwrap(), v)
    };
    let (frozen, _) = eval(&store);
    let mut production_gap: f64 = 0.0;
    for (id, p) in store.iter() {
        let a = production.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let b = frozen.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for (x, y) in a.data().iter().zip(b.data()) {
            production_gap = production_gap.max(relative_error(*x, *y));
        }
    }
    let report = check_params(
        &store,
        &|id| production.param(id).cloned(),
        &mut |s| eval(s).1,
        h,
        per_param,
    );
    GradCheck { report, production_gap }
}
