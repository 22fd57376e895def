use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{numeric_gradient, relative_error};
use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Builds `sum(op(inputs) ⊙ w)` for fixed random weights `w`, so every output
/// coordinate influences the root.
fn weighted_root(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w);
    g.sum(prod)
}

/// Checks d root / d input_k against central differences for each input.
fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let root = weighted_root(&mut g, out, 99);
        g.value(root).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let root = weighted_root(&mut g, out, 99);
    let grads = g.backward(root).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = numeric_gradient(&inputs[k], H, |probe| {
            let mut vals = inputs.clone();
            vals[k] = probe.clone();
            eval(&vals)
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let err = relative_error(*a, *n);
            assert!(err <= TOL, "input {k}: analytic {a} vs numeric {n} (rel {err})");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn square_sum_gradient_is_twice_input() {
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(&[1.0, 2.0, 3.0]));
    let p = g.param(&store, id);
    let sq = g.mul(p, p);
    let root = g.sum(sq);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.param(id).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn constant_root_has_empty_gradient_set() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(&[1.0, 2.0]));
    let root = g.sum(c);
    let grads = g.backward(root).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
    assert_eq!(
        g.backward(x).unwrap_err(),
        NumericsError::NonScalarRoot(vec![2])
    );
}

#[test]
fn non_finite_intermediate_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(&[0.0, 1.0]));
    let l = g.log(x);
    let root = g.sum(l);
    assert!(matches!(
        g.backward(root),
        Err(NumericsError::NonFinite { op: "log", .. })
    ));
}

#[test]
fn repeated_backward_accumulates_additively() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(&[1.0, -2.0]));
    for _ in 0..3 {
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let sq = g.mul(p, p);
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        store.accumulate(&grads);
    }
    assert_eq!(store.get(id).grad.data(), &[6.0, -12.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
}

#[test]
fn matmul_gradients() {
    check_op(vec![rand(&[2, 3, 4], 1), rand(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1]));
    check_op(vec![rand(&[3, 4], 3), rand(&[5, 4], 4)], |g, v| g.matmul_nt(v[0], v[1]));
}

#[test]
fn elementwise_gradients() {
    let a = rand(&[3, 4], 5);
    let b = rand(&[3, 4], 6);
    check_op(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check_op(vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    check_op(vec![a.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check_op(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.01));
    check_op(vec![a.clone()], |g, v| g.gelu(v[0]));
    check_op(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check_op(vec![a.clone()], |g, v| g.tanh(v[0]));
    check_op(vec![a.clone()], |g, v| g.exp(v[0]));
    let pos = Tensor::new(&[5], vec![0.5, 1.0, 2.0, 3.5, 0.1]).unwrap();
    check_op(vec![pos], |g, v| g.log(v[0]));
    check_op(vec![a.clone(), rand(&[4], 7)], |g, v| g.add_bias(v[0], v[1]));
}

#[test]
fn reduction_and_indexing_gradients() {
    let a = rand(&[4, 3], 8);
    check_op(vec![a.clone()], |g, v| {
        let s = g.sum(v[0]);
        g.scale(s, 2.0)
    });
    check_op(vec![a.clone()], |g, v| g.mean(v[0]));
    check_op(vec![a.clone()], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
    check_op(vec![a.clone()], |g, v| g.pick(v[0], &[2, 0, 1, 1]));
    check_op(vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6]));
    let x = rand(&[2, 3, 4], 9);
    let y = rand(&[2, 1, 4], 10);
    check_op(vec![x.clone(), y], |g, v| g.concat(&[v[0], v[1]]));
    check_op(vec![x], |g, v| g.select(v[0], &[2, 0]));
}

#[test]
fn softmax_family_gradients() {
    let a = rand(&[3, 5], 11);
    check_op(vec![a.clone()], |g, v| g.softmax(v[0]));
    check_op(vec![a.clone()], |g, v| g.log_softmax(v[0], None));
    let mut blocked = vec![false; 15];
    blocked[1] = true;
    blocked[7] = true;
    blocked[8] = true;
    let blocked = Arc::new(blocked);
    check_op(vec![a], move |g, v| g.log_softmax(v[0], Some(blocked.clone())));
}

#[test]
fn layer_norm_gradients() {
    check_op(
        vec![rand(&[3, 6], 12), rand(&[6], 13), rand(&[6], 14)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn attention_gradients_with_masks() {
    let q = rand(&[2, 3, 4], 15);
    let k = rand(&[2, 5, 4], 16);
    let v = rand(&[2, 5, 4], 17);
    check_op(vec![q.clone(), k.clone(), v.clone()], |g, x| {
        g.attention(x[0], x[1], x[2], &AttnMask::None, 2)
    });
    let mut shared = vec![0.0; 15];
    shared[1] = BLOCKED;
    shared[5 + 4] = BLOCKED;
    shared[10] = -0.7;
    let shared = AttnMask::Shared(Arc::new(shared));
    check_op(vec![q.clone(), k.clone(), v.clone()], move |g, x| {
        g.attention(x[0], x[1], x[2], &shared, 2)
    });
    let mut per = vec![0.0; 30];
    per[0] = BLOCKED;
    per[15 + 3] = BLOCKED;
    let per = AttnMask::PerSample(Arc::new(per));
    check_op(vec![q, k, v], move |g, x| g.attention(x[0], x[1], x[2], &per, 1));
}

#[test]
fn blocked_attention_keys_get_exactly_zero_gradient() {
    // key/value 1 is blocked for every query
    let mut mask = vec![0.0; 6];
    mask[1] = BLOCKED;
    mask[3 + 1] = BLOCKED;
    let mask = AttnMask::Shared(Arc::new(mask));
    let mut g = Graph::new();
    let q = g.leaf(rand(&[1, 2, 4], 20));
    let k = g.leaf(rand(&[1, 3, 4], 21));
    let v = g.leaf(rand(&[1, 3, 4], 22));
    let out = g.attention(q, k, v, &mask, 2);
    let root = weighted_root(&mut g, out, 5);
    let grads = g.backward(root).unwrap();
    for t in [grads.wrt(k).unwrap(), grads.wrt(v).unwrap()] {
        assert!(t.data()[4..8].iter().all(|x| *x == 0.0));
        assert!(t.data()[..4].iter().any(|x| *x != 0.0));
    }
}

#[test]
fn dropout_gradient_matches_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1000], 1.0));
    let y = g.dropout(x, 0.25, &mut rng);
    let root = g.sum(y);
    let out = g.value(y).clone();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), out.data());
    let dropped = out.data().iter().filter(|v| **v == 0.0).count();
    assert!((150..350).contains(&dropped), "dropped {dropped}");
}

#[test]
fn identical_graphs_are_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(rand(&[2, 5, 8], 30));
        let a = g.attention(x, x, x, &AttnMask::None, 2);
        let s = g.softmax(a);
        let root = weighted_root(&mut g, s, 1);
        let grads = g.backward(root).unwrap();
        (g.value(root).item(), grads.wrt(x).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
