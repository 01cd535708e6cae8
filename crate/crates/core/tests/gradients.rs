mod common;

use common::{finite_difference, max_relative_error, random_matrix};
use lamda_core::accounting::Method;
use lamda_core::graph::Graph;
use lamda_core::model::{block_forward, Projection, ToyConfig, ToyModel};
use lamda_core::task::TaskKind;
use lamda_core::train::{prepare_model, TrainRunConfig};
use lamda_core::{Precision, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ToyConfig {
    ToyConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        vocab: 10,
        context: 5,
        causal: true,
    }
}

fn adapted(method: Method, rank: usize) -> ToyModel {
    let backbone = ToyModel::init(tiny(), 3).unwrap();
    let mut cfg = TrainRunConfig::new(method, TaskKind::Copy, 1, 0.0);
    cfg.rank = Some(rank);
    let (mut m, _) = prepare_model(&backbone, &cfg).unwrap();
    // move S away from identity so the check is not at a special point
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in m.module_ids() {
        if let Projection::Lamda(s) = &mut m.linear_mut(id).proj {
            s.s = s.s.add(&random_matrix(rank, rank, &mut rng).scale(0.3)).unwrap();
        }
    }
    m
}

/// `Σ block(x) ⊙ c` for block 0 over two stacked sequences.
fn block_loss(m: &ToyModel, x: &Tensor, c: &Tensor) -> (f64, Vec<(String, Tensor)>) {
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(x.clone());
    let (y, params) = block_forward(m, &mut g, 0, xv, 2).unwrap();
    let cv = g.constant(c.clone());
    let prod = g.mul(y, cv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let named = params
        .iter()
        .map(|p| (p.name.clone(), grads.get(p.var).unwrap().clone()))
        .collect();
    (g.value(loss).data()[0], named)
}

fn check(m: &ToyModel, name: &str, live_rows: Option<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(10, 8, &mut rng);
    let c = random_matrix(10, 8, &mut rng);
    let (_, grads) = block_loss(m, &x, &c);
    let analytic = grads.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name} not bound")).1.clone();
    let p0 = m.clone().param_mut(name).unwrap().clone();
    let numeric = finite_difference(&p0, 1e-6, |p| {
        let mut mm = m.clone();
        *mm.param_mut(name).unwrap() = p.clone();
        block_loss(&mm, &x, &c).0
    });
    let (a, n) = match live_rows {
        Some(r) => (analytic.slice_rows(0, r).unwrap(), numeric.slice_rows(0, r).unwrap()),
        None => (analytic, numeric),
    };
    let err = max_relative_error(&a, &n);
    assert!(err < 1e-6, "{name}: relative error {err}");
}

#[test]
fn lamda_core_gradients_through_block() {
    let m = adapted(Method::Lamda, 3);
    for kind in ["q", "k", "v", "o", "ffn1", "ffn2"] {
        check(&m, &format!("layers.0.{kind}.s"), None);
        check(&m, &format!("layers.0.{kind}.b"), Some(3));
    }
}

#[test]
fn partially_frozen_b_gradients() {
    let mut m = adapted(Method::Lamda, 3);
    for id in m.module_ids() {
        if let Projection::Lamda(s) = &mut m.linear_mut(id).proj {
            s.set_trainable_rows(1).unwrap();
        }
    }
    check(&m, "layers.0.v.b", Some(1));
    check(&m, "layers.0.ffn2.b", Some(1));
}

#[test]
fn lora_and_dense_gradients() {
    let m = adapted(Method::Lora, 2);
    check(&m, "layers.0.q.a", None);
    check(&m, "layers.0.ffn1.b", None);
    let dense = ToyModel::init(tiny(), 4).unwrap();
    for name in ["layers.0.k.weight", "layers.0.ln1.gain", "layers.0.ffn2.bias", "layers.0.ln2.bias"] {
        check(&dense, name, None);
    }
}

#[test]
fn full_model_cross_entropy_gradient() {
    let m = adapted(Method::Lamda, 2);
    let ids = [2, 3, 4, 0, 4, 5, 6, 7, 0, 7];
    let targets = [None, None, Some(4), Some(3), Some(2), None, None, Some(7), Some(6), None];
    let loss = |m: &ToyModel| {
        let mut g = Graph::new(Precision::F64);
        let f = m.forward(&mut g, &ids, 2).unwrap();
        let l = g.cross_entropy(f.logits, &targets).unwrap();
        let grads = g.backward(l).unwrap();
        let s = f.params.iter().find(|p| p.name == "layers.1.o.s").unwrap();
        (g.value(l).data()[0], grads.get(s.var).unwrap().clone())
    };
    let (_, analytic) = loss(&m);
    let s0 = m.clone().param_mut("layers.1.o.s").unwrap().clone();
    let numeric = finite_difference(&s0, 1e-6, |p| {
        let mut mm = m.clone();
        *mm.param_mut("layers.1.o.s").unwrap() = p.clone();
        loss(&mm).0
    });
    assert!(max_relative_error(&analytic, &numeric) < 1e-6);
}
