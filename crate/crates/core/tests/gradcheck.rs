mod common;

use std::rc::Rc;

use common::*;
use dpmem_core::arch::Mlp;
use dpmem_core::autodiff::{GradCollector, Nonlinearity, Tape, Var};
use dpmem_core::ledger::Category;
use dpmem_core::params::ParamStore;
use dpmem_core::rng::SeededRng;
use dpmem_core::tensor::Tensor;

type Build = dyn Fn(&Tape<f64>, &[Var<f64>], &ParamStore<f64>) -> Var<f64>;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gaussian()).collect(), Category::Activations).unwrap()
}

fn scalar_loss(tape: &Tape<f64>, out: &Var<f64>) -> Var<f64> {
    // tanh keeps the cotangent non-uniform across elements
    let t = tape.activation(out, Nonlinearity::Tanh);
    tape.sum(&t)
}

fn eval(inputs: &[Tensor<f64>], params: &ParamStore<f64>, f: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone(), false)).collect();
    let out = f(&tape, &vars, params);
    scalar_loss(&tape, &out).value().item()
}

/// Worst relative error over every input and parameter coordinate.
fn check(inputs: Vec<Tensor<f64>>, mut params: ParamStore<f64>, f: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = f(&tape, &vars, &params);
    let loss = scalar_loss(&tape, &out);
    drop(out);
    let mut collector = GradCollector::sum();
    let leaves = tape.backward(&loss, &mut collector).unwrap();
    let h = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut inputs = inputs;
    for k in 0..inputs.len() {
        let analytic = leaves.get(&vars[k]).map(|g| g.to_f64_vec()).unwrap_or(vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            inputs[k].data_mut()[j] = orig + h;
            let up = eval(&inputs, &params, f);
            inputs[k].data_mut()[j] = orig - h;
            let down = eval(&inputs, &params, f);
            inputs[k].data_mut()[j] = orig;
            worst = worst.max(rel(analytic[j], (up - down) / (2.0 * h)));
        }
    }
    let grads = collector.into_grads();
    for name in params.trainable_names() {
        let n = params.get(&name).unwrap().numel();
        for j in 0..n {
            let orig = params.get(&name).unwrap().value().data()[j];
            params.get_mut(&name).unwrap().value_mut().data_mut()[j] = orig + h;
            let up = eval(&inputs, &params, f);
            params.get_mut(&name).unwrap().value_mut().data_mut()[j] = orig - h;
            let down = eval(&inputs, &params, f);
            params.get_mut(&name).unwrap().value_mut().data_mut()[j] = orig;
            worst = worst.max(rel(grads[&name].data()[j], (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(*n, t.copy_as(Category::Weights), true).unwrap();
    }
    s
}

#[test]
fn linear() {
    let p = store(&[("w", randn(&[4, 3], 1)), ("b", randn(&[3], 2))]);
    let f: &Build = &|t, v, p| t.linear(&v[0], p.get("w").unwrap(), Some(p.get("b").unwrap())).unwrap();
    assert!(check(vec![randn(&[2, 3, 4], 3)], p, f) < 1e-4);
    let p = store(&[("w", randn(&[4, 3], 1))]);
    let f: &Build = &|t, v, p| t.linear(&v[0], p.get("w").unwrap(), None).unwrap();
    assert!(check(vec![randn(&[2, 4], 3)], p, f) < 1e-4);
}

#[test]
fn matmul_shared_and_batched() {
    let f: &Build = &|t, v, _| t.matmul(&v[0], &v[1]).unwrap();
    assert!(check(vec![randn(&[2, 3, 4], 4), randn(&[4, 5], 5)], ParamStore::new(), f) < 1e-4);
    assert!(check(vec![randn(&[2, 3, 4], 6), randn(&[2, 4, 2], 7)], ParamStore::new(), f) < 1e-4);
}

#[test]
fn param_operand() {
    let p = store(&[("k", randn(&[4, 3], 8))]);
    let f: &Build = &|t, v, p| t.matmul(&v[0], &t.param(p.get("k").unwrap())).unwrap();
    assert!(check(vec![randn(&[2, 2, 4], 9)], p, f) < 1e-4);
}

#[test]
fn elementwise() {
    let f: &Build = &|t, v, _| t.axpby(0.7, &v[0], -1.3, &v[1]).unwrap();
    assert!(check(vec![randn(&[3, 4], 10), randn(&[3, 4], 11)], ParamStore::new(), f) < 1e-4);
    let f: &Build = &|t, v, _| t.add(&v[0], &v[0]).unwrap();
    assert!(check(vec![randn(&[5], 12)], ParamStore::new(), f) < 1e-4);
    let f: &Build = &|t, v, _| t.scale(&v[0], -2.5).unwrap();
    assert!(check(vec![randn(&[2, 3], 13)], ParamStore::new(), f) < 1e-4);
    let f: &Build = &|t, v, _| t.mul_columns(&v[0], &[1.0, 0.0, -0.5]).unwrap();
    assert!(check(vec![randn(&[2, 2, 3], 14)], ParamStore::new(), f) < 1e-4);
}

#[test]
fn activations() {
    for kind in [Nonlinearity::Relu, Nonlinearity::Gelu, Nonlinearity::Tanh, Nonlinearity::Identity] {
        let f: &Build = &move |t, v, _| t.activation(&v[0], kind);
        let x = randn(&[4, 6], 15).map(Category::Activations, |v| if v.abs() < 1e-3 { 0.5 } else { v });
        assert!(check(vec![x], ParamStore::new(), f) < 1e-4, "{kind:?}");
    }
}

#[test]
fn reductions() {
    let f: &Build = &|t, v, _| t.softmax(&v[0]);
    assert!(check(vec![randn(&[2, 3, 5], 16)], ParamStore::new(), f) < 1e-4);
    let f: &Build = &|t, v, _| t.mean_pool(&v[0]).unwrap();
    assert!(check(vec![randn(&[2, 3, 4], 17)], ParamStore::new(), f) < 1e-4);
    let f: &Build = &|t, v, _| t.weighted_sum(&v[0], &[0.2, -1.0, 3.0]).unwrap();
    assert!(check(vec![randn(&[3], 18)], ParamStore::new(), f) < 1e-4);
    let f: &Build = &|t, v, _| t.sum(&v[0]);
    assert!(check(vec![randn(&[2, 2], 19)], ParamStore::new(), f) < 1e-4);
    let labels: Rc<[usize]> = vec![2, 0, 1].into();
    let f: &Build = &move |t, v, _| t.cross_entropy(&v[0], &labels).unwrap();
    assert!(check(vec![randn(&[3, 4], 20)], ParamStore::new(), f) < 1e-4);
}

#[test]
fn embedding_with_repeated_tokens() {
    let p = store(&[("e", randn(&[5, 3], 21))]);
    let tokens: Rc<[usize]> = vec![1, 4, 1, 0, 1, 2].into();
    let f: &Build = &move |t, _, p| t.embedding(&tokens, [2, 3], p.get("e").unwrap()).unwrap();
    assert!(check(vec![], p, f) < 1e-4);
}

#[test]
fn mlp_end_to_end() {
    for act in [Nonlinearity::Gelu, Nonlinearity::Tanh] {
        let mut m: Mlp<f64> = Mlp::new(7, &[5, 6, 4], 3, 3, act, 4).unwrap();
        let batch = random_batch(4, 3, 7, 3, 5);
        let (err, at) = worst_gradcheck(&mut m, &batch, 40);
        assert!(err < 1e-4, "{act:?}: {err} at {at}");
    }
}
