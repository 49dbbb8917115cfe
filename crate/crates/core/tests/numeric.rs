mod common;

use std::rc::Rc;

use common::random_tensor;
use proptest::prelude::*;
use splitgnn_core::nn::{self, cross_entropy, linear, Linear};
use splitgnn_core::nn::init_rng;
use splitgnn_core::{finite_diff_check, Error, Optimizer, OptimizerKind, ParamSet, Tape, Tensor, Var};

const TRIALS: u64 = 100;

/// Reduces `out` to a scalar with a fixed random projection so every output
/// element carries gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(seed ^ 0xfeed, &shape));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Runs `build` on a tape with `params` as leaves, then compares analytic and
/// numeric gradients.
fn check<F>(params: ParamSet, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |p: &ParamSet| -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.values().iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = project(&mut tape, out, seed);
        (tape, loss, vars)
    };
    let (tape, loss, vars) = run(&params);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    finite_diff_check(
        |p| {
            let (tape, loss, _) = run(p);
            Ok(tape.value(loss).data()[0])
        },
        &params,
        &analytic,
        1e-6,
    )
    .unwrap()
}

fn params(seed: u64, shapes: &[&[usize]]) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, s) in shapes.iter().enumerate() {
        p.add(format!("p{k}"), random_tensor(seed * 31 + k as u64, s));
    }
    p
}

fn worst_over_trials<F>(shapes: &[&[usize]], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var + Copy,
{
    (0..TRIALS)
        .map(|t| check(params(t, shapes), t, build))
        .fold(0.0, f64::max)
}

macro_rules! op_gradient {
    ($name:ident, $shapes:expr, $build:expr) => {
        #[test]
        fn $name() {
            let worst = worst_over_trials($shapes, $build);
            assert!(worst < 1e-4, "worst relative error {worst:e}");
        }
    };
}

op_gradient!(matmul_gradient, &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
op_gradient!(add_row_gradient, &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]).unwrap());
op_gradient!(mul_gradient, &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]).unwrap());
op_gradient!(mul_row_gradient, &[&[3, 4], &[4]], |t, v| t.mul_row(v[0], v[1]).unwrap());
op_gradient!(add_all_gradient, &[&[2, 3], &[2, 3], &[2, 3]], |t, v| t
    .add_all(v)
    .unwrap());
op_gradient!(scale_by_elem_gradient, &[&[3, 2], &[4]], |t, v| t
    .scale_by_elem(v[0], v[1], 2)
    .unwrap());
op_gradient!(elu_gradient, &[&[4, 5]], |t, v| t.elu(v[0]));
op_gradient!(tanh_gradient, &[&[4, 5]], |t, v| t.tanh(v[0]));
op_gradient!(leaky_relu_gradient, &[&[4, 5]], |t, v| t.leaky_relu(v[0], 0.2));
op_gradient!(concat_cols_gradient, &[&[3, 2], &[3, 4]], |t, v| t
    .concat_cols(v)
    .unwrap());
op_gradient!(concat_rows_gradient, &[&[2, 3], &[4, 3]], |t, v| t
    .concat_rows(v)
    .unwrap());
op_gradient!(gather_rows_gradient, &[&[4, 3]], |t, v| t
    .gather_rows(v[0], Rc::new(vec![3, 0, 0, 2, 3]))
    .unwrap());
op_gradient!(slice_rows_gradient, &[&[5, 3]], |t, v| t.slice_rows(v[0], 1, 4).unwrap());
op_gradient!(row_dot_gradient, &[&[4, 3], &[4, 3]], |t, v| t.row_dot(v[0], v[1]).unwrap());
op_gradient!(gather_row_dot_gradient, &[&[3, 4], &[5, 4]], |t, v| t
    .gather_row_dot(v[0], Rc::new(vec![2, 0, 2, 1, 0]), v[1])
    .unwrap());
op_gradient!(gather_sum_gradient, &[&[3, 2], &[5, 2], &[2]], |t, v| t
    .gather_sum(
        &[(v[0], Some(Rc::new(vec![0, 2, 2, 1]))), (v[1], Some(Rc::new(vec![4, 0, 1, 1])))],
        Some(v[2]),
    )
    .unwrap());
op_gradient!(segment_softmax_gradient, &[&[6]], |t, v| t
    .segment_softmax(v[0], Rc::new(vec![0, 1, 0, 2, 1, 0]), 3)
    .unwrap());
op_gradient!(segment_weighted_sum_gradient, &[&[5], &[5, 3]], |t, v| t
    .segment_weighted_sum(v[0], v[1], Rc::new(vec![1, 0, 1, 1, 0]), 2)
    .unwrap());
op_gradient!(softmax_gradient, &[&[5]], |t, v| t.softmax(v[0], 0.7).unwrap());
op_gradient!(mean_gradient, &[&[3, 3]], |t, v| t.mean(v[0]));
op_gradient!(reshape_gradient, &[&[2, 6]], |t, v| t.reshape(v[0], vec![3, 4]).unwrap());
op_gradient!(cross_entropy_gradient, &[&[4, 3]], |t, v| t
    .cross_entropy(v[0], Rc::new(vec![2, 0, 1, 1]))
    .unwrap());
op_gradient!(dropout_mask_gradient, &[&[4, 3]], |t, v| {
    let key = nn::DropoutKey {
        seed: 3,
        party: 0,
        layer: 0,
        step: 1,
    };
    nn::dropout(t, v[0], 0.3, key, true).unwrap()
});

#[test]
fn softmax_cross_entropy_stack_passes_oracle() {
    let mut p = ParamSet::new();
    let mut rng = init_rng(8, &[]);
    let layer = Linear::new(&mut p, "fc", 5, 3, &mut rng);
    let x = random_tensor(9, &[6, 5]);
    let labels = [0, 2, 1, 1, 0, 2];
    let forward = |p: &ParamSet| -> (Tape, Var, nn::Bound) {
        let mut tape = Tape::new();
        let bound = p.register(&mut tape);
        let xv = tape.constant(x.clone());
        let logits = linear(&mut tape, xv, bound.var(layer.weight), bound.var(layer.bias)).unwrap();
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        (tape, loss, bound)
    };
    let (tape, loss, bound) = forward(&p);
    let grads = tape.backward(loss).unwrap();
    let analytic = p.collect_grads(&bound, &grads);
    let err = finite_diff_check(
        |p| {
            let (t, l, _) = forward(p);
            Ok(t.value(l).data()[0])
        },
        &p,
        &analytic,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = random_tensor(4, &[3, 4]);
    let labels = vec![1, 3, 0];
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, Rc::new(labels.clone())).unwrap();
    let g = tape.backward(loss).unwrap().get_or_zeros(l);
    for (i, &lab) in labels.iter().enumerate() {
        let p = nn::softmax(&Tensor::vector(logits.row(i).to_vec()), 1.0).unwrap();
        for j in 0..4 {
            let expect = (p.data()[j] - f64::from(u8::from(j == lab))) / 3.0;
            assert!((g.at(i, j) - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn out_of_range_label_is_domain_error() {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.cross_entropy(l, Rc::new(vec![0, 5])), Err(Error::Domain(_))));
}

/// A small two-layer network used for replay checks.
fn replay_grads(seed: u64) -> Vec<Vec<u64>> {
    let mut p = ParamSet::new();
    let mut rng = init_rng(seed, &[1]);
    let l1 = Linear::new(&mut p, "a", 4, 6, &mut rng);
    let l2 = Linear::new(&mut p, "b", 6, 3, &mut rng);
    let mut tape = Tape::new();
    let bound = p.register(&mut tape);
    let x = tape.constant(random_tensor(seed, &[5, 4]));
    let h = l1.forward(&mut tape, &bound, x).unwrap();
    let h = tape.elu(h);
    let key = nn::DropoutKey {
        seed,
        party: 0,
        layer: 1,
        step: 2,
    };
    let h = nn::dropout(&mut tape, h, 0.3, key, true).unwrap();
    let logits = l2.forward(&mut tape, &bound, h).unwrap();
    let loss = cross_entropy(&mut tape, logits, &[0, 1, 2, 0, 1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    p.collect_grads(&bound, &grads)
        .iter()
        .map(|g| g.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn backward_replay_is_bit_identical() {
    for seed in 0..5 {
        assert_eq!(replay_grads(seed), replay_grads(seed));
    }
}

#[test]
fn optimizers_are_deterministic() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let run = || {
            let mut p = ParamSet::new();
            p.add("w", random_tensor(2, &[3, 3]));
            let mut opt = Optimizer::new(kind, 0.05);
            for step in 0..10 {
                let g = vec![random_tensor(100 + step, &[3, 3])];
                opt.step(&mut p, &g).unwrap();
            }
            p.values()[0].clone()
        };
        assert_eq!(run(), run());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_distribution(
        logits in prop::collection::vec(-1e3f64..1e3, 1..40),
        temperature in 0.01f64..10.0,
    ) {
        let s = nn::softmax(&Tensor::vector(logits), temperature).unwrap();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn inference_dropout_is_exact_identity(
        values in prop::collection::vec(-1e6f64..1e6, 1..50),
        rate in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(values.clone()));
        let key = nn::DropoutKey { seed, party: 1, layer: 2, step: 3 };
        let y = nn::dropout(&mut tape, x, rate, key, false).unwrap();
        prop_assert_eq!(tape.value(y).data(), &values[..]);
    }

    #[test]
    fn matmul_matches_triple_loop(n in 1usize..6, p in 1usize..6, q in 1usize..6, seed in 0u64..1000) {
        let a = random_tensor(seed, &[n, p]);
        let b = random_tensor(seed + 1, &[p, q]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..n {
            for j in 0..q {
                let expect: f64 = (0..p).map(|k| a.at(i, k) * b.at(k, j)).sum();
                prop_assert!((tape.value(c).at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ops_on_finite_inputs_stay_finite(values in prop::collection::vec(-50f64..50.0, 6)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], values).unwrap());
        let e = tape.elu(x);
        let s = tape.scale(e, 30.0);
        let flat = tape.reshape(s, vec![6]).unwrap();
        let sm = tape.softmax(flat, 1.0).unwrap();
        let loss = tape.sum(sm);
        let g = tape.backward(loss).unwrap();
        prop_assert!(tape.value(sm).is_finite());
        prop_assert!(g.get_or_zeros(x).is_finite());
    }
}
