//! Per-op gradients against central differences, and the retention ledger
//! of each op checked by releasing forward values before backward.

use dtl_core::autodiff::{grad_check, Graph, Var};
use dtl_core::param::{uniform, Param, ParamLookup, ParamRole, ParamStore};
use dtl_core::{Error, Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: &'static [&'static [usize]],
    build: Build,
}

const CASES: &[Case] = &[
    Case { name: "matmul", inputs: &[&[2, 3, 4], &[4, 5]], build: |g, v| g.matmul(v[0], v[1]) },
    Case { name: "matmul_batched", inputs: &[&[2, 3, 4], &[2, 4, 5]], build: |g, v| g.matmul(v[0], v[1]) },
    Case { name: "add_bias", inputs: &[&[2, 3, 4], &[4]], build: |g, v| g.add(v[0], v[1]) },
    Case { name: "add_same", inputs: &[&[2, 3], &[2, 3]], build: |g, v| g.add(v[0], v[1]) },
    Case { name: "mul_suffix", inputs: &[&[2, 3, 4], &[3, 4]], build: |g, v| g.mul(v[0], v[1]) },
    Case { name: "scale", inputs: &[&[3, 4]], build: |g, v| g.scale(v[0], -0.7) },
    Case { name: "reshape", inputs: &[&[2, 3, 4]], build: |g, v| g.reshape(v[0], &[6, 4]) },
    Case { name: "transpose_inner", inputs: &[&[2, 3, 4]], build: |g, v| g.transpose(v[0], 1, 2) },
    Case { name: "transpose_outer", inputs: &[&[2, 3, 4]], build: |g, v| g.transpose(v[0], 0, 2) },
    Case { name: "concat_tokens", inputs: &[&[2, 1, 4], &[2, 3, 4]], build: |g, v| g.concat_tokens(&[v[0], v[1]]) },
    Case { name: "slice_tokens", inputs: &[&[2, 5, 3]], build: |g, v| g.slice_tokens(v[0], 1, 3) },
    Case { name: "broadcast", inputs: &[&[3, 4]], build: |g, v| g.broadcast(v[0], 2) },
    Case { name: "softmax", inputs: &[&[2, 3, 5]], build: |g, v| g.softmax(v[0]) },
    Case { name: "layer_norm", inputs: &[&[2, 3, 6], &[6], &[6]], build: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6) },
    Case { name: "gelu", inputs: &[&[3, 5]], build: |g, v| g.gelu(v[0]) },
    Case { name: "swish_1", inputs: &[&[3, 5]], build: |g, v| g.swish(v[0], 1.0) },
    // Scaled so the inputs sit inside the sharp gate, not on its flat tail.
    Case {
        name: "swish_100",
        inputs: &[&[3, 5]],
        build: |g, v| {
            let x = g.scale(v[0], 0.03)?;
            g.swish(x, 100.0)
        },
    },
    Case {
        name: "depthwise_conv3",
        inputs: &[&[2, 3, 5, 5], &[3, 3, 3], &[3]],
        build: |g, v| g.depthwise_conv2d(v[0], v[1], v[2]),
    },
    Case {
        name: "depthwise_conv5",
        inputs: &[&[1, 2, 4, 4], &[2, 5, 5], &[2]],
        build: |g, v| g.depthwise_conv2d(v[0], v[1], v[2]),
    },
    Case { name: "cross_entropy", inputs: &[&[4, 5]], build: |g, v| g.cross_entropy(v[0], &[0, 3, 4, 3]) },
    Case { name: "sum", inputs: &[&[3, 4]], build: |g, v| g.sum(v[0]) },
    Case { name: "low_rank", inputs: &[&[2, 3, 6], &[6, 2], &[2, 5]], build: |g, v| g.low_rank(v[0], v[1], v[2]) },
];

fn input_name(k: usize) -> String {
    format!("in{k}")
}

/// Inputs drawn from U(±1); `trainable[k]` marks which ones get gradients.
fn case_params(case: &Case, trainable: &[bool], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (k, shape) in case.inputs.iter().enumerate() {
        let mut param = Param::new(input_name(k), uniform(&mut rng, shape, 1.0), ParamRole::Weight);
        param.trainable = trainable[k];
        p.insert(param);
    }
    p
}

/// `Σ y ⊙ W` for a fixed random `W`, so every output element carries a
/// distinct weight; scalar outputs are used as the loss directly.
fn loss_of(case: &Case, g: &mut Graph<f64>, p: &dyn ParamLookup<f64>) -> Result<Var> {
    let vars = (0..case.inputs.len()).map(|k| g.param(p, &input_name(k))).collect::<Result<Vec<_>>>()?;
    let y = (case.build)(g, &vars)?;
    if g.shape(y).is_empty() {
        return Ok(y);
    }
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(99), &shape, 1.0));
    let yw = g.mul(y, w)?;
    g.sum(yw)
}

fn record(case: &Case, p: &ParamStore<f64>) -> (Graph<f64>, Var) {
    let mut g = Graph::train();
    let loss = loss_of(case, &mut g, p).unwrap();
    (g, loss)
}

fn subsets(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (1..1u32 << n).map(move |mask| (0..n).map(|k| mask & (1 << k) != 0).collect())
}

#[test]
fn every_op_matches_central_differences() {
    for case in CASES {
        let p = case_params(case, &vec![true; case.inputs.len()], 7);
        let r = grad_check(|g, p| loss_of(case, g, p), &p, 1e-6).unwrap();
        assert!(r.max_relative_error <= 1e-6, "{}: {} at {}[{}]", case.name, r.max_relative_error, r.worst_param, r.worst_index);
    }
}

#[test]
fn released_graph_gives_identical_gradients() {
    for case in CASES {
        for trainable in subsets(case.inputs.len()) {
            let p = case_params(case, &trainable, 11);
            let (g, loss) = record(case, &p);
            let full = g.backward(loss).unwrap();
            let (mut lean, loss) = record(case, &p);
            lean.release_unsaved();
            let released = lean.backward(loss).unwrap();
            for (name, grad) in full.iter() {
                assert!(grad.bit_eq(released.get(name).unwrap()), "{} {trainable:?}: {name}", case.name);
            }
            assert_eq!(full.len(), released.len());
        }
    }
}

#[test]
fn every_retained_tensor_is_read_by_backward() {
    for case in CASES {
        for trainable in subsets(case.inputs.len()) {
            let p = case_params(case, &trainable, 13);
            let (g, _) = record(case, &p);
            let mut ids: Vec<usize> = g.retained_ids().into_iter().collect();
            ids.sort_unstable();
            for id in ids {
                let (mut g, loss) = record(case, &p);
                g.release(id);
                let err = g.backward(loss).unwrap_err();
                assert!(matches!(err, Error::NotRetained { node, .. } if node == id), "{} {trainable:?}: {err}", case.name);
            }
        }
    }
}

#[test]
fn frozen_inputs_get_no_gradient_and_nothing_is_saved_without_one() {
    let case = &CASES[0];
    let p = case_params(case, &[false, true], 3);
    let (g, loss) = record(case, &p);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get("in0").is_none());
    assert!(grads.get("in1").is_some());

    let p = case_params(case, &[false, false], 3);
    let (g, loss) = record(case, &p);
    assert!(g.retained_ids().is_empty());
    assert_eq!(g.backward(loss).unwrap_err(), Error::DetachedLoss);
}

#[test]
fn inference_graphs_retain_nothing() {
    for case in CASES {
        let p = case_params(case, &vec![true; case.inputs.len()], 5);
        let mut g = Graph::inference();
        loss_of(case, &mut g, &p).unwrap();
        assert!(g.retained_ids().is_empty(), "{}", case.name);
        assert!(g.nodes().iter().all(|n| !n.requires_grad));
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::train();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[2, 2, 2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    assert_eq!(g.depthwise_conv2d(x, k, bias).unwrap_err(), Error::EvenKernel { size: 2 });
    let logits = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.cross_entropy(logits, &[0, 3]).is_err());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let case = &CASES[0];
    let p = case_params(case, &[true, true], 1);
    let mut g = Graph::train();
    let a = g.param(&p, "in0").unwrap();
    let b = g.param(&p, "in1").unwrap();
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.backward(y).unwrap_err(), Error::NonScalarLoss { shape: vec![2, 3, 5] });
}

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, values).unwrap()
}

fn values(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0..3.0f64, n).prop_map(move |v| tensor(shape, &v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in values(&[3, 7])) {
        let mut g = Graph::inference();
        let v = g.constant(x);
        let s = g.softmax(v).unwrap();
        for row in g.value(s).data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_rank_equals_two_matmuls(x in values(&[2, 3, 6]), a in values(&[6, 2]), c in values(&[2, 4])) {
        let mut g = Graph::inference();
        let (x, a, c) = (g.constant(x), g.constant(a), g.constant(c));
        let fused = g.low_rank(x, a, c).unwrap();
        let xa = g.matmul(x, a).unwrap();
        let two = g.matmul(xa, c).unwrap();
        for (u, v) in g.value(fused).data().iter().zip(g.value(two).data()) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn transpose_is_an_involution(x in values(&[2, 3, 4])) {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let t = g.transpose(v, 0, 2).unwrap();
        let back = g.transpose(t, 0, 2).unwrap();
        prop_assert!(g.value(back).bit_eq(&x));
    }

    #[test]
    fn unit_layer_norm_standardises_rows(x in values(&[4, 8])) {
        let spread = x.data().chunks(8).map(|r| {
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0
        }).fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let mut g = Graph::inference();
        let v = g.constant(x);
        let gamma = g.constant(Tensor::full(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(v, gamma, beta, 1e-9).unwrap();
        for row in g.value(y).data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn centre_tap_convolution_is_identity(x in values(&[2, 3, 4, 4])) {
        let mut kernel = vec![0.0; 27];
        for ch in 0..3 {
            kernel[ch * 9 + 4] = 1.0;
        }
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let k = g.constant(tensor(&[3, 3, 3], &kernel));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.depthwise_conv2d(v, k, b).unwrap();
        prop_assert!(g.value(y).bit_eq(&x));
    }

    #[test]
    fn swish_lies_between_its_bounds(x in values(&[5, 5]), beta in 0.5..200.0f64) {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = g.swish(v, beta).unwrap();
        // The minimum of x·σ(βx) is about -0.2785/β.
        for (&xi, &yi) in x.data().iter().zip(g.value(y).data()) {
            prop_assert!(yi <= xi.max(0.0) + 1e-12);
            prop_assert!(yi >= -0.2785 / beta - 1e-12);
        }
    }

    #[test]
    fn gradient_of_weighted_sum_is_the_weight(w in values(&[3, 4])) {
        let mut p = ParamStore::new();
        let mut x = Param::new("x", Tensor::zeros(&[3, 4]), ParamRole::Weight);
        x.trainable = true;
        p.insert(x);
        let mut g = Graph::train();
        let xv = g.param(&p, "x").unwrap();
        let wv = g.constant(w.clone());
        let y = g.mul(xv, wv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get("x").unwrap().bit_eq(&w));
    }
}
