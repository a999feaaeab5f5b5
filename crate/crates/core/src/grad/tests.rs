use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_slice(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn relu_forward_backward() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.activation(x, Activation::Relu);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    // Upstream ones: sum = 3 * mean.
    let m = tape.mean(y);
    let g = tape.backward(m).unwrap();
    let gx: Vec<f64> = g.get(x).unwrap().data().iter().map(|v| v * 3.0).collect();
    assert_eq!(gx, vec![0.0, 0.0, 1.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn leaky_relu_slope() {
    assert_eq!(Activation::LeakyRelu.apply(-1.0), -0.01);
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(w, w).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(w).unwrap().item(), Some(6.0));
}

#[test]
fn softmax_pick_first_gradient() {
    let mut tape = Tape::new();
    let w = tape.param(t(&[2], &[0.0, 0.0]));
    let s = tape.softmax(w, 0).unwrap();
    let first = tape.slice(s, 0, 0..1).unwrap();
    let y = tape.mean(first);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.25, -0.25]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::zeros(&[2]));
    assert_eq!(
        tape.backward(w).unwrap_err(),
        GradError::NonScalarLoss { shape: vec![2] }
    );
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[2, 3]));
    assert_eq!(
        tape.matmul(a, b).unwrap_err(),
        GradError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
}

/// Builds `mean(w ⊙ op(params))` on a fresh tape and returns its value, the
/// parameter gradients and the kink margin.
fn probe<F>(op: &F, params: &[Tensor], weights: &Tensor) -> (f64, Vec<Tensor>, f64)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = op(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(weights.clone().reshaped(shape));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.mean(prod);
    let value = tape.value(loss).item().unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.get_or_zeros(v, p.shape()))
        .collect();
    (value, grads, tape.kink_margin())
}

/// Checks `op` at 100 random points, resampling points that fall within
/// `1e-3` of a kink.
fn gradcheck<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 100 {
        attempts += 1;
        assert!(attempts < 10_000, "{name}: could not sample away from kinks");
        let params: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = op(&mut tape, &vars);
        let out_shape = tape.shape(out).to_vec();
        let weights = random(&out_shape, &mut rng);
        let (_, analytic, margin) = probe(&op, &params, &weights);
        if margin < 1e-3 {
            continue;
        }
        let err = finite_diff_check(|p| probe(&op, p, &weights).0, &params, &analytic, 1e-5);
        assert!(err < 1e-6, "{name}: relative error {err}");
        checked += 1;
    }
}

#[test]
fn gradcheck_matmul_add_mul() {
    gradcheck("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
    gradcheck("add_broadcast", &[&[2, 3, 4], &[4]], |t, v| t.add(v[0], v[1]).unwrap());
    gradcheck("add_same", &[&[3, 2], &[3, 2]], |t, v| t.add(v[0], v[1]).unwrap());
    gradcheck("mul", &[&[3, 2], &[3, 2]], |t, v| t.mul(v[0], v[1]).unwrap());
}

#[test]
fn gradcheck_activations() {
    for act in [
        Activation::Relu,
        Activation::Elu,
        Activation::Selu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        gradcheck(&format!("{act:?}"), &[&[4, 3]], move |t, v| t.activation(v[0], act));
    }
}

#[test]
fn gradcheck_structural_ops() {
    gradcheck("softmax_axis1", &[&[2, 4, 3]], |t, v| t.softmax(v[0], 1).unwrap());
    gradcheck("softmax_axis2", &[&[2, 4, 3]], |t, v| t.softmax(v[0], 2).unwrap());
    gradcheck("concat", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    gradcheck("concat0", &[&[1, 3], &[2, 3]], |t, v| t.concat(&[v[0], v[1]], 0).unwrap());
    gradcheck("slice", &[&[3, 5]], |t, v| t.slice(v[0], 1, 1..4).unwrap());
    gradcheck("reshape", &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6]).unwrap());
    gradcheck("mean", &[&[3, 4]], |t, v| t.mean(v[0]));
}

#[test]
fn gradcheck_batch_norm_and_dropout() {
    gradcheck("bn_train", &[&[6, 3], &[3], &[3]], |t, v| {
        t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
    });
    gradcheck("bn_eval", &[&[6, 3], &[3], &[3]], |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0], 1e-5)
            .unwrap()
    });
    gradcheck("dropout", &[&[5, 4]], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        t.dropout(v[0], 0.3, &mut rng)
    });
}

#[test]
fn chained_matmul_relu_graph() {
    gradcheck("chain", &[&[5, 4], &[4, 6], &[6], &[6, 2]], |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add(h, v[2]).unwrap();
        let h = t.activation(h, Activation::Relu);
        t.matmul(h, v[3]).unwrap()
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[7, 9], &mut rng));
    let y = tape.softmax(x, 1).unwrap();
    for row in tape.value(y).data().chunks(9) {
        assert!(row.iter().all(|v| *v > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[100_000], 2.0));
    let y = tape.dropout(x, 0.2, &mut rng);
    let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
    assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
}

#[test]
fn batch_norm_train_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let raw: Vec<f64> = (0..64 * 4).map(|_| rng.random_range(-40.0..40.0)).collect();
    let x = tape.constant(t(&[64, 4], &raw));
    let g = tape.constant(Tensor::filled(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let (y, _, var) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    let d = tape.value(y).data();
    for j in 0..4 {
        let col: Vec<f64> = (0..64).map(|r| d[r * 4 + j]).collect();
        let m = col.iter().sum::<f64>() / 64.0;
        let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-12);
        // Exactly var / (var + eps); within 1e-6 of 1 once var >= 10.
        assert!((v - var[j] / (var[j] + 1e-5)).abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn eval_dropout_and_batch_norm_use_fixed_behaviour() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
    let g = tape.constant(Tensor::filled(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape
        .batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0 - 1e-5, 1.0 - 1e-5], 1e-5)
        .unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn finite_diff_check_examples() {
    // Quadratic form x^T A x with A symmetric: gradient 2 A x.
    let a = [[2.0, 0.5], [0.5, 1.0]];
    let f = |p: &[Tensor]| {
        let x = p[0].data();
        (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| x[i] * a[i][j] * x[j])
            .sum::<f64>()
    };
    let x = t(&[2], &[0.7, -1.3]);
    let grad = t(
        &[2],
        &[2.0 * (a[0][0] * 0.7 + a[0][1] * -1.3), 2.0 * (a[1][0] * 0.7 + a[1][1] * -1.3)],
    );
    assert!(finite_diff_check(f, std::slice::from_ref(&x), std::slice::from_ref(&grad), 1e-5) < 1e-9);
    let doubled = t(&[2], &[grad.data()[0] * 2.0, grad.data()[1] * 2.0]);
    let err = finite_diff_check(f, &[x], &[doubled], 1e-5);
    assert!((err - 1.0 / 3.0).abs() < 1e-6, "err {err}");
}

#[test]
fn adam_first_step() {
    let mut p = vec![Tensor::scalar(1.0)];
    let mut st = AdamState::new(AdamConfig::default(), &p);
    st.step(&mut p, &[Tensor::scalar(0.5)]).unwrap();
    let delta = p[0].item().unwrap() - 1.0;
    let closed_form = -1e-3 * 0.5 / (0.5 + 1e-8);
    assert!((delta - closed_form).abs() < 1e-15);
    assert!((delta - -9.99998e-4).abs() < 1e-8);
    assert_eq!(st.step_count, 1);
}

#[test]
fn adam_zero_gradient_and_determinism() {
    let mut p = vec![t(&[3], &[1.0, -2.0, 0.5])];
    let start = p.clone();
    let mut st = AdamState::new(AdamConfig::default(), &p);
    st.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
    assert_eq!(p, start);

    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = vec![t(&[3], &[1.0, -2.0, 0.5])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..20 {
            let g = random(&[3], &mut rng);
            st.step(&mut p, &[g]).unwrap();
        }
        p[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
    assert!(st.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
}
