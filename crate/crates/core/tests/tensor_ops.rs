use bt_adapter::tensor::{grad_check, matmul_into, Result, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Gradient check of `f` contracted against a fixed random weighting, so
/// that ops whose plain sum is constant (softmax, normalisation) still get
/// a non-trivial upstream gradient.
fn check<F>(shapes: &[&[usize]], f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random(s, 100 + i as u64))
        .collect();
    let eval = |xs: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.var(x.clone().with_requires_grad(true)))
            .collect();
        let out = f(&tape, &vars)?;
        let w = tape.constant(random(&tape.shape(out), 7));
        let loss = tape.sum(tape.mul(out, w)?);
        let value = tape.value(loss).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let analytic = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, analytic))
    };
    let (_, analytic) = eval(&inputs, true).unwrap();
    grad_check(|xs| eval(xs, false).map(|r| r.0), &inputs, &analytic, 1e-6).unwrap()
}

const TOL: f64 = 1e-7;

#[test]
fn elementwise_gradients() {
    assert!(check(&[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])) < TOL);
    assert!(check(&[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])) < TOL);
    assert!(check(&[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])) < TOL);
    assert!(check(&[&[5]], |t, v| Ok(t.scale(v[0], -2.5))) < TOL);
    assert!(check(&[&[2, 3], &[1]], |t, v| t.scale_by(v[0], v[1])) < TOL);
    assert!(check(&[&[4, 3]], |t, v| Ok(t.gelu(v[0]))) < TOL);
    assert!(check(&[&[4, 3]], |t, v| Ok(t.sigmoid(v[0]))) < TOL);
}

#[test]
fn matmul_and_layout_gradients() {
    assert!(check(&[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(check(&[&[2, 3, 4], &[2, 4, 5]], |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(check(&[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(check(&[&[3, 4], &[2, 4, 5]], |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(check(&[&[2, 3, 4]], |t, v| t.transpose(v[0])) < TOL);
    assert!(check(&[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])) < TOL);
    assert!(check(&[&[2, 3, 4]], |t, v| t.reshape(v[0], &[6, 4])) < TOL);
    assert!(check(&[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)) < TOL);
    assert!(check(&[&[3, 5]], |t, v| t.slice(v[0], 1, 1..4)) < TOL);
    assert!(check(&[&[3, 5]], |t, v| t.gather(v[0], 1, &[4, 0, 0, 2])) < TOL);
}

#[test]
fn reduction_and_normalisation_gradients() {
    assert!(check(&[&[2, 3, 4]], |t, v| t.softmax(v[0], 1)) < TOL);
    assert!(check(&[&[2, 4, 4]], |t, v| t.softmax_causal(v[0])) < TOL);
    assert!(check(&[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)) < TOL);
    assert!(check(&[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 1)) < TOL);
    assert!(check(&[&[2, 3]], |t, v| Ok(t.sum(v[0]))) < TOL);
    assert!(check(&[&[2, 3]], |t, v| Ok(t.mean(v[0]))) < TOL);
    assert!(check(&[&[3, 4]], |t, v| t.l2_normalize(v[0])) < TOL);
    assert!(check(&[&[3, 4], &[3, 4]], |t, v| t.mse(v[0], v[1])) < TOL);
    assert!(check(&[&[3, 4]], |t, v| t.cross_entropy(v[0], &[0, 3, 1])) < TOL);
}

#[test]
fn matmul_is_bit_identical_to_triple_loop() {
    for (m, k, n) in [(1, 1, 1), (3, 7, 5), (17, 9, 33), (64, 64, 64)] {
        let a = random(&[m, k], 1);
        let b = random(&[k, n], 2);
        let mut c = vec![0.0; m * n];
        matmul_into(m, k, n, a.data(), b.data(), &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                assert_eq!(acc.to_bits(), c[i * n + j].to_bits(), "({m},{k},{n}) at {i},{j}");
            }
        }
    }
}

#[test]
fn worked_values() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 1.0, -1.0]));
    let g = tape.gelu(x);
    let got = tape.value(g);
    // x·Φ(x) with Φ(1) = 0.841344746068543.
    assert_eq!(got.data()[0], 0.0);
    assert!((got.data()[1] - 0.841344746068543).abs() < 1e-15);
    assert!((got.data()[2] + 0.158655253931457).abs() < 1e-15);

    let s = tape.softmax(tape.constant(Tensor::vector(vec![1000.0, 1000.0])), 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let n = tape.l2_normalize(tape.constant(Tensor::vector(vec![3.0, 4.0]))).unwrap();
    assert_eq!(tape.value(n).data(), &[0.6, 0.8]);

    let ce = tape
        .cross_entropy(tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()), &[1])
        .unwrap();
    assert!((tape.value(ce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn causal_softmax_masks_future_keys() {
    let tape = Tape::new();
    let s = tape.softmax_causal(tape.constant(Tensor::zeros(&[3, 3]))).unwrap();
    let v = tape.value(s);
    assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
    assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    for p in v.row(2) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn tape_is_single_use_and_rejects_bad_input() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0).with_requires_grad(true));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    assert_eq!(tape.backward(y).unwrap_err(), TensorError::TapeConsumed);

    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.l2_normalize(z), Err(TensorError::ZeroNorm { row: 0 })));
    let w = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.matmul(z, w), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(tape.backward(z), Err(TensorError::NotScalar { .. })));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let a = tape.var(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let loss = tape.sum(tape.mul(a, c).unwrap());
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    assert!(g.get(c).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.1f64..200.0,
    ) {
        let x = random(&[rows, cols], seed);
        let data: Vec<f64> = x.data().iter().map(|v| v * scale).collect();
        let tape = Tape::new();
        let s = tape.softmax(tape.constant(Tensor::new(vec![rows, cols], data).unwrap()), 1).unwrap();
        let v = tape.value(s);
        for r in 0..rows {
            let sum: f64 = v.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(v.row(r).iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn l2_rows_are_unit(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let tape = Tape::new();
        let n = tape.l2_normalize(tape.constant(random(&[rows, cols], seed))).unwrap();
        let v = tape.value(n);
        for r in 0..rows {
            let norm: f64 = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_is_standardised(rows in 1usize..4, cols in 2usize..12, seed in any::<u64>()) {
        let tape = Tape::new();
        let input = random(&[rows, cols], seed);
        let x = tape.constant(input.clone());
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let eps = 1e-5;
        let y = tape.value(tape.layer_norm(x, g, b, eps).unwrap());
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / cols as f64;
            (mean, row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64)
        };
        for r in 0..rows {
            let (_, s2) = moments(input.row(r));
            let (mean, var) = moments(y.row(r));
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - s2 / (s2 + eps)).abs() < 1e-10);
        }
    }
}
