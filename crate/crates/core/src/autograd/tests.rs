use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::gradcheck::{check_gradients, GradCheckConfig};
use crate::rng::stream;

macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
    }};
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn assert_grad_ok(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let report = check_gradients(inputs, GradCheckConfig::default(), f).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at input {} coord {} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst_input,
        report.worst_coord,
        report.analytic,
        report.numeric
    );
}

// A fixed random projection turns any tensor into a scalar with
// non-degenerate upstream gradients.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(v), seed ^ 0xFEED);
    let w = tape.leaf(w, false);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

#[test]
fn standard_same_conv_preserves_spatial_shape() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 64, 321]), false);
    let k = tape.leaf(Tensor::zeros(&[8, 1, 1, 64]), false);
    let y = tape.conv2d(x, k, ConvMode::Standard, Padding::Same).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 64, 321]);
}

#[test]
fn unit_kernel_is_identity() {
    let mut tape = Tape::new();
    let data = randn(&[1, 1, 3, 5], 9);
    let x = tape.leaf(data.clone(), false);
    let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
    let y = tape.conv2d(x, k, ConvMode::Standard, Padding::Same).unwrap();
    assert_eq!(tape.value(y), &data);
}

#[test]
fn hand_convolution_valid() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let k = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
    let y = tape.conv2d(x, k, ConvMode::Standard, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn depthwise_valid_collapses_height() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 8, 64, 321]), false);
    let k = tape.leaf(Tensor::zeros(&[16, 1, 64, 1]), false);
    let y = tape
        .conv2d(x, k, ConvMode::Depthwise { multiplier: 2 }, Padding::Valid)
        .unwrap();
    assert_eq!(tape.shape(y), &[2, 16, 1, 321]);
}

#[test]
fn depthwise_rejects_wrong_output_count() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 8, 4, 4]), false);
    let k = tape.leaf(Tensor::zeros(&[15, 1, 4, 1]), false);
    let r = tape.conv2d(x, k, ConvMode::Depthwise { multiplier: 2 }, Padding::Valid);
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn standard_conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let k = tape.leaf(Tensor::zeros(&[3, 1, 1, 1]), false);
    assert!(tape.conv2d(x, k, ConvMode::Standard, Padding::Same).is_err());
}

#[test]
fn separable_conv_shape() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 16, 1, 80]), false);
    let dk = tape.leaf(Tensor::zeros(&[16, 1, 1, 16]), false);
    let pk = tape.leaf(Tensor::zeros(&[16, 16, 1, 1]), false);
    let y = tape.separable_conv2d(x, dk, pk).unwrap();
    assert_eq!(tape.shape(y), &[1, 16, 1, 80]);
}

#[test]
fn pooling_floors_remainder() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 16, 1, 321]), false);
    let y = tape.avg_pool2d(x, (1, 4), (1, 4)).unwrap();
    assert_eq!(tape.shape(y), &[1, 16, 1, 80]);
}

#[test]
fn pooling_hand_means_and_constants() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]), false);
    let y = tape.avg_pool2d(x, (1, 2), (1, 2)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 3.5]);

    let c = tape.leaf(Tensor::full(&[1, 2, 1, 9], 3.25), false);
    let y = tape.avg_pool2d(c, (1, 4), (1, 4)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 3.25));
}

#[test]
fn pooling_window_too_large() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 1, 3]), false);
    assert!(tape.avg_pool2d(x, (1, 4), (1, 4)).is_err());
}

fn ln(tape: &mut Tape, x: Tensor, gain: Tensor, bias: Tensor) -> Result<Var> {
    let x = tape.leaf(x, false);
    let g = tape.leaf(gain, false);
    let b = tape.leaf(bias, false);
    tape.layer_norm(x, g, b, 1e-5)
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let y = ln(&mut tape, Tensor::full(&[1, 3], 4.0), Tensor::full(&[3], 1.0), Tensor::zeros(&[3])).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]), false);
    let g = tape.leaf(Tensor::full(&[3], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[3]), false);
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    let v = tape.value(y).data();
    assert_close!(v[0], -1.224_744_871_391_589, 1e-12);
    assert_close!(v[1], 0.0, 1e-12);
    assert_close!(v[2], 1.224_744_871_391_589, 1e-12);

    let mut tape = Tape::new();
    let y = ln(&mut tape, randn(&[2, 5], 3), Tensor::zeros(&[5]), Tensor::full(&[5], 0.7)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn layer_norm_needs_two_elements_and_matching_affine() {
    let mut tape = Tape::new();
    assert!(ln(&mut tape, Tensor::zeros(&[2, 1]), Tensor::zeros(&[1]), Tensor::zeros(&[1])).is_err());
    assert!(ln(&mut tape, Tensor::zeros(&[2, 4]), Tensor::zeros(&[3]), Tensor::zeros(&[4])).is_err());
}

#[test]
fn layer_norm_pre_affine_moments() {
    for seed in SEEDS {
        let mut tape = Tape::new();
        let mut x = randn(&[3, 4, 2, 7], seed);
        x.data_mut().iter_mut().for_each(|v| *v = 5.0 * *v + 3.0);
        let y = ln(&mut tape, x, Tensor::full(&[4, 2, 7], 1.0), Tensor::zeros(&[4, 2, 7])).unwrap();
        for row in tape.value(y).data().chunks(56) {
            let mean = row.iter().sum::<f64>() / 56.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 56.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn batch_norm_eval_unit_stats_is_identity() {
    let mut tape = Tape::new();
    let data = randn(&[3, 2, 1, 4], 11);
    let x = tape.leaf(data.clone(), false);
    let g = tape.leaf(Tensor::full(&[2], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    let (mean, var) = ([0.0, 0.0], [1.0, 1.0]);
    let state = BatchNormState { running_mean: &mean, running_var: &var };
    let (y, stats) = tape.batch_norm(x, g, b, Some(state), 1e-5).unwrap();
    assert!(stats.is_none());
    for (a, b) in tape.value(y).data().iter().zip(data.data()) {
        assert_close!(*a, *b, 1e-5 * b.abs() + 1e-12);
    }
}

#[test]
fn batch_norm_training_normalizes_channels_and_updates_running() {
    let mut tape = Tape::new();
    let mut data = randn(&[4, 2, 1, 5], 12);
    data.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v - 2.0);
    let x = tape.leaf(data.clone(), false);
    let g = tape.leaf(Tensor::full(&[2], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    let (y, stats) = tape.batch_norm(x, g, b, None, 1e-5).unwrap();
    let stats = stats.unwrap();
    let out = tape.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|b| out[(b * 2 + c) * 5..(b * 2 + c) * 5 + 5].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-12);
        assert_close!(var, 1.0, 1e-4);

        let raw: Vec<f64> = (0..4)
            .flat_map(|b| data.data()[(b * 2 + c) * 5..(b * 2 + c) * 5 + 5].to_vec())
            .collect();
        let mu = raw.iter().sum::<f64>() / 20.0;
        assert_close!(stats.mean[c], mu, 1e-12);
    }
    let mut rm = vec![0.0, 0.0];
    let mut rv = vec![1.0, 1.0];
    stats.update_running(&mut rm, &mut rv, 0.1);
    assert_close!(rm[0], 0.9 * 0.0 + 0.1 * stats.mean[0], 1e-15);
    assert_close!(rv[1], 0.9 * 1.0 + 0.1 * stats.unbiased_var[1], 1e-15);
}

#[test]
fn batch_norm_training_needs_two_samples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 2, 1, 4]), false);
    let g = tape.leaf(Tensor::full(&[2], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    assert!(matches!(tape.batch_norm(x, g, b, None, 1e-5), Err(Error::InvalidArgument(_))));
}

#[test]
fn elu_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.0, 1.0, -1.0]), false);
    let y = tape.elu(x, 1.0).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[1], 1.0);
    assert_close!(v[2], -0.632_120_558_828_557_7, 1e-15);
}

#[test]
fn dropout_identities_and_scaling() {
    let mut rng = stream(1);
    let data = randn(&[4, 6], 5);
    let mut tape = Tape::new();
    let x = tape.leaf(data.clone(), false);
    let y0 = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    let y1 = tape.dropout(x, 0.25, false, &mut rng).unwrap();
    assert_eq!(tape.value(y0), &data);
    assert_eq!(tape.value(y1), &data);

    let x = tape.leaf(Tensor::full(&[1000], 2.0), false);
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = tape.value(y).data();
    assert!(v.iter().all(|&e| e == 0.0 || e == 4.0));
    let kept = v.iter().filter(|&&e| e == 4.0).count();
    assert!((400..600).contains(&kept), "kept {kept}");

    assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn dense_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 2], &[2.0, 3.0]), false);
    let w = tape.leaf(t(&[1, 2], &[1.0, 1.0]), false);
    let b = tape.leaf(t(&[1], &[0.0]), false);
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);

    let x = tape.leaf(t(&[1, 3], &[1.0, -2.0, 0.5]), false);
    let eye = tape.leaf(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]), false);
    let z = tape.leaf(Tensor::zeros(&[3]), false);
    let y = tape.dense(x, eye, z).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);

    let x = tape.leaf(Tensor::zeros(&[3, 160]), false);
    let w = tape.leaf(Tensor::zeros(&[2, 160]), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[3, 2]);

    let w = tape.leaf(Tensor::zeros(&[2, 159]), false);
    assert!(tape.dense(x, w, b).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let l = tape.leaf(t(&[1, 2], &[0.3, 0.3]), false);
    let y = tape.softmax_cross_entropy(l, &[1]).unwrap();
    assert_close!(tape.value(y).item().unwrap(), std::f64::consts::LN_2, 1e-15);

    let l = tape.leaf(t(&[1, 2], &[1000.0, -1000.0]), false);
    let y = tape.softmax_cross_entropy(l, &[0]).unwrap();
    let v = tape.value(y).item().unwrap();
    assert!(v.is_finite() && v.abs() < 1e-12);

    let l = tape.leaf(t(&[1, 2], &[1.0, 0.0]), false);
    let y = tape.softmax_cross_entropy(l, &[1]).unwrap();
    assert_close!(tape.value(y).item().unwrap(), 1.313_261_687_518_222_8, 1e-12);

    assert!(tape.softmax_cross_entropy(l, &[2]).is_err());
}

#[test]
fn backward_square_and_unused() {
    let mut tape = Tape::new();
    let theta = tape.leaf(Tensor::scalar(3.0), true);
    let unused = tape.leaf(Tensor::scalar(1.0), true);
    let loss = tape.square(theta).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(theta).unwrap().data(), &[6.0]);
    assert!(grads.get(unused).is_none_or(|g| g.data() == [0.0]));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = stream(77);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[2, 1, 3, 9], 1), false);
        let k = tape.leaf(randn(&[4, 1, 1, 3], 2), true);
        let y = tape.conv2d(x, k, ConvMode::Standard, Padding::Same).unwrap();
        let y = tape.dropout(y, 0.25, true, &mut rng).unwrap();
        let y = tape.elu(y, 1.0).unwrap();
        let s = project(&mut tape, y, 3).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(s).clone(), g.get(k).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradcheck_standard_conv_same_and_valid() {
    for seed in SEEDS {
        let inputs = [randn(&[2, 2, 3, 7], seed), randn(&[3, 2, 2, 4], seed + 100)];
        for padding in [Padding::Same, Padding::Valid] {
            assert_grad_ok(&inputs, |tape, v| {
                let y = tape.conv2d(v[0], v[1], ConvMode::Standard, padding)?;
                project(tape, y, seed)
            });
        }
    }
}

#[test]
fn gradcheck_depthwise_and_separable() {
    for seed in SEEDS {
        let inputs = [randn(&[2, 3, 4, 6], seed), randn(&[6, 1, 4, 1], seed + 1)];
        assert_grad_ok(&inputs, |tape, v| {
            let y = tape.conv2d(v[0], v[1], ConvMode::Depthwise { multiplier: 2 }, Padding::Valid)?;
            project(tape, y, seed)
        });
        let inputs = [
            randn(&[2, 3, 1, 9], seed),
            randn(&[3, 1, 1, 4], seed + 1),
            randn(&[5, 3, 1, 1], seed + 2),
        ];
        assert_grad_ok(&inputs, |tape, v| {
            let y = tape.separable_conv2d(v[0], v[1], v[2])?;
            project(tape, y, seed)
        });
    }
}

#[test]
fn gradcheck_pool_elu_dropout_reshape() {
    for seed in SEEDS {
        let inputs = [randn(&[2, 3, 2, 11], seed)];
        assert_grad_ok(&inputs, |tape, v| {
            let mut rng = stream(seed);
            let y = tape.avg_pool2d(v[0], (1, 4), (1, 4))?;
            let y = tape.elu(y, 1.0)?;
            let y = tape.dropout(y, 0.25, true, &mut rng)?;
            let y = tape.flatten(y)?;
            project(tape, y, seed)
        });
    }
}

#[test]
fn gradcheck_layer_norm() {
    for seed in SEEDS {
        let inputs = [randn(&[3, 2, 1, 5], seed), randn(&[2, 1, 5], seed + 1), randn(&[2, 1, 5], seed + 2)];
        assert_grad_ok(&inputs, |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(tape, y, seed)
        });
    }
}

#[test]
fn gradcheck_batch_norm_both_modes() {
    for seed in SEEDS {
        let inputs = [randn(&[4, 3, 1, 5], seed), randn(&[3], seed + 1), randn(&[3], seed + 2)];
        assert_grad_ok(&inputs, |tape, v| {
            let (y, _) = tape.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            project(tape, y, seed)
        });
        let (rm, rv) = ([0.3, -0.2, 0.1], [1.5, 0.7, 2.0]);
        assert_grad_ok(&inputs, |tape, v| {
            let state = BatchNormState { running_mean: &rm, running_var: &rv };
            let (y, _) = tape.batch_norm(v[0], v[1], v[2], Some(state), 1e-5)?;
            project(tape, y, seed)
        });
    }
}

#[test]
fn gradcheck_dense_cross_entropy() {
    for seed in SEEDS {
        let inputs = [randn(&[4, 6], seed), randn(&[3, 6], seed + 1), randn(&[3], seed + 2)];
        assert_grad_ok(&inputs, |tape, v| {
            let y = tape.dense(v[0], v[1], v[2])?;
            tape.softmax_cross_entropy(y, &[0, 2, 1, 2])
        });
    }
}

#[test]
fn gradcheck_elementwise() {
    for seed in SEEDS {
        let inputs = [randn(&[5], seed), randn(&[5], seed + 1)];
        assert_grad_ok(&inputs, |tape, v| {
            let a = tape.add(v[0], v[1])?;
            let s = tape.sub(a, v[1])?;
            let m = tape.mul(s, v[1])?;
            let q = tape.square(m)?;
            let q = tape.scale(q, 0.5)?;
            tape.sum(q)
        });
    }
}

#[test]
fn repeated_backward_accumulates_in_params() {
    use crate::tensor::ParamSet;
    let mut params = ParamSet::new();
    params.insert("theta", Tensor::scalar(3.0)).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let th = tape.leaf(params.get("theta").unwrap().clone(), true);
        let loss = tape.square(th).unwrap();
        let g = tape.backward(loss).unwrap();
        params.accumulate_grad(0, g.get(th).unwrap()).unwrap();
    }
    assert_eq!(params.grad("theta").unwrap().data(), &[12.0]);
}
