use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Direct quadruple-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Vec<f32> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = h + 2 * pad + 1 - k;
    let ow = wd + 2 * pad + 1 - k;
    let mut out = vec![0.0f32; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.data()[o] as f64;
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad as isize;
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[i * h * wd + sy as usize * wd + sx as usize];
                            let wv = w.data()[((o * ci + i) * k + ky) * k + kx];
                            s += xv as f64 * wv as f64;
                        }
                    }
                }
                out[o * oh * ow + y * ow + xx] = s as f32;
            }
        }
    }
    out
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 3]);
    assert_eq!(g.value(y).data()[4], 9.0);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = rand_tensor(&mut rng, &[2, 5, 4]);
    let mut kernel = Tensor::zeros(&[2, 2, 3, 3]);
    kernel.data_mut()[4] = 1.0; // out 0 <- in 0 center
    kernel.data_mut()[27 + 4] = 1.0; // out 1 <- in 1 center
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(kernel);
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.conv2d(x, w, b, 1).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn conv_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = rand_tensor(&mut rng, &[2, 4, 4]);
    let wt = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let bt = rand_tensor(&mut rng, &[3]);
    let want = naive_conv(&xt, &wt, &bt, 1);
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(xt), g.constant(wt), g.constant(bt));
    let y = g.conv2d(x, w, b, 1).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, w, b, 1), Err(crate::Error::Shape(_))));
}

#[test]
fn group_norm_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4, 2, 2], 3.5));
    let y = g.group_norm(x, 2, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_two_point_closed_form() {
    let eps = 1e-5f32;
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap());
    let y = g.group_norm(x, 1, eps).unwrap();
    let v = 1.0 / (1.0 + eps as f64).sqrt();
    let want = [v, -v, -v, v];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn group_norm_zero_mean_per_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[4, 2, 2]));
    let y = g.group_norm(x, 2, 1e-5).unwrap();
    for group in g.value(y).data().chunks(8) {
        let mean: f32 = group.iter().sum::<f32>() / 8.0;
        let var: f32 = group.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(g.group_norm(x, 2, 1e-5).is_err());
}

#[test]
fn linear_identity_and_bias_only() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let w = g.constant(eye);
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5]);

    let w0 = g.constant(Tensor::zeros(&[2, 3]));
    let bias = g.constant(Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
    let y = g.linear(x, w0, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -4.0]);
}

#[test]
fn linear_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (xt, wt, bt) = (rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2]));
    let want: Vec<f32> = (0..2)
        .map(|o| bt.data()[o] + (0..3).map(|i| wt.data()[o * 3 + i] * xt.data()[i]).sum::<f32>())
        .collect();
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(xt), g.constant(wt), g.constant(bt));
    let y = g.linear(x, w, b).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn linear_rejects_width_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4]));
    let w = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(g.linear(x, w, b).is_err());
}

#[test]
fn activation_fixed_points_and_saturation() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0, 20.0, -20.0]).unwrap());
    let s = g.sigmoid(x);
    let si = g.silu(x);
    let sv = g.value(s).data();
    assert_eq!(sv[0], 0.5);
    assert!((sv[1] - 1.0).abs() < 1e-6);
    assert!(sv[2].abs() < 1e-6);
    assert_eq!(g.value(si).data()[0], 0.0);
}

#[test]
fn mse_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[2, 3, 3]);
    let mut g = Graph::new();
    let p = g.constant(a.clone());
    let same = g.mse_loss(p, p).unwrap();
    assert_eq!(g.value(same).item(), 0.0);

    let shifted = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v - 1.0).collect()).unwrap();
    let t = g.constant(shifted);
    let one = g.mse_loss(p, t).unwrap();
    assert!((g.value(one).item() - 1.0).abs() < 1e-6);

    let bt = rand_tensor(&mut rng, &[2, 3, 3]);
    let want: f32 = a.data().iter().zip(bt.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / 18.0;
    let t2 = g.constant(bt);
    let l = g.mse_loss(p, t2).unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-6);

    let wrong = g.constant(Tensor::zeros(&[18]));
    assert!(g.mse_loss(p, wrong).is_err());
}

#[test]
fn square_gradient_is_six_at_three() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let zero = g.scale(x, 0.0);
    let c = g.constant(Tensor::scalar(2.0));
    let y = g.add(zero, c).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(crate::Error::Shape(_))));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::scalar(1.5), true);
    let b = g.leaf(Tensor::scalar(2.0), false);
    let y = g.mul(a, b).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(b).is_none());
    assert_eq!(grads.materialized(), 1);
}

/// Central-difference check of every gradient slot of a graph builder.
fn check_gradients(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = build(&mut g, &vars);
        g.value(l).item() as f64
    };
    let h = 1e-2f32;
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient for every slot");
        for i in 0..inputs[slot].numel() {
            let mut plus = inputs.clone();
            plus[slot].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[slot].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            assert!(rel < 1e-2, "slot {slot} index {i}: analytic {a} numeric {numeric}");
        }
    }
}

fn target_loss(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rand_tensor(&mut rng, g.value(out).shape());
    let t = g.constant(t);
    g.mse_loss(out, t).unwrap()
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![rand_tensor(&mut rng, &[2, 4, 4]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])];
    check_gradients(inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1).unwrap();
        target_loss(g, y, 99)
    });
}

#[test]
fn gradcheck_group_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    check_gradients(vec![rand_tensor(&mut rng, &[4, 3, 3])], |g, v| {
        let y = g.group_norm(v[0], 2, 1e-5).unwrap();
        target_loss(g, y, 98)
    });
}

#[test]
fn gradcheck_linear_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[5])];
    check_gradients(inputs, |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        target_loss(g, y, 97)
    });
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![rand_tensor(&mut rng, &[2, 3, 3]), rand_tensor(&mut rng, &[2, 3, 3])];
    check_gradients(inputs, |g, v| {
        let s = g.sigmoid(v[0]);
        let si = g.silu(v[1]);
        let m = g.mul(s, si).unwrap();
        let a = g.add(m, v[0]).unwrap();
        let d = g.sub(a, v[1]).unwrap();
        let sc = g.scale(d, 1.7);
        target_loss(g, sc, 96)
    });
}

#[test]
fn gradcheck_pixel_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = vec![rand_tensor(&mut rng, &[3, 2, 2]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])];
    check_gradients(inputs, |g, v| {
        let y = g.pixel_affine(v[0], v[1], v[2], vec![0, 1, 1, 0]).unwrap();
        target_loss(g, y, 95)
    });
}

#[test]
fn gradcheck_resampling_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inputs = vec![rand_tensor(&mut rng, &[2, 4, 4]), rand_tensor(&mut rng, &[1, 4, 4])];
    check_gradients(inputs, |g, v| {
        let p = g.avg_pool2(v[0]).unwrap();
        let u = g.upsample2(p).unwrap();
        let c = g.concat_channels(u, v[1]).unwrap();
        target_loss(g, c, 94)
    });
}

#[test]
fn gradcheck_weighted_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = vec![rand_tensor(&mut rng, &[1, 3, 3]), rand_tensor(&mut rng, &[1, 3, 3])];
    let weights = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    check_gradients(inputs, move |g, v| g.weighted_mse_loss(v[0], v[1], weights.clone()).unwrap());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xt = rand_tensor(&mut rng, &[2, 4, 4]);
    let wt = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let bt = rand_tensor(&mut rng, &[2]);
    let t1 = rand_tensor(&mut rng, &[2, 4, 4]);
    let t2 = rand_tensor(&mut rng, &[2, 4, 4]);

    let grad_of = |targets: &[&Tensor]| {
        let mut g = Graph::new();
        let x = g.leaf(xt.clone(), true);
        let w = g.leaf(wt.clone(), true);
        let b = g.leaf(bt.clone(), true);
        let y = g.conv2d(x, w, b, 1).unwrap();
        let y = g.silu(y);
        let mut total: Option<Var> = None;
        for t in targets {
            let tv = g.constant((*t).clone());
            let l = g.mse_loss(y, tv).unwrap();
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l).unwrap(),
            });
        }
        let grads = g.backward(total.unwrap()).unwrap();
        grads.get(w).unwrap().clone()
    };
    let both = grad_of(&[&t1, &t2]);
    let a = grad_of(&[&t1]);
    let b = grad_of(&[&t2]);
    for ((s, x), y) in both.data().iter().zip(a.data()).zip(b.data()) {
        assert!((s - (x + y)).abs() < 1e-6);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, &[2, 4, 4]), true);
        let w = g.leaf(rand_tensor(&mut rng, &[4, 2, 3, 3]), true);
        let b = g.leaf(rand_tensor(&mut rng, &[4]), true);
        let y = g.conv2d(x, w, b, 1).unwrap();
        let y = g.group_norm(y, 2, 1e-5).unwrap();
        let l = target_loss(&mut g, y, 1);
        let grads = g.backward(l).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (bits(g.value(l)), bits(grads.get(w).unwrap()), bits(grads.get(x).unwrap()))
    };
    assert_eq!(run(), run());
}
