//! Gradient and oracle checks that return their worst-case error, shared by
//! the regular tests and the acceptance runner.

use digit_cnn::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout_backward, dropout_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax, ConvParams, DenseParams,
};
use digit_cnn::training::{batch_cross_entropy, cross_entropy, one_hot_encode, output_gradient};
use digit_cnn::{NetworkModel, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    max_rel_error, naive_conv_backward, naive_conv_forward, numeric_gradient, numeric_partial, probe, rng, uniform,
};

/// Shape of one conv gradient instance: `(H, W, C_in, K, C_out)`.
pub const CONV_CASES: [(usize, usize, usize, usize, usize); 5] = [
    (5, 5, 1, 3, 2),
    (6, 4, 2, 3, 3),
    (7, 7, 3, 5, 2),
    (4, 6, 2, 1, 4),
    (6, 6, 2, 3, 2),
];
pub const DENSE_CASES: [(usize, usize); 5] = [(7, 4), (12, 10), (3, 9), (20, 6), (5, 5)];

pub fn conv_gradient_error(seed: u64, (h, w, c, k, f): (usize, usize, usize, usize, usize)) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[h, w, c], &mut r);
    let p = ConvParams::new(uniform(&[k, k, c, f], &mut r), uniform(&[f], &mut r)).unwrap();
    let weights = uniform(&[h, w, f], &mut r);
    let g = conv2d_backward(&x, &p, &weights).unwrap();

    let d_input = numeric_gradient(&x, |x| probe(&conv2d_forward(x, &p).unwrap(), &weights));
    let d_kernels = numeric_gradient(&p.kernels, |k| {
        let q = ConvParams::new(k.clone(), p.bias.clone()).unwrap();
        probe(&conv2d_forward(&x, &q).unwrap(), &weights)
    });
    let d_bias = numeric_gradient(&p.bias, |b| {
        let q = ConvParams::new(p.kernels.clone(), b.clone()).unwrap();
        probe(&conv2d_forward(&x, &q).unwrap(), &weights)
    });
    max_rel_error(g.input.data(), &d_input)
        .max(max_rel_error(g.kernels.data(), &d_kernels))
        .max(max_rel_error(g.bias.data(), &d_bias))
}

/// Batched variant: a `(B, H, W, C)` input, gradients summed over the batch.
pub fn conv_batched_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[3, 5, 4, 2], &mut r);
    let p = ConvParams::new(uniform(&[3, 3, 2, 3], &mut r), uniform(&[3], &mut r)).unwrap();
    let weights = uniform(&[3, 5, 4, 3], &mut r);
    let g = conv2d_backward(&x, &p, &weights).unwrap();
    let d_input = numeric_gradient(&x, |x| probe(&conv2d_forward(x, &p).unwrap(), &weights));
    let d_kernels = numeric_gradient(&p.kernels, |k| {
        let q = ConvParams::new(k.clone(), p.bias.clone()).unwrap();
        probe(&conv2d_forward(&x, &q).unwrap(), &weights)
    });
    max_rel_error(g.input.data(), &d_input).max(max_rel_error(g.kernels.data(), &d_kernels))
}

pub fn dense_gradient_error(seed: u64, (n_in, n_out): (usize, usize), batch: Option<usize>) -> f64 {
    let mut r = rng(seed);
    let (x_shape, y_shape) = match batch {
        Some(b) => (vec![b, n_in], vec![b, n_out]),
        None => (vec![n_in], vec![n_out]),
    };
    let x = uniform(&x_shape, &mut r);
    let p = DenseParams::new(uniform(&[n_in, n_out], &mut r), uniform(&[n_out], &mut r)).unwrap();
    let weights = uniform(&y_shape, &mut r);
    let g = dense_backward(&x, &p, &weights).unwrap();

    let d_input = numeric_gradient(&x, |x| probe(&dense_forward(x, &p).unwrap(), &weights));
    let d_weights = numeric_gradient(&p.weights, |w| {
        let q = DenseParams::new(w.clone(), p.bias.clone()).unwrap();
        probe(&dense_forward(&x, &q).unwrap(), &weights)
    });
    let d_bias = numeric_gradient(&p.bias, |b| {
        let q = DenseParams::new(p.weights.clone(), b.clone()).unwrap();
        probe(&dense_forward(&x, &q).unwrap(), &weights)
    });
    max_rel_error(g.input.data(), &d_input)
        .max(max_rel_error(g.weights.data(), &d_weights))
        .max(max_rel_error(g.bias.data(), &d_bias))
}

/// Inputs kept at least 0.01 away from the kink.
pub fn relu_gradient_error(seed: u64, len: usize) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::from_fn(&[len], |_| {
        let v: f64 = r.random_range(0.01..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let weights = uniform(&[len], &mut r);
    let g = relu_backward(&x, &weights).unwrap();
    let d = numeric_gradient(&x, |x| probe(&relu_forward(x), &weights));
    max_rel_error(g.data(), &d)
}

/// Distinct input values spaced far wider than the difference step, so no
/// window has a tie within reach of the perturbation.
pub fn maxpool_gradient_error(seed: u64, shape: &[usize]) -> f64 {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let x = Tensor::from_fn(shape, |i| -1.0 + 2.0 * order[i] as f64 / n as f64);
    let (y, arg) = maxpool_forward(&x).unwrap();
    let weights = uniform(y.shape(), &mut r);
    let g = maxpool_backward(&arg, &weights).unwrap();
    let d = numeric_gradient(&x, |x| probe(&maxpool_forward(x).unwrap().0, &weights));
    max_rel_error(g.data(), &d)
}

/// The mask is held fixed by replaying the same random stream.
pub fn dropout_gradient_error(seed: u64, len: usize, rate: f64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[len], &mut r);
    let weights = uniform(&[len], &mut r);
    let mask_seed = seed.wrapping_add(1000);
    let (_, mask) = dropout_forward(&x, rate, true, &mut rng(mask_seed)).unwrap();
    let g = dropout_backward(&mask, &weights).unwrap();
    let d = numeric_gradient(&x, |x| {
        probe(
            &dropout_forward(x, rate, true, &mut rng(mask_seed)).unwrap().0,
            &weights,
        )
    });
    max_rel_error(g.data(), &d)
}

/// Logits spread over `[-scale, scale]` and a random label.
fn logits_and_target(seed: u64, scale: f64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let z = Tensor::from_fn(&[10], |_| r.random_range(-scale..scale));
    let label = r.random_range(0..10u8);
    (z, one_hot_encode(label).unwrap())
}

/// Fused gradient against finite differences of `CE(softmax(z))`.
pub fn fused_fd_error(seed: u64) -> f64 {
    let (z, t) = logits_and_target(seed, 3.0);
    let fused = output_gradient(&softmax(&z).unwrap(), &t).unwrap();
    let d = numeric_gradient(&z, |z| cross_entropy(&softmax(z).unwrap(), &t).unwrap());
    max_rel_error(fused.data(), &d)
}

/// Fused gradient against the explicit chain rule `J^T (-t / p)` with the
/// softmax Jacobian `J_ij = p_i (delta_ij - p_j)`.
pub fn fused_chain_error(seed: u64) -> f64 {
    let (z, t) = logits_and_target(seed, 3.0);
    let p = softmax(&z).unwrap();
    let fused = output_gradient(&p, &t).unwrap();
    let (p, t) = (p.data(), t.data());
    let chain: Vec<f64> = (0..10)
        .map(|j| {
            (0..10)
                .map(|i| {
                    let jac = p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]);
                    jac * (-t[i] / p[i])
                })
                .sum()
        })
        .collect();
    fused
        .data()
        .iter()
        .zip(&chain)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Whole-network check in f64: analytic batch gradients against central
/// differences of the mean loss for `per_tensor` random coordinates of
/// every parameter tensor. Biases are randomized so no pre-activation sits
/// exactly on a ReLU kink.
pub fn model_gradient_error(seed: u64, per_tensor: usize) -> f64 {
    let mut model = NetworkModel::<f32>::build(seed, 3, 0.3).unwrap().cast::<f64>();
    let mut r = rng(seed ^ 0x5eed);
    for t in model.parameters_mut() {
        if t.rank() == 1 {
            *t = Tensor::from_fn(t.shape(), |_| r.random_range(-0.1..0.1));
        }
    }
    let images = Tensor::from_fn(&[2, 28, 28, 1], |_| r.random_range(0.0..1.0));
    let labels = [r.random_range(0..10u8), r.random_range(0..10u8)];
    let mask_seed = seed.wrapping_add(77);

    let (probs, trace) = model.forward_trace(&images, &mut rng(mask_seed)).unwrap();
    let mut data = probs.data().to_vec();
    for (b, &l) in labels.iter().enumerate() {
        data[b * 10 + l as usize] -= 1.0;
    }
    let grad_logits = Tensor::new(&[2, 10], data).unwrap().scale(0.5);
    let grads = model.backward(&trace, &grad_logits).unwrap();

    let mut worst = 0.0f64;
    for (index, analytic) in grads.iter().enumerate() {
        let original = model.parameters()[index].clone();
        for _ in 0..per_tensor {
            let i = r.random_range(0..original.len());
            let numeric = numeric_partial(&original, i, |perturbed| {
                let mut m = model.clone();
                *m.parameters_mut()[index] = perturbed.clone();
                let (p, _) = m.forward_trace(&images, &mut rng(mask_seed)).unwrap();
                batch_cross_entropy(&p, &labels).unwrap()
            });
            worst = worst.max(max_rel_error(&[analytic.data()[i]], &[numeric]));
        }
    }
    worst
}

/// Library convolution against direct summation on a random instance of at
/// most 9x9x4 input and 8 filters; forward and all three gradients.
pub fn conv_oracle_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let h = r.random_range(1..=9);
    let w = r.random_range(1..=9);
    let c = r.random_range(1..=4);
    let f = r.random_range(1..=8);
    let k = [1, 3, 5][r.random_range(0..3)];
    let x = uniform(&[h, w, c], &mut r);
    let p = ConvParams::new(uniform(&[k, k, c, f], &mut r), uniform(&[f], &mut r)).unwrap();
    let g_out = uniform(&[h, w, f], &mut r);

    let y = conv2d_forward(&x, &p).unwrap();
    let y_ref = naive_conv_forward(&x, &p.kernels, &p.bias);
    let g = conv2d_backward(&x, &p, &g_out).unwrap();
    let (gx, gk, gb) = naive_conv_backward(&x, &p.kernels, &g_out);
    max_rel_error(y.data(), y_ref.data())
        .max(max_rel_error(g.input.data(), gx.data()))
        .max(max_rel_error(g.kernels.data(), gk.data()))
        .max(max_rel_error(g.bias.data(), gb.data()))
}

/// `conv(a x1 + b x2) - (a conv_0(x1) + b conv_0(x2)) - bias`, where
/// `conv_0` is the bias-free map; returns the worst relative deviation.
pub fn conv_linearity_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (h, w, c, f, k) = (6, 5, 3, 4, 3);
    let x1 = uniform(&[h, w, c], &mut r);
    let x2 = uniform(&[h, w, c], &mut r);
    let (a, b): (f64, f64) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    let kernels = uniform(&[k, k, c, f], &mut r);
    let p0 = ConvParams::new(kernels, Tensor::zeros(&[f])).unwrap();
    let mixed = x1.scale(a).add(&x2.scale(b)).unwrap();
    let lhs = conv2d_forward(&mixed, &p0).unwrap();
    let rhs = conv2d_forward(&x1, &p0)
        .unwrap()
        .scale(a)
        .add(&conv2d_forward(&x2, &p0).unwrap().scale(b))
        .unwrap();
    max_rel_error(lhs.data(), rhs.data())
}
