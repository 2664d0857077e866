//! Test-only oracles and fixtures: finite differences, direct-summation
//! convolution and a synthetic digit-like dataset.

#![allow(dead_code)]

pub mod checks;

use digit_cnn::data::LabeledDataset;
use digit_cnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_error(x, y)).fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len()).map(|i| numeric_partial(x, i, &f)).collect()
}

pub fn numeric_partial(x: &Tensor<f64>, i: usize, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let bump = |delta: f64| {
        let mut data = x.data().to_vec();
        data[i] += delta;
        f(&Tensor::new(x.shape(), data).unwrap())
    };
    (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP)
}

/// `sum(weights * y)`: a scalar probe whose gradient with respect to `y` is `weights`.
pub fn probe(y: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    assert_eq!(y.shape(), weights.shape());
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn at4(t: &Tensor<f64>, a: usize, b: usize, c: usize, d: usize) -> f64 {
    t.get(&[a, b, c, d]).unwrap()
}

/// Same-padded stride-1 convolution by direct summation, `(H, W, C)` input.
pub fn naive_conv_forward(x: &Tensor<f64>, kernels: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let &[h, w, c] = x.shape() else { panic!("rank-3 input") };
    let &[k, _, _, f] = kernels.shape() else {
        panic!("rank-4 kernels")
    };
    let pad = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w * f);
    for y in 0..h {
        for xx in 0..w {
            for ff in 0..f {
                let mut acc = bias.data()[ff];
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = y as isize + dy as isize - pad;
                        let ix = xx as isize + dx as isize - pad;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for cc in 0..c {
                            acc += x.get(&[iy as usize, ix as usize, cc]).unwrap() * at4(kernels, dy, dx, cc, ff);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(&[h, w, f], out).unwrap()
}

/// Direct-summation gradients of the convolution above:
/// `(grad_input, grad_kernels, grad_bias)`.
pub fn naive_conv_backward(
    x: &Tensor<f64>,
    kernels: &Tensor<f64>,
    grad_out: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let &[h, w, c] = x.shape() else { panic!("rank-3 input") };
    let &[k, _, _, f] = kernels.shape() else {
        panic!("rank-4 kernels")
    };
    let pad = (k / 2) as isize;
    let g = |y: usize, xx: usize, ff: usize| grad_out.get(&[y, xx, ff]).unwrap();

    let grad_bias = Tensor::from_fn(&[f], |ff| {
        let mut acc = 0.0;
        for y in 0..h {
            for xx in 0..w {
                acc += g(y, xx, ff);
            }
        }
        acc
    });

    let mut grad_k = vec![0.0; k * k * c * f];
    let mut grad_x = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..k {
                for dx in 0..k {
                    let iy = y as isize + dy as isize - pad;
                    let ix = xx as isize + dx as isize - pad;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let (iy, ix) = (iy as usize, ix as usize);
                    for cc in 0..c {
                        for ff in 0..f {
                            let kidx = ((dy * k + dx) * c + cc) * f + ff;
                            grad_k[kidx] += x.get(&[iy, ix, cc]).unwrap() * g(y, xx, ff);
                            grad_x[(iy * w + ix) * c + cc] += at4(kernels, dy, dx, cc, ff) * g(y, xx, ff);
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(&[h, w, c], grad_x).unwrap(),
        Tensor::new(&[k, k, c, f], grad_k).unwrap(),
        grad_bias,
    )
}

/// Ten fixed stroke-like templates, one per class.
fn templates(rng: &mut impl Rng) -> Vec<Vec<f32>> {
    (0..10)
        .map(|_| {
            let mut img = vec![0.0f32; 784];
            for _ in 0..4 {
                // A short random stroke of 3x3 blobs.
                let (mut y, mut x) = (rng.random_range(6..22i32), rng.random_range(6..22i32));
                let (dy, dx) = (rng.random_range(-1..=1), rng.random_range(-1..=1));
                for _ in 0..6 {
                    for oy in -1..=1 {
                        for ox in -1..=1 {
                            let (py, px) = (y + oy, x + ox);
                            if (0..28).contains(&py) && (0..28).contains(&px) {
                                img[(py * 28 + px) as usize] = 1.0;
                            }
                        }
                    }
                    y = (y + dy).clamp(2, 25);
                    x = (x + dx).clamp(2, 25);
                }
            }
            img
        })
        .collect()
}

/// `n` raw (0-255) images of ten separable classes: a class template,
/// shifted by up to one pixel, with additive noise. Labels cycle 0..9.
pub fn synthetic_digits(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = rng(seed);
    let templates = templates(&mut rng);
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        let t = &templates[label as usize];
        let (sy, sx) = (rng.random_range(-1..=1i32), rng.random_range(-1..=1i32));
        for y in 0..28i32 {
            for x in 0..28i32 {
                let (ty, tx) = (y - sy, x - sx);
                let base = if (0..28).contains(&ty) && (0..28).contains(&tx) {
                    t[(ty * 28 + tx) as usize]
                } else {
                    0.0
                };
                let noise = rng.random_range(0..40) as f32;
                data.push((base * 210.0 + noise).min(255.0).round());
            }
        }
        labels.push(label);
    }
    LabeledDataset::new(Tensor::new(&[n, 28, 28, 1], data).unwrap(), Some(labels), false).unwrap()
}

/// Labeled CSV text for a raw dataset.
pub fn to_csv(ds: &LabeledDataset, labeled: bool) -> String {
    let mut s = String::new();
    if labeled {
        s.push_str("label,");
    }
    s.push_str(&(0..784).map(|i| format!("pixel{i}")).collect::<Vec<_>>().join(","));
    s.push('\n');
    let labels = ds.labels();
    for i in 0..ds.len() {
        let mut fields: Vec<String> = Vec::with_capacity(785);
        if labeled {
            fields.push(labels.unwrap()[i].to_string());
        }
        fields.extend(ds.image(i).data().iter().map(|v| (*v as u32).to_string()));
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}
