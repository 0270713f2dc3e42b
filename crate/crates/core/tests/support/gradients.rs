//! Finite-difference checks of the library's backpropagation and loss
//! gradients, built on [`super::oracles`]. Used by the gradient tests and by
//! the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarevent_core::losses::{self, EmbeddingBatch, Margin};
use rarevent_core::nn::{desk_architecture, LayerSpec, ModelState};
use rarevent_core::tensor::Tensor;
use rarevent_core::types::Label;

use super::oracles::{check_gradient, GradCheck};

pub const EPS: f64 = 1e-3;

/// Scalar probe `Σ r ⊙ output` of a model.
fn probe(model: &ModelState, x: &Tensor, r: &[f64]) -> f64 {
    let acts = model.forward(x).unwrap();
    acts.output().data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Checks every parameter (or a random subset of `max_coords` per tensor) and
/// every input coordinate of `model` at input `x`.
pub fn check_model(model: &ModelState, x: &Tensor, rng: &mut ChaCha8Rng, max_coords: usize) -> GradCheck {
    let acts = model.forward(x).unwrap();
    let r: Vec<f64> = (0..acts.output().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Tensor::new(acts.output().shape().to_vec(), r.clone()).unwrap();
    let top = model.layers().len() - 1;
    let (grads, gx) = model.backward_range(&acts, top, &g, 0).unwrap();
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..n)).collect()
        }
    };
    let mut total = GradCheck::default();
    for (li, layer_grads) in grads.grads.iter().enumerate() {
        let Some(layer_grads) = layer_grads else { continue };
        for (bi, gt) in layer_grads.iter().enumerate() {
            let base = model.params()[li][bi].data().to_vec();
            let coords = pick(base.len(), rng);
            let mut f = |v: &[f64]| {
                let mut m = model.clone();
                m.params_mut()[li][bi].data_mut().copy_from_slice(v);
                probe(&m, x, &r)
            };
            total.merge(check_gradient(&mut f, &base, gt.data(), &coords, EPS));
        }
    }
    let coords = pick(x.len(), rng);
    let mut f = |v: &[f64]| probe(model, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &r);
    total.merge(check_gradient(&mut f, x.data(), gx.data(), &coords, EPS));
    total
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so a ReLU is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A random permutation of well-separated levels, so every pooling window has
/// a clear maximum.
fn distinct_levels(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One named instance per layer kind plus a full desk-architecture stack.
pub fn layer_instance(kind: &str, seed: u64) -> (ModelState, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let (layers, input_shape, x) = match kind {
        "conv3x3" => (
            vec![LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3 }],
            vec![2, 5, 5],
            uniform(&mut rng, &[n, 2, 5, 5], -1.0, 1.0),
        ),
        "relu" => (vec![LayerSpec::Relu], vec![6], away_from_zero(&mut rng, &[n, 6])),
        "max_pool2" => (vec![LayerSpec::MaxPool2], vec![2, 4, 5], distinct_levels(&mut rng, &[n, 2, 4, 5])),
        "residual_block" => (
            vec![LayerSpec::ResidualBlock { channels: 3 }],
            vec![3, 4, 4],
            uniform(&mut rng, &[n, 3, 4, 4], -1.0, 1.0),
        ),
        "global_avg_pool" => (vec![LayerSpec::GlobalAvgPool], vec![3, 3, 4], uniform(&mut rng, &[n, 3, 3, 4], -1.0, 1.0)),
        "dense" => (
            vec![LayerSpec::Dense { in_dim: 5, out_dim: 3 }],
            vec![5],
            uniform(&mut rng, &[n, 5], -1.0, 1.0),
        ),
        "sigmoid" => (vec![LayerSpec::Sigmoid], vec![4], uniform(&mut rng, &[n, 4], -4.0, 4.0)),
        "desk_stack" => (desk_architecture(Some(4)), vec![3, 8, 8], uniform(&mut rng, &[n, 3, 8, 8], 0.0, 1.0)),
        other => panic!("unknown layer kind {other}"),
    };
    let mut model = ModelState::init(layers, &input_shape, seed).unwrap();
    // nonzero biases so bias gradients are exercised away from symmetric points
    for layer in model.params_mut() {
        for (i, t) in layer.iter_mut().enumerate() {
            if i % 2 == 1 {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
    }
    (model, x)
}

pub const LAYER_KINDS: [&str; 8] = [
    "conv3x3",
    "relu",
    "max_pool2",
    "residual_block",
    "global_avg_pool",
    "dense",
    "sigmoid",
    "desk_stack",
];

pub fn check_layer_kind(kind: &str, instances: u64) -> GradCheck {
    let mut total = GradCheck::default();
    for seed in 0..instances {
        let (model, x) = layer_instance(kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        total.merge(check_model(&model, &x, &mut rng, 40));
    }
    total
}

fn random_labels(rng: &mut ChaCha8Rng, k0: usize, k1: usize) -> Vec<Label> {
    use rand::seq::SliceRandom;
    let mut labels = vec![Label::Negative; k0];
    labels.extend(vec![Label::Positive; k1]);
    labels.shuffle(rng);
    labels
}

pub const LOSSES: [&str; 3] = ["bce", "batch_all", "batch_hard"];

/// Gradient of each loss against finite differences on random instances.
pub fn check_loss(name: &str, instances: u64) -> GradCheck {
    let mut total = GradCheck::default();
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match name {
            "bce" => {
                for y in [Label::Negative, Label::Positive] {
                    let p = rng.gen_range(0.02..0.98);
                    let (_, g) = losses::bce_loss(p, y);
                    let mut f = |v: &[f64]| losses::bce_loss(v[0], y).0;
                    total.merge(check_gradient(&mut f, &[p], &[g], &[0], EPS));
                    let z = rng.gen_range(-6.0..6.0);
                    let (_, gz) = losses::bce_with_logit(z, y);
                    let mut f = |v: &[f64]| losses::bce_with_logit(v[0], y).0;
                    total.merge(check_gradient(&mut f, &[z], &[gz], &[0], EPS));
                }
            }
            "batch_all" | "batch_hard" => {
                let (k0, k1, dim) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..5));
                let labels = random_labels(&mut rng, k0, k1);
                let emb: Vec<f64> = (0..(k0 + k1) * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let alpha = Margin::new([0.1, 0.2, 0.5, 1.0][rng.gen_range(0..4)]).unwrap();
                let eval = |v: &[f64]| -> (f64, Vec<f64>) {
                    let b = EmbeddingBatch::new(v.to_vec(), dim, labels.clone()).unwrap();
                    if name == "batch_all" {
                        let o = losses::batch_all_loss(&b, alpha).unwrap();
                        (o.loss, o.gradient)
                    } else {
                        let o = losses::batch_hard_loss(&b, alpha).unwrap();
                        (o.loss, o.gradient)
                    }
                };
                let (_, g) = eval(&emb);
                let coords: Vec<usize> = (0..emb.len()).collect();
                let mut f = |v: &[f64]| eval(v).0;
                total.merge(check_gradient(&mut f, &emb, &g, &coords, EPS));
            }
            other => panic!("unknown loss {other}"),
        }
    }
    total
}
