//! A small sequential convolutional network with exact manual backpropagation.
//!
//! Items flow through the stack as `N × C × H × W` tensors until global average
//! pooling collapses them to `N × C`. All arithmetic is `f64`.

mod checkpoint;
pub(crate) mod kernels;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use kernels::sigmoid;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer} ({kind}): expected input item shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("layer {layer} ({kind}) cannot accept input item shape {actual:?}")]
    Incompatible {
        layer: usize,
        kind: &'static str,
        actual: Vec<usize>,
    },
    #[error("activations do not match this model: {0}")]
    StaleActivations(String),
    #[error("non-finite gradient in layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: &'static str },
    #[error("invalid optimizer setting: {0}")]
    BadHyperparameter(String),
    #[error("unsupported architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    MaxPool2,
    /// `y = F(x) + x` with `F = conv3x3 → relu → conv3x3`.
    ResidualBlock { channels: usize },
    GlobalAvgPool,
    Dense { in_dim: usize, out_dim: usize },
    Sigmoid,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    /// Item output shape (no batch axis) for an item input shape.
    ///
    /// conv3x3 and residual blocks keep `H × W` (same padding), maxpool2 maps
    /// `H × W` to `⌊H/2⌋ × ⌊W/2⌋`, global pooling maps `C × H × W` to `C`.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let incompatible = || NnError::Incompatible {
            layer: index,
            kind: self.name(),
            actual: input.to_vec(),
        };
        let mismatch = |expected: Vec<usize>| NnError::ShapeMismatch {
            layer: index,
            kind: self.name(),
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                [_, h, w] => Err(mismatch(vec![in_channels, *h, *w])),
                _ => Err(incompatible()),
            },
            LayerSpec::ResidualBlock { channels } => match input {
                [c, _, _] if *c == channels => Ok(input.to_vec()),
                [_, h, w] => Err(mismatch(vec![channels, *h, *w])),
                _ => Err(incompatible()),
            },
            LayerSpec::MaxPool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(incompatible()),
            },
            LayerSpec::GlobalAvgPool => match input {
                [c, h, w] if *h > 0 && *w > 0 => Ok(vec![*c]),
                _ => Err(incompatible()),
            },
            LayerSpec::Dense { in_dim, out_dim } => match input {
                [d] if *d == in_dim => Ok(vec![out_dim]),
                [_] => Err(mismatch(vec![in_dim])),
                _ => Err(incompatible()),
            },
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => vec![vec![out_channels, in_channels, 3, 3], vec![out_channels]],
            LayerSpec::ResidualBlock { channels } => vec![
                vec![channels, channels, 3, 3],
                vec![channels],
                vec![channels, channels, 3, 3],
                vec![channels],
            ],
            LayerSpec::Dense { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            _ => Vec::new(),
        }
    }
}

/// The default desk-scale stack:
/// conv(3→8) relu pool conv(8→16) relu pool residual(16) gap
/// [dense(16→d) relu] dense(→1) sigmoid.
pub fn desk_architecture(embedding_head: Option<usize>) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::Conv3x3 {
            in_channels: 3,
            out_channels: 8,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv3x3 {
            in_channels: 8,
            out_channels: 16,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::ResidualBlock { channels: 16 },
        LayerSpec::GlobalAvgPool,
    ];
    let mut width = 16;
    if let Some(d) = embedding_head {
        layers.push(LayerSpec::Dense {
            in_dim: width,
            out_dim: d,
        });
        layers.push(LayerSpec::Relu);
        width = d;
    }
    layers.push(LayerSpec::Dense {
        in_dim: width,
        out_dim: 1,
    });
    layers.push(LayerSpec::Sigmoid);
    layers
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor>>,
    input_shape: Vec<usize>,
    seed: u64,
}

/// One gradient tensor per parameter tensor. Layers that were not reached by
/// a backward pass (or are frozen) hold `None` and are skipped by [`ModelState::sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<Option<Vec<Tensor>>>,
}

impl GradientSet {
    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flatten()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm over every gradient entry.
    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales to norm `max_norm` when the norm exceeds it.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.l2_norm();
        if norm > max_norm {
            let f = max_norm / norm;
            for t in self.grads.iter_mut().flatten().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
    }
}

/// Everything a forward pass produced; `outputs[0]` is the input batch and
/// `outputs[i + 1]` is the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Activations {
    outputs: Vec<Tensor>,
    /// Residual blocks keep the inner pre- and post-ReLU tensors.
    inner: Vec<Option<(Tensor, Tensor)>>,
}

impl Activations {
    pub fn input(&self) -> &Tensor {
        &self.outputs[0]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.outputs[layer + 1]
    }

    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.outputs[0].shape()[0]
    }
}

fn validate_stack(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input_shape.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let next = layer.output_shape(i, shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}

impl ModelState {
    /// Fan-in scaled uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`,
    /// with zero biases. Deterministic in `seed`.
    pub fn init(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Self> {
        validate_stack(&layers, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|layer| {
                layer
                    .param_shapes()
                    .into_iter()
                    .map(|shape| {
                        if shape.len() == 1 {
                            return Tensor::zeros(&shape);
                        }
                        let fan_in: usize = shape[1..].iter().product();
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let mut t = Tensor::zeros(&shape);
                        for v in t.data_mut() {
                            *v = rng.gen_range(-bound..=bound);
                        }
                        t
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            layers,
            params,
            input_shape: input_shape.to_vec(),
            seed,
        })
    }

    pub(crate) fn from_parts(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        seed: u64,
        params: Vec<Vec<Tensor>>,
    ) -> Result<Self> {
        validate_stack(&layers, &input_shape)?;
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            let shapes = layer.param_shapes();
            if shapes.len() != p.len() || shapes.iter().zip(p).any(|(s, t)| s.as_slice() != t.shape()) {
                return Err(NnError::Checkpoint(format!("parameter shapes of layer {i} do not match its spec")));
            }
        }
        if params.len() != layers.len() {
            return Err(NnError::Checkpoint("parameter block count mismatch".into()));
        }
        Ok(Self {
            layers,
            params,
            input_shape,
            seed,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// Index of the final `dense(d → 1)` layer that feeds the trailing sigmoid.
    pub fn classifier_index(&self) -> Result<usize> {
        let n = self.layers.len();
        match self.layers.get(n.wrapping_sub(2)..) {
            Some([LayerSpec::Dense { out_dim: 1, .. }, LayerSpec::Sigmoid]) => Ok(n - 2),
            _ => Err(NnError::Architecture(
                "model must end with dense(d -> 1) followed by sigmoid".into(),
            )),
        }
    }

    /// Width of the layer feeding the classifier.
    pub fn embedding_dim(&self) -> Result<usize> {
        match self.layers[self.classifier_index()?] {
            LayerSpec::Dense { in_dim, .. } => Ok(in_dim),
            _ => unreachable!(),
        }
    }

    /// Classifier weights and bias.
    pub fn classifier(&self) -> Result<(&[f64], f64)> {
        let p = &self.params[self.classifier_index()?];
        Ok((p[0].data(), p[1].data()[0]))
    }

    pub fn global_pool_index(&self) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::GlobalAvgPool))
            .ok_or_else(|| NnError::Architecture("model has no global average pooling layer".into()))
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![batch.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_shape);
            return Err(NnError::ShapeMismatch {
                layer: 0,
                kind: self.layers.first().map(LayerSpec::name).unwrap_or("input"),
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs every layer and keeps every intermediate activation.
    pub fn forward(&self, batch: &Tensor) -> Result<Activations> {
        self.check_input(batch)?;
        let n = batch.shape()[0];
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        let mut inner = Vec::with_capacity(self.layers.len());
        outputs.push(batch.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            let x = outputs.last().unwrap();
            let item_in = &x.shape()[1..];
            let item_out = layer.output_shape(li, item_in)?;
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&item_out);
            let mut y = Tensor::zeros(&out_shape);
            let p = &self.params[li];
            let mut hidden = None;
            match *layer {
                LayerSpec::Conv3x3 { in_channels, .. } => {
                    let (h, w) = (item_in[1], item_in[2]);
                    for s in 0..n {
                        kernels::conv3x3_forward(
                            x.item(s),
                            in_channels,
                            h,
                            w,
                            p[0].data(),
                            p[1].data(),
                            y.item_mut(s),
                        );
                    }
                }
                LayerSpec::ResidualBlock { channels } => {
                    let (h, w) = (item_in[1], item_in[2]);
                    let mut pre = Tensor::zeros(&out_shape);
                    for s in 0..n {
                        kernels::conv3x3_forward(
                            x.item(s),
                            channels,
                            h,
                            w,
                            p[0].data(),
                            p[1].data(),
                            pre.item_mut(s),
                        );
                    }
                    let mut post = pre.clone();
                    post.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    for s in 0..n {
                        let out = y.item_mut(s);
                        kernels::conv3x3_forward(
                            post.item(s),
                            channels,
                            h,
                            w,
                            p[2].data(),
                            p[3].data(),
                            out,
                        );
                        for (o, xi) in out.iter_mut().zip(x.item(s)) {
                            *o += xi;
                        }
                    }
                    hidden = Some((pre, post));
                }
                LayerSpec::MaxPool2 => {
                    for s in 0..n {
                        kernels::maxpool2_forward(x.item(s), item_in[0], item_in[1], item_in[2], y.item_mut(s));
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    let hw = item_in[1] * item_in[2];
                    for s in 0..n {
                        let xs = x.item(s);
                        for (c, slot) in y.item_mut(s).iter_mut().enumerate() {
                            *slot = xs[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
                        }
                    }
                }
                LayerSpec::Dense { .. } => {
                    for s in 0..n {
                        kernels::dense_forward(x.item(s), p[0].data(), p[1].data(), y.item_mut(s));
                    }
                }
                LayerSpec::Relu => {
                    for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = v.max(0.0);
                    }
                }
                LayerSpec::Sigmoid => {
                    for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = sigmoid(*v);
                    }
                }
            }
            outputs.push(y);
            inner.push(hidden);
        }
        Ok(Activations { outputs, inner })
    }

    /// Spatial maps entering global average pooling, `N × K × h × w`.
    pub fn feature_maps<'a>(&self, acts: &'a Activations) -> Result<&'a Tensor> {
        Ok(&acts.outputs[self.global_pool_index()?])
    }

    /// Embedding vectors (the classifier input), `N × d`.
    pub fn embeddings<'a>(&self, acts: &'a Activations) -> Result<&'a Tensor> {
        Ok(&acts.outputs[self.classifier_index()?])
    }

    /// Positive-class probability per sample.
    pub fn probabilities(&self, acts: &Activations) -> Result<Vec<f64>> {
        self.classifier_index()?;
        Ok(acts.output().data().to_vec())
    }

    /// Backpropagates a gradient of the scalar loss taken with respect to the
    /// network output.
    pub fn backward(&self, acts: &Activations, grad_output: &Tensor) -> Result<GradientSet> {
        let top = self.layers.len() - 1;
        Ok(self.backward_range(acts, top, grad_output, 0)?.0)
    }

    /// Backpropagates `grad` (w.r.t. the output of layer `top`) through layers
    /// `top` down to `bottom` inclusive. Returns parameter gradients (layers
    /// outside the range hold `None`) and the gradient w.r.t. the input of `bottom`.
    pub fn backward_range(
        &self,
        acts: &Activations,
        top: usize,
        grad: &Tensor,
        bottom: usize,
    ) -> Result<(GradientSet, Tensor)> {
        if acts.outputs.len() != self.layers.len() + 1 || top >= self.layers.len() || bottom > top {
            return Err(NnError::StaleActivations(format!(
                "{} activations for {} layers, range {bottom}..={top}",
                acts.outputs.len(),
                self.layers.len()
            )));
        }
        if grad.shape() != acts.outputs[top + 1].shape() {
            return Err(NnError::StaleActivations(format!(
                "gradient shape {:?} does not match layer {top} output {:?}",
                grad.shape(),
                acts.outputs[top + 1].shape()
            )));
        }
        let n = acts.batch_size();
        let shapes = validate_stack(&self.layers, &self.input_shape)?;
        let mut grads: Vec<Option<Vec<Tensor>>> = vec![None; self.layers.len()];
        let mut g = grad.clone();
        for li in (bottom..=top).rev() {
            let layer = &self.layers[li];
            let x = &acts.outputs[li];
            let y = &acts.outputs[li + 1];
            if x.shape()[1..] != shapes[li][..] {
                return Err(NnError::StaleActivations(format!("layer {li} input shape {:?}", x.shape())));
            }
            let item_in = &x.shape()[1..];
            let p = &self.params[li];
            let mut pg: Vec<Tensor> = p.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut gx = Tensor::zeros(x.shape());
            match *layer {
                LayerSpec::Conv3x3 { in_channels, .. } => {
                    let (h, w) = (item_in[1], item_in[2]);
                    let (gw, gb) = pg.split_at_mut(1);
                    for s in 0..n {
                        kernels::conv3x3_backward(
                            x.item(s),
                            in_channels,
                            h,
                            w,
                            p[0].data(),
                            g.item(s),
                            gw[0].data_mut(),
                            gb[0].data_mut(),
                            gx.item_mut(s),
                        );
                    }
                }
                LayerSpec::ResidualBlock { channels } => {
                    let (h, w) = (item_in[1], item_in[2]);
                    let (pre, post) = acts.inner[li]
                        .as_ref()
                        .ok_or_else(|| NnError::StaleActivations(format!("layer {li} lost its inner activations")))?;
                    let (g1, g2) = pg.split_at_mut(2);
                    let (gw1, gb1) = g1.split_at_mut(1);
                    let (gw2, gb2) = g2.split_at_mut(1);
                    let mut g_mid = vec![0.0; x.item_len()];
                    let mut g_in1 = vec![0.0; x.item_len()];
                    for s in 0..n {
                        let gy = g.item(s);
                        kernels::conv3x3_backward(
                            post.item(s),
                            channels,
                            h,
                            w,
                            p[2].data(),
                            gy,
                            gw2[0].data_mut(),
                            gb2[0].data_mut(),
                            &mut g_mid,
                        );
                        for (gm, &z) in g_mid.iter_mut().zip(pre.item(s)) {
                            if z <= 0.0 {
                                *gm = 0.0;
                            }
                        }
                        kernels::conv3x3_backward(
                            x.item(s),
                            channels,
                            h,
                            w,
                            p[0].data(),
                            &g_mid,
                            gw1[0].data_mut(),
                            gb1[0].data_mut(),
                            &mut g_in1,
                        );
                        for ((o, a), b) in gx.item_mut(s).iter_mut().zip(&g_in1).zip(gy) {
                            *o = a + b;
                        }
                    }
                }
                LayerSpec::MaxPool2 => {
                    for s in 0..n {
                        kernels::maxpool2_backward(x.item(s), item_in[0], item_in[1], item_in[2], g.item(s), gx.item_mut(s));
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    let hw = item_in[1] * item_in[2];
                    for s in 0..n {
                        let gs = g.item(s).to_vec();
                        for (c, chunk) in gx.item_mut(s).chunks_mut(hw).enumerate() {
                            chunk.fill(gs[c] / hw as f64);
                        }
                    }
                }
                LayerSpec::Dense { .. } => {
                    let (gw, gb) = pg.split_at_mut(1);
                    for s in 0..n {
                        kernels::dense_backward(
                            x.item(s),
                            p[0].data(),
                            g.item(s),
                            gw[0].data_mut(),
                            gb[0].data_mut(),
                            gx.item_mut(s),
                        );
                    }
                }
                LayerSpec::Relu => {
                    for ((o, gv), xv) in gx.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o = if *xv > 0.0 { *gv } else { 0.0 };
                    }
                }
                LayerSpec::Sigmoid => {
                    for ((o, gv), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o = gv * yv * (1.0 - yv);
                    }
                }
            }
            grads[li] = Some(pg);
            g = gx;
        }
        Ok((GradientSet { grads }, g))
    }

    /// `p ← p − lr · (g + weight_decay · p)` for every layer that has a gradient.
    /// Nothing is modified when any gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &GradientSet, learning_rate: f64, weight_decay: f64) -> Result<()> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(NnError::BadHyperparameter(format!("learning rate {learning_rate}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(NnError::BadHyperparameter(format!("weight decay {weight_decay}")));
        }
        if grads.grads.len() != self.layers.len() {
            return Err(NnError::StaleActivations("gradient set has the wrong layer count".into()));
        }
        for (li, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                let congruent = g.len() == self.params[li].len()
                    && g.iter().zip(&self.params[li]).all(|(a, b)| a.shape() == b.shape());
                if !congruent {
                    return Err(NnError::StaleActivations(format!("gradient shapes of layer {li}")));
                }
                if !g.iter().all(Tensor::is_finite) {
                    return Err(NnError::NonFinite {
                        layer: li,
                        kind: self.layers[li].name(),
                    });
                }
            }
        }
        for (params, g) in self.params.iter_mut().zip(&grads.grads) {
            let Some(g) = g else { continue };
            for (p, gt) in params.iter_mut().zip(g) {
                for (pv, gv) in p.data_mut().iter_mut().zip(gt.data()) {
                    *pv -= learning_rate * (gv + weight_decay * *pv);
                }
            }
        }
        Ok(())
    }
}
