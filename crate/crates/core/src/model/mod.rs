//! The digit-recognition network: three conv blocks, two max pools, three
//! dropouts, a flatten and two dense layers, in that fixed order.

mod io;

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::layers::{
    conv2d_backward_impl, conv2d_forward, dense_backward, dense_forward, dropout_backward, dropout_forward,
    flatten_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax, unflatten, ConvParams,
    DenseParams, DropoutMask, LayerError, PoolArgmax,
};
use crate::seed::{rng_for, Stream};
use crate::tensor::{Scalar, ShapeDisplay, Tensor, TensorError};
use crate::training::AdamState;

pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;
pub const INPUT_SHAPE: [usize; 3] = [IMAGE_SIDE, IMAGE_SIDE, 1];
pub const DEFAULT_KERNEL_SIZE: usize = 3;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.3;

/// Samples per inference chunk.
const INFERENCE_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("model file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Layer(e.into())
    }
}

impl ModelError {
    /// True for every way a model file can be unreadable (bad magic, bad
    /// header, truncation, checksum).
    pub fn is_format_error(&self) -> bool {
        matches!(self, ModelError::Format { .. } | ModelError::Checksum { .. })
    }
}

/// Layer names as printed in the architecture table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv2D,
    MaxPooling2D,
    Dropout,
    Flatten,
    Dense,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Conv2D => "Conv2D",
            LayerKind::MaxPooling2D => "MaxPooling2D",
            LayerKind::Dropout => "Dropout",
            LayerKind::Flatten => "Flatten",
            LayerKind::Dense => "Dense",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [
            LayerKind::Input,
            LayerKind::Conv2D,
            LayerKind::MaxPooling2D,
            LayerKind::Dropout,
            LayerKind::Flatten,
            LayerKind::Dense,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar = f32> {
    /// Same-padded convolution followed by ReLU.
    Conv2D(ConvParams<T>),
    MaxPool2D,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        params: DenseParams<T>,
        activation: Activation,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2D(_) => LayerKind::Conv2D,
            Layer::MaxPool2D => LayerKind::MaxPooling2D,
            Layer::Dropout { .. } => LayerKind::Dropout,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense { .. } => LayerKind::Dense,
        }
    }
}

/// How the training/validation split of a run was drawn; stored with the
/// model so evaluation can reproduce it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRecord {
    pub train_count: usize,
    pub val_count: usize,
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetadata {
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub split: Option<SplitRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<T: Scalar = f32> {
    layers: Vec<Layer<T>>,
    optimizer: Vec<AdamState<T>>,
    metadata: ModelMetadata,
}

/// Per-layer values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
enum LayerCache<T: Scalar> {
    Conv {
        input: Tensor<T>,
        pre_activation: Tensor<T>,
    },
    Pool(PoolArgmax),
    Dropout(DropoutMask<T>),
    Flatten {
        input_shape: Vec<usize>,
    },
    Dense {
        input: Tensor<T>,
        pre_activation: Option<Tensor<T>>,
    },
}

/// Activations recorded by [`NetworkModel::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar = f32> {
    caches: Vec<LayerCache<T>>,
}

/// Builds the default network with the given seed and kernel size.
pub fn build_paper_model(seed: u64, kernel_size: usize) -> Result<NetworkModel<f32>, ModelError> {
    NetworkModel::build(seed, kernel_size, DEFAULT_DROPOUT_RATE)
}

impl<T: Scalar> NetworkModel<T> {
    /// `Input(28,28,1) -> Conv(32) -> Pool -> Dropout -> Conv(64) -> Pool ->
    /// Dropout -> Conv(64) -> Flatten -> Dense(64) -> Dropout -> Dense(10)`,
    /// He-uniform weights drawn from the seed's init stream.
    pub fn build(seed: u64, kernel_size: usize, dropout_rate: f64) -> Result<Self, ModelError> {
        if kernel_size.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let mut rng = rng_for(seed, Stream::Init);
        let k = kernel_size;
        let flat = (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4) * 64;
        let layers = vec![
            Layer::Conv2D(ConvParams::he_uniform(k, 1, 32, &mut rng)?),
            Layer::MaxPool2D,
            Layer::Dropout { rate: dropout_rate },
            Layer::Conv2D(ConvParams::he_uniform(k, 32, 64, &mut rng)?),
            Layer::MaxPool2D,
            Layer::Dropout { rate: dropout_rate },
            Layer::Conv2D(ConvParams::he_uniform(k, 64, 64, &mut rng)?),
            Layer::Flatten,
            Layer::Dense {
                params: DenseParams::he_uniform(flat, 64, &mut rng)?,
                activation: Activation::Relu,
            },
            Layer::Dropout { rate: dropout_rate },
            Layer::Dense {
                params: DenseParams::he_uniform(64, NUM_CLASSES, &mut rng)?,
                activation: Activation::Softmax,
            },
        ];
        let metadata = ModelMetadata {
            kernel_size,
            dropout_rate,
            seed,
            split: None,
        };
        Self::from_layers(layers, metadata)
    }

    fn from_layers(layers: Vec<Layer<T>>, metadata: ModelMetadata) -> Result<Self, ModelError> {
        let mut model = Self {
            layers,
            optimizer: Vec::new(),
            metadata,
        };
        model.optimizer = model.parameters().iter().map(|p| AdamState::new(p.shape())).collect();
        model.shape_table()?;
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn set_split(&mut self, split: SplitRecord) {
        self.metadata.split = Some(split);
    }

    pub fn optimizer_state(&self) -> &[AdamState<T>] {
        &self.optimizer
    }

    /// Parameter tensors in layer order (kernel/weights then bias per layer).
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2D(p) => out.extend([&p.kernels, &p.bias]),
                Layer::Dense { params, .. } => out.extend([&params.weights, &params.bias]),
                _ => {}
            }
        }
        out
    }

    /// Mutable parameters, same order as [`parameters`](Self::parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.parameters_with_state_mut().0
    }

    pub(crate) fn parameters_with_state_mut(&mut self) -> (Vec<&mut Tensor<T>>, &mut [AdamState<T>]) {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2D(p) => out.extend([&mut p.kernels, &mut p.bias]),
                Layer::Dense { params, .. } => out.extend([&mut params.weights, &mut params.bias]),
                _ => {}
            }
        }
        (out, &mut self.optimizer)
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Converts every parameter to another precision. Optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> NetworkModel<U> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv2D(p) => Layer::Conv2D(ConvParams {
                    kernels: p.kernels.cast(),
                    bias: p.bias.cast(),
                }),
                Layer::MaxPool2D => Layer::MaxPool2D,
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                Layer::Flatten => Layer::Flatten,
                Layer::Dense { params, activation } => Layer::Dense {
                    params: DenseParams {
                        weights: params.weights.cast(),
                        bias: params.bias.cast(),
                    },
                    activation: *activation,
                },
            })
            .collect();
        NetworkModel::from_layers(layers, self.metadata.clone()).expect("cast preserves architecture")
    }

    /// Layer names and per-sample output shapes, starting with the input row.
    pub fn shape_table(&self) -> Result<Vec<(LayerKind, Vec<usize>)>, ModelError> {
        let mut shape = INPUT_SHAPE.to_vec();
        let mut rows = vec![(LayerKind::Input, shape.clone())];
        for layer in &self.layers {
            shape = match (layer, shape.as_slice()) {
                (Layer::Conv2D(p), &[h, w, c]) if c == p.in_channels() => vec![h, w, p.out_channels()],
                (Layer::MaxPool2D, &[h, w, c]) if h % 2 == 0 && w % 2 == 0 => vec![h / 2, w / 2, c],
                (Layer::Dropout { .. }, _) => shape.clone(),
                (Layer::Flatten, &[h, w, c]) => vec![h * w * c],
                (Layer::Dense { params, .. }, &[n]) if n == params.inputs() => vec![params.outputs()],
                _ => {
                    return Err(ModelError::InvalidConfig(format!(
                        "{} cannot follow shape {}",
                        layer.kind(),
                        ShapeDisplay(&shape)
                    )))
                }
            };
            rows.push((layer.kind(), shape.clone()));
        }
        Ok(rows)
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<(), ModelError> {
        match batch.shape() {
            [_, h, w, c] if [*h, *w, *c] == INPUT_SHAPE => Ok(()),
            other => Err(TensorError::shape("forward", "(B, 28, 28, 1)", ShapeDisplay(other)).into()),
        }
    }

    /// Class probabilities `(B, 10)`. Dropout is active only when `training`.
    pub fn forward(&self, batch: &Tensor<T>, training: bool, rng: &mut impl Rng) -> Result<Tensor<T>, ModelError> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = apply_layer(layer, &x, training, rng)?;
        }
        Ok(x)
    }

    /// Per-layer output shapes of an inference pass over `batch` (leading
    /// batch axis stripped), starting with the input.
    pub fn traced_shapes(&self, batch: &Tensor<T>) -> Result<Vec<(LayerKind, Vec<usize>)>, ModelError> {
        self.check_batch(batch)?;
        let mut rng = rng_for(0, Stream::Init);
        let mut rows = vec![(LayerKind::Input, batch.shape()[1..].to_vec())];
        let mut x = batch.clone();
        for layer in &self.layers {
            x = apply_layer(layer, &x, false, &mut rng)?;
            rows.push((layer.kind(), x.shape()[1..].to_vec()));
        }
        Ok(rows)
    }

    /// Training-mode forward pass that keeps what [`backward`](Self::backward) needs.
    pub fn forward_trace(
        &self,
        batch: &Tensor<T>,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<T>, ForwardTrace<T>), ModelError> {
        self.check_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2D(p) => {
                    let z = conv2d_forward(&x, p)?;
                    let y = relu_forward(&z);
                    caches.push(LayerCache::Conv {
                        input: x,
                        pre_activation: z,
                    });
                    y
                }
                Layer::MaxPool2D => {
                    let (y, arg) = maxpool_forward(&x)?;
                    caches.push(LayerCache::Pool(arg));
                    y
                }
                Layer::Dropout { rate } => {
                    let (y, mask) = dropout_forward(&x, *rate, true, rng)?;
                    caches.push(LayerCache::Dropout(mask));
                    y
                }
                Layer::Flatten => {
                    let y = flatten_forward(&x)?;
                    caches.push(LayerCache::Flatten {
                        input_shape: x.shape().to_vec(),
                    });
                    y
                }
                Layer::Dense { params, activation } => {
                    let z = dense_forward(&x, params)?;
                    match activation {
                        Activation::Relu => {
                            let y = relu_forward(&z);
                            caches.push(LayerCache::Dense {
                                input: x,
                                pre_activation: Some(z),
                            });
                            y
                        }
                        Activation::Softmax => {
                            let y = softmax(&z)?;
                            caches.push(LayerCache::Dense {
                                input: x,
                                pre_activation: None,
                            });
                            y
                        }
                    }
                }
            };
        }
        Ok((x, ForwardTrace { caches }))
    }

    /// Gradients of every parameter (in [`parameters`](Self::parameters)
    /// order) given the gradient with respect to the final logits, i.e. the
    /// input of the closing softmax.
    pub fn backward(&self, trace: &ForwardTrace<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        if trace.caches.len() != self.layers.len() {
            return Err(ModelError::InvalidConfig("trace does not belong to this model".into()));
        }
        let mut grads_rev = Vec::new();
        let mut g = grad_logits.clone();
        for (index, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            g = match (layer, cache) {
                (Layer::Conv2D(p), LayerCache::Conv { input, pre_activation }) => {
                    let dz = relu_backward(pre_activation, &g)?;
                    let (dx, dk, db) = conv2d_backward_impl(input, p, &dz, index > 0)?;
                    grads_rev.push(db);
                    grads_rev.push(dk);
                    match dx {
                        Some(dx) => dx,
                        None => Tensor::zeros(input.shape()),
                    }
                }
                (Layer::MaxPool2D, LayerCache::Pool(arg)) => maxpool_backward(arg, &g)?,
                (Layer::Dropout { .. }, LayerCache::Dropout(mask)) => dropout_backward(mask, &g)?,
                (Layer::Flatten, LayerCache::Flatten { input_shape }) => unflatten(&g, input_shape)?,
                (Layer::Dense { params, .. }, LayerCache::Dense { input, pre_activation }) => {
                    let dz = match pre_activation {
                        Some(z) => relu_backward(z, &g)?,
                        None => g,
                    };
                    let grads = dense_backward(input, params, &dz)?;
                    grads_rev.push(grads.bias);
                    grads_rev.push(grads.weights);
                    grads.input
                }
                _ => return Err(ModelError::InvalidConfig("trace does not belong to this model".into())),
            };
        }
        grads_rev.reverse();
        Ok(grads_rev)
    }

    /// Inference-mode probabilities, evaluated in parallel chunks.
    pub fn probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_batch(images)?;
        let n = images.shape()[0];
        let per = images.len() / n;
        let chunks: Vec<_> = (0..n).step_by(INFERENCE_CHUNK).collect();
        let parts = chunks
            .par_iter()
            .map(|&start| {
                let end = (start + INFERENCE_CHUNK).min(n);
                let mut shape = images.shape().to_vec();
                shape[0] = end - start;
                let chunk = Tensor::from_parts(shape, images.data()[start * per..end * per].to_vec());
                // Unused at inference; dropout draws nothing.
                let mut rng = rng_for(0, Stream::Init);
                self.forward(&chunk, false, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut data = Vec::with_capacity(n * NUM_CLASSES);
        for part in parts {
            data.extend(part.into_data());
        }
        Ok(Tensor::from_parts(vec![n, NUM_CLASSES], data))
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<u8>, ModelError> {
        Ok(argmax_rows(&self.probabilities(images)?))
    }
}

fn apply_layer<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, ModelError> {
    Ok(match layer {
        Layer::Conv2D(p) => relu_forward(&conv2d_forward(x, p)?),
        Layer::MaxPool2D => maxpool_forward(x)?.0,
        Layer::Dropout { rate } => dropout_forward(x, *rate, training, rng)?.0,
        Layer::Flatten => flatten_forward(x)?,
        Layer::Dense { params, activation } => {
            let z = dense_forward(x, params)?;
            match activation {
                Activation::Relu => relu_forward(&z),
                Activation::Softmax => softmax(&z)?,
            }
        }
    })
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let width = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks_exact(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}
