//! Small convolutional identity classifiers.
//!
//! Three stock architectures stand in for the large face-recognition
//! networks: `cnn-a` and `cnn-b` read 32x32 inputs, `cnn-c` reads 48x48 so
//! that cross-model evaluation has to pass through a resize.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{accuracy, train, EpochMetrics, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Image, CHANNELS};
use crate::tensor::{Parameter, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("architecture `{name}` layer {layer}: {reason}")]
    InconsistentDescriptor { name: String, layer: usize, reason: String },
    #[error("unknown architecture `{0}` (expected cnn-a, cnn-b or cnn-c)")]
    UnknownArchitecture(String),
    #[error("image is {height}x{width} but model `{model}` expects {expected}x{expected}; resize it with pipeline::resize first")]
    InputSize {
        model: String,
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("k = {k} outside 1..={classes}")]
    InvalidK { k: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training setting: {0}")]
    InvalidTraining(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDescriptor {
    pub name: String,
    /// Side of the square RGB input, in pixels.
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

pub const STOCK_ARCHITECTURES: [&str; 3] = ["cnn-a", "cnn-b", "cnn-c"];

fn conv(in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

const POOL: LayerSpec = LayerSpec::MaxPool { kernel: 2, stride: 2 };

impl ArchitectureDescriptor {
    /// Two conv blocks on 32x32 input.
    pub fn cnn_a(num_classes: usize) -> Self {
        Self {
            name: "cnn-a".into(),
            input_size: 32,
            layers: vec![
                conv(3, 8),
                LayerSpec::Relu,
                POOL,
                conv(8, 16),
                LayerSpec::Relu,
                POOL,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 16 * 8 * 8,
                    out_features: num_classes,
                },
            ],
            num_classes,
        }
    }

    /// Three conv blocks and a hidden dense layer on 32x32 input.
    pub fn cnn_b(num_classes: usize) -> Self {
        Self {
            name: "cnn-b".into(),
            input_size: 32,
            layers: vec![
                conv(3, 8),
                LayerSpec::Relu,
                POOL,
                conv(8, 16),
                LayerSpec::Relu,
                POOL,
                conv(16, 32),
                LayerSpec::Relu,
                POOL,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 32 * 4 * 4,
                    out_features: 64,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_features: 64,
                    out_features: num_classes,
                },
            ],
            num_classes,
        }
    }

    /// Two conv blocks on 48x48 input.
    pub fn cnn_c(num_classes: usize) -> Self {
        Self {
            name: "cnn-c".into(),
            input_size: 48,
            layers: vec![
                conv(3, 8),
                LayerSpec::Relu,
                POOL,
                conv(8, 16),
                LayerSpec::Relu,
                POOL,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 16 * 12 * 12,
                    out_features: num_classes,
                },
            ],
            num_classes,
        }
    }

    pub fn stock(arch: &str, num_classes: usize) -> Result<Self> {
        match arch {
            "cnn-a" => Ok(Self::cnn_a(num_classes)),
            "cnn-b" => Ok(Self::cnn_b(num_classes)),
            "cnn-c" => Ok(Self::cnn_c(num_classes)),
            other => Err(ModelError::UnknownArchitecture(other.to_string())),
        }
    }

    fn fail(&self, layer: usize, reason: String) -> ModelError {
        ModelError::InconsistentDescriptor {
            name: self.name.clone(),
            layer,
            reason,
        }
    }

    /// Walks the layer list and checks that shapes chain from the input
    /// image to `num_classes` logits. Reports the first offending layer.
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(self.fail(0, "input_size must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(self.fail(0, "num_classes must be positive".into()));
        }
        let mut act = Activation::Spatial {
            c: CHANNELS,
            h: self.input_size,
            w: self.input_size,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            act = match (*layer, act) {
                (
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Activation::Spatial { c, h, w },
                ) => {
                    if in_channels != c {
                        return Err(self.fail(
                            i,
                            format!("conv2d expects {in_channels} input channels but receives {c}"),
                        ));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(self.fail(i, "conv2d needs positive kernel, stride and channels".into()));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(self.fail(i, format!("conv2d kernel {kernel} larger than padded input {h}x{w}")));
                    }
                    Activation::Spatial {
                        c: out_channels,
                        h: (h + 2 * padding - kernel) / stride + 1,
                        w: (w + 2 * padding - kernel) / stride + 1,
                    }
                }
                (LayerSpec::MaxPool { kernel, stride }, Activation::Spatial { c, h, w }) => {
                    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                        return Err(self.fail(i, format!("max_pool window {kernel} does not fit {h}x{w}")));
                    }
                    Activation::Spatial {
                        c,
                        h: (h - kernel) / stride + 1,
                        w: (w - kernel) / stride + 1,
                    }
                }
                (LayerSpec::Relu, a) => a,
                (LayerSpec::Flatten, Activation::Spatial { c, h, w }) => Activation::Flat(c * h * w),
                (LayerSpec::Flatten, a @ Activation::Flat(_)) => a,
                (
                    LayerSpec::Dense {
                        in_features,
                        out_features,
                    },
                    Activation::Flat(n),
                ) => {
                    if in_features != n {
                        return Err(self.fail(i, format!("dense expects {in_features} inputs but receives {n}")));
                    }
                    if out_features == 0 {
                        return Err(self.fail(i, "dense needs positive out_features".into()));
                    }
                    Activation::Flat(out_features)
                }
                (LayerSpec::Dense { .. }, Activation::Spatial { c, h, w }) => {
                    return Err(self.fail(
                        i,
                        format!("dense layer receives spatial {c}x{h}x{w}; add a flatten layer"),
                    ));
                }
                (spec, Activation::Flat(n)) => {
                    return Err(self.fail(
                        i,
                        format!("{spec:?} needs a spatial input but receives a flat vector of {n}"),
                    ));
                }
            };
        }
        match act {
            Activation::Flat(n) if n == self.num_classes => Ok(()),
            Activation::Flat(n) => Err(self.fail(
                self.layers.len().saturating_sub(1),
                format!("network ends in {n} outputs but num_classes is {}", self.num_classes),
            )),
            Activation::Spatial { .. } => Err(self.fail(
                self.layers.len().saturating_sub(1),
                "network must end in a dense layer producing logits".into(),
            )),
        }
    }
}

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_train_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    /// Hash of the settings that produced these weights; used to decide
    /// whether a stored checkpoint can be reused.
    pub config_hash: Option<String>,
}

/// A classifier `C(x)` over `num_classes` identities. Immutable once
/// trained; prediction and gradient queries take `&self` and are safe to run
/// from many threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    descriptor: ArchitectureDescriptor,
    params: Vec<Parameter>,
    provenance: Provenance,
}

/// Loss at an input together with its gradient in pixel units.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub loss: f32,
    pub grad: Image,
}

/// Deterministically initialised model: He-normal weights scaled by fan-in
/// (unit gain for the logit layer), zero-mean conv filters, zero biases.
pub fn build_model(descriptor: &ArchitectureDescriptor, seed: u64) -> Result<Classifier> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (i, layer) in descriptor.layers.iter().enumerate() {
        let (wshape, fan_in, out) = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels,
            ),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => (vec![out_features, in_features], in_features, out_features),
            _ => continue,
        };
        let is_conv = matches!(layer, LayerSpec::Conv2d { .. });
        let gain = if i + 1 == descriptor.layers.len() { 1.0 } else { 2.0 };
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = wshape.iter().product();
        let mut w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        if is_conv {
            // Zero-mean filters respond to image structure rather than to
            // the overall brightness of the non-negative input.
            for filter in w.chunks_mut(fan_in) {
                let mean = filter.iter().map(|&v| f64::from(v)).sum::<f64>() / fan_in as f64;
                filter.iter_mut().for_each(|v| *v -= mean as f32);
            }
        }
        params.push(Parameter::new(format!("layer{i}.weight"), Tensor::new(wshape, w)?));
        params.push(Parameter::new(format!("layer{i}.bias"), Tensor::zeros(&[out])));
    }
    Ok(Classifier {
        descriptor: descriptor.clone(),
        params,
        provenance: Provenance {
            seed,
            ..Provenance::default()
        },
    })
}

impl Classifier {
    pub(crate) fn from_parts(
        descriptor: ArchitectureDescriptor,
        params: Vec<Parameter>,
        provenance: Provenance,
    ) -> Result<Self> {
        let template = build_model(&descriptor, 0)?;
        if template.params.len() != params.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name() != p.name() || t.value().shape() != p.value().shape() {
                return Err(ModelError::Format(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name(),
                    p.value().shape(),
                    t.name(),
                    t.value().shape()
                )));
            }
        }
        Ok(Self {
            descriptor,
            params,
            provenance,
        })
    }

    pub fn id(&self) -> &str {
        &self.descriptor.name
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    pub fn input_size(&self) -> usize {
        self.descriptor.input_size
    }

    pub fn num_classes(&self) -> usize {
        self.descriptor.num_classes
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn provenance_mut(&mut self) -> &mut Provenance {
        &mut self.provenance
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.descriptor.name = name.into();
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let expected = self.descriptor.input_size;
        if image.height() != expected || image.width() != expected {
            return Err(ModelError::InputSize {
                model: self.descriptor.name.clone(),
                expected,
                height: image.height(),
                width: image.width(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Records the network on `tape`. Returns the logits and, when
    /// `trainable`, the parameter leaves in `params()` order.
    pub(crate) fn forward(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut params = self.params.iter();
        let mut next_param = |tape: &mut Tape| {
            let p = params.next().expect("descriptor validated against parameters");
            let v = tape.leaf(p.value().clone().with_requires_grad(trainable));
            leaves.push(v);
            v
        };
        let mut h = input;
        for layer in &self.descriptor.layers {
            h = match *layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let w = next_param(tape);
                    let b = next_param(tape);
                    tape.conv2d(h, w, Some(b), stride, padding)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::MaxPool { kernel, stride } => tape.max_pool2d(h, kernel, stride)?,
                LayerSpec::Flatten => tape.flatten(h)?,
                LayerSpec::Dense { .. } => {
                    let w = next_param(tape);
                    let b = next_param(tape);
                    tape.affine(h, w, Some(b))?
                }
            };
        }
        if !trainable {
            leaves.clear();
        }
        Ok((h, leaves))
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f32>> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.to_model_input());
        let (logits, _) = self.forward(&mut tape, x, false)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Class probabilities for an image already sized to `input_size`.
    /// Pixels are divided by 255 at the model boundary.
    pub fn predict(&self, image: &Image) -> Result<Vec<f32>> {
        let logits = self.logits(image)?;
        Ok(crate::tensor::softmax_f64(&logits)
            .into_iter()
            .map(|p| p as f32)
            .collect())
    }

    /// Cross-entropy `J(x, label)` and its gradient w.r.t. the pixels of `x`
    /// in `[0, 255]` units. Parameters are untouched.
    pub fn loss_and_input_gradient(&self, image: &Image, label: usize) -> Result<InputGradient> {
        self.check_input(image)?;
        self.check_label(label)?;
        let mut tape = Tape::new();
        let x = tape.leaf(image.to_model_input().with_requires_grad(true));
        let (logits, _) = self.forward(&mut tape, x, false)?;
        let loss = tape.cross_entropy(logits, label)?;
        let loss_value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(x).expect("input requires grad");
        let grad = Image::from_model_gradient(&g, image.height(), image.width())?;
        Ok(InputGradient { loss: loss_value, grad })
    }

    /// Cross-entropy of the image against `label`, no gradient.
    pub fn loss(&self, image: &Image, label: usize) -> Result<f32> {
        self.check_label(label)?;
        let logits = self.logits(image)?;
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(logits));
        let loss = tape.cross_entropy(l, label)?;
        Ok(tape.value(loss).item()?)
    }

    /// Least likely class of the clean image, see [`least_likely_from_probs`].
    pub fn least_likely_class(&self, image: &Image, y_true: Option<usize>) -> Result<usize> {
        let probs = self.predict(image)?;
        Ok(least_likely_from_probs(&probs, y_true))
    }
}

/// `∇_x J(x, label)` in pixel units.
pub fn input_gradient(model: &Classifier, x: &Image, label: usize) -> Result<Image> {
    Ok(model.loss_and_input_gradient(x, label)?.grad)
}

/// Labels ordered by descending probability, ties by ascending label.
fn ranked(probs: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// The `k` most probable labels, most probable first; equal probabilities
/// are broken by ascending label index.
pub fn top_k(probs: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(ModelError::InvalidK {
            k,
            classes: probs.len(),
        });
    }
    let mut order = ranked(probs);
    order.truncate(k);
    Ok(order)
}

/// Index of the largest probability (lowest index on ties).
pub fn argmax(probs: &[f32]) -> usize {
    ranked(probs)[0]
}

/// Argmin of `probs` with ties to the lowest label. When the minimum is
/// `exclude` (the true label) and another class exists, the second least
/// likely label is returned instead.
pub fn least_likely_from_probs(probs: &[f32], exclude: Option<usize>) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    match (order.first(), order.get(1)) {
        (Some(&first), Some(&second)) if Some(first) == exclude => second,
        (Some(&first), _) => first,
        (None, _) => 0,
    }
}
