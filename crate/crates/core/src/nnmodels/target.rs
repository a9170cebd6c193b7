use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Activation, ConvSpec, Layer, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, ImageShape, LabelBatch, NamedArray};

/// Architectures of the federated classifier under attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    /// conv(3x3) → tanh → conv(3x3, stride 2) → tanh → global pool → linear.
    ConvSmall,
    /// Stem conv plus two residual blocks, the second downsampling.
    ResnetLite,
    /// CIFAR-style ResNet-18 (3x3 stem, no max-pool), without batch norm.
    Resnet18,
    /// A single bias-free linear layer over the flattened image.
    Linear,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [
        ArchId::ConvSmall,
        ArchId::ResnetLite,
        ArchId::Resnet18,
        ArchId::Linear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::ConvSmall => "conv-small",
            ArchId::ResnetLite => "resnet-lite",
            ArchId::Resnet18 => "resnet18",
            ArchId::Linear => "linear",
        }
    }

    /// Smallest height/width the architecture accepts.
    pub fn min_spatial(self) -> usize {
        match self {
            ArchId::ConvSmall | ArchId::ResnetLite | ArchId::Resnet18 => 8,
            ArchId::Linear => 1,
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "architecture",
                name: s.to_string(),
            })
    }
}

/// Randomly initialised classifier `F(·, w)`; parameters never change once built.
#[derive(Debug, Clone)]
pub struct TargetModel {
    arch: ArchId,
    input_shape: ImageShape,
    num_classes: usize,
    init_seed: u64,
    layers: Vec<Layer>,
    params: Vec<NamedArray>,
}

/// Kaiming-uniform bound factor for tanh: gain 5/3 times √3.
const TANH_UNIFORM_GAIN: f64 = 5.0 / 3.0 * 1.732_050_807_568_877_2;

/// Allocates parameter slots with PyTorch-style uniform(±1/√fan_in) init.
struct ParamBuilder {
    rng: ChaCha8Rng,
    params: Vec<NamedArray>,
    /// Weight bound is `weight_gain / √fan_in`; biases always use `1 / √fan_in`.
    weight_gain: f64,
}

impl ParamBuilder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            weight_gain: 1.0,
        }
    }

    fn with_weight_gain(&mut self, gain: f64) -> &mut Self {
        self.weight_gain = gain;
        self
    }

    fn alloc(&mut self, name: String, shape: Vec<usize>, fan_in: usize, gain: f64) -> usize {
        let bound = gain / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params.push(NamedArray { name, shape, data });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Layer {
        let fan_in = cin * k * k;
        let weight = self.alloc(format!("{name}.weight"), vec![cout, cin, k, k], fan_in, self.weight_gain);
        let bias = bias.then(|| self.alloc(format!("{name}.bias"), vec![cout], fan_in, 1.0));
        Layer::Conv2d(ConvSpec {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: k / 2,
        })
    }

    fn linear(&mut self, name: &str, nin: usize, nout: usize, bias: bool) -> Layer {
        let weight = self.alloc(format!("{name}.weight"), vec![nout, nin], nin, self.weight_gain);
        let bias = bias.then(|| self.alloc(format!("{name}.bias"), vec![nout], nin, 1.0));
        Layer::Linear {
            weight,
            bias,
            in_features: nin,
            out_features: nout,
        }
    }

    fn basic_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        let body = vec![
            self.conv(&format!("{name}.conv1"), cin, cout, 3, stride, true),
            Layer::Act(Activation::Relu),
            self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true),
        ];
        let shortcut = if stride != 1 || cin != cout {
            vec![self.conv(&format!("{name}.shortcut"), cin, cout, 1, stride, true)]
        } else {
            Vec::new()
        };
        Layer::Residual { body, shortcut }
    }
}

impl TargetModel {
    pub fn build(arch: ArchId, input_shape: ImageShape, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if input_shape.is_empty() {
            return Err(Error::Shape(format!("degenerate input shape {input_shape}")));
        }
        let min = arch.min_spatial();
        if input_shape.height < min || input_shape.width < min {
            return Err(Error::Shape(format!(
                "{arch} needs at least {min}x{min} inputs, got {}x{}",
                input_shape.height, input_shape.width
            )));
        }
        let c = input_shape.channels;
        let mut pb = ParamBuilder::new(seed);
        let relu = || Layer::Act(Activation::Relu);
        let layers = match arch {
            ArchId::ConvSmall => vec![
                pb.with_weight_gain(TANH_UNIFORM_GAIN).conv("conv1", c, 16, 3, 1, true),
                Layer::Act(Activation::Tanh),
                pb.conv("conv2", 16, 32, 3, 2, true),
                Layer::Act(Activation::Tanh),
                Layer::GlobalAvgPool,
                pb.linear("fc", 32, num_classes, true),
            ],
            ArchId::ResnetLite => vec![
                pb.conv("stem", c, 16, 3, 1, true),
                relu(),
                pb.basic_block("block1", 16, 16, 1),
                relu(),
                pb.basic_block("block2", 16, 32, 2),
                relu(),
                Layer::GlobalAvgPool,
                pb.linear("fc", 32, num_classes, true),
            ],
            ArchId::Resnet18 => {
                let mut layers = vec![pb.conv("stem", c, 64, 3, 1, true), relu()];
                let mut cin = 64;
                for (stage, &width) in [64, 128, 256, 512].iter().enumerate() {
                    for block in 0..2 {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        let name = format!("layer{}.{block}", stage + 1);
                        layers.push(pb.basic_block(&name, cin, width, stride));
                        layers.push(relu());
                        cin = width;
                    }
                }
                layers.push(Layer::GlobalAvgPool);
                layers.push(pb.linear("fc", 512, num_classes, true));
                layers
            }
            ArchId::Linear => vec![pb.linear("fc", input_shape.len(), num_classes, false)],
        };
        Ok(Self {
            arch,
            input_shape,
            num_classes,
            init_seed: seed,
            layers,
            params: pb.params,
        })
    }

    /// Replaces every parameter value, keeping names and shapes.
    pub fn with_parameters(&self, params: Vec<NamedArray>) -> Result<Self> {
        check_same_layout("model parameters", &self.params, &params)?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn parameters(&self) -> &[NamedArray] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(NamedArray::len).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub(crate) fn check_images(&self, images: &ImageBatch) -> Result<()> {
        if images.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "images are {} but the model expects {}",
                images.shape(),
                self.input_shape
            )));
        }
        if images.batch() == 0 {
            return Err(Error::Empty("image batch"));
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, images: &ImageBatch, labels: &LabelBatch) -> Result<()> {
        self.check_images(images)?;
        if labels.len() != images.batch() {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                labels.len(),
                images.batch()
            )));
        }
        labels.check_range(self.num_classes)
    }

    pub(crate) fn image_tensor<T: Scalar>(&self, images: &ImageBatch) -> Tensor<T> {
        let s = self.input_shape;
        Tensor::new(
            vec![images.batch(), s.channels, s.height, s.width],
            images.data().iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    /// Mean cross-entropy, its parameter gradients, and the input gradient.
    pub(crate) fn loss_and_grads<T: Scalar>(
        &self,
        params: &[Vec<T>],
        input: Tensor<T>,
        labels: &[usize],
    ) -> (T, Vec<Vec<T>>, Tensor<T>) {
        let mut tape = Vec::with_capacity(self.layers.len());
        let logits = layers::forward(&self.layers, params, input, Some(&mut tape));
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels);
        let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        let gx = layers::backward(&self.layers, params, tape, dlogits, &mut grads);
        (loss, grads, gx)
    }

    pub(crate) fn param_values(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    pub(crate) fn forward_f64(&self, images: &ImageBatch) -> Tensor<f64> {
        let params = self.param_values();
        layers::forward::<f64>(&self.layers, &params, self.image_tensor(images), None)
    }
}

pub(crate) fn check_same_layout(what: &str, a: &[NamedArray], b: &[NamedArray]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: expected {} arrays, got {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.shape != y.shape || y.data.len() != x.data.len() {
            return Err(Error::Shape(format!(
                "{what}: expected {} {:?}, got {} {:?}",
                x.name, x.shape, y.name, y.shape
            )));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let (b, k) = (logits.dims[0], logits.dims[1]);
    let inv_b = 1.0 / b as f64;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(b * k);
    for (row, &y) in logits.data.chunks_exact(k).zip(labels) {
        // shift by the primal max; the shift cancels exactly in value and tangent
        let m = row.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - T::from_f64(m)).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += z.ln() - (row[y] - T::from_f64(m));
        for (j, &e) in exps.iter().enumerate() {
            let p = e / z;
            let g = if j == y { p - T::one() } else { p };
            grad.push(g.scale(inv_b));
        }
    }
    (loss.scale(inv_b), Tensor::new(vec![b, k], grad))
}

/// Logits `F(x, w)` as a B×K tensor.
pub fn classify(model: &TargetModel, images: &ImageBatch) -> Result<Tensor<f64>> {
    model.check_images(images)?;
    Ok(model.forward_f64(images))
}

/// Batch-mean cross-entropy of `logits` (B×K) against `labels`.
pub fn classification_loss(logits: &Tensor<f64>, labels: &LabelBatch) -> Result<f64> {
    if logits.dims.len() != 2 {
        return Err(Error::Shape(format!("logits must be B×K, got {:?}", logits.dims)));
    }
    if logits.dims[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.dims[0],
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("label batch"));
    }
    labels.check_range(logits.dims[1])?;
    Ok(softmax_cross_entropy(logits, labels.as_slice()).0)
}
