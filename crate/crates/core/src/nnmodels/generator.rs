//! Desk-scale latent-to-image generator.
//!
//! Mapping: pixel-norm → 2 × (linear d→d, leaky ReLU) produces a style code.
//! Synthesis: linear style → `base_channels`×s₀×s₀, then up to three
//! stride-2 transposed convolutions, a 3x3 conv to the output channels and a
//! sigmoid, so every pixel lies in `[0, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::{self, Activation, ConvSpec, Layer, Tape, Tensor};
use super::target::check_same_layout;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{ImageBatch, ImageShape, LatentBatch, NamedArray};

pub const DEFAULT_LATENT_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            base_channels: 64,
            seed: 0,
        }
    }
}

/// `G`: maps latent codes to images in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    output_shape: ImageShape,
    layers: Vec<Layer>,
    weights: Vec<NamedArray>,
    trained: bool,
}

/// Tape of one generator forward pass, needed to pull image gradients back
/// to the latents.
pub struct GeneratorTape {
    tape: Vec<Tape<f64>>,
    batch: usize,
}

struct WeightBuilder {
    rng: ChaCha8Rng,
    weights: Vec<NamedArray>,
}

impl WeightBuilder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("positive bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.weights.push(NamedArray { name, shape, data });
        self.weights.len() - 1
    }

    fn linear(&mut self, name: &str, nin: usize, nout: usize) -> Layer {
        let weight = self.alloc(format!("{name}.weight"), vec![nout, nin], nin);
        let bias = Some(self.alloc(format!("{name}.bias"), vec![nout], nin));
        Layer::Linear {
            weight,
            bias,
            in_features: nin,
            out_features: nout,
        }
    }

    fn conv(&mut self, name: &str, transpose: bool, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Layer {
        let (shape, fan_in) = if transpose {
            (vec![cin, cout, k, k], cin * k * k / (s * s))
        } else {
            (vec![cout, cin, k, k], cin * k * k)
        };
        let weight = self.alloc(format!("{name}.weight"), shape, fan_in.max(1));
        let bias = Some(self.alloc(format!("{name}.bias"), vec![cout], fan_in.max(1)));
        let spec = ConvSpec {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
        };
        if transpose {
            Layer::ConvTranspose2d(spec)
        } else {
            Layer::Conv2d(spec)
        }
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig, output_shape: ImageShape) -> Result<Self> {
        if config.latent_dim == 0 || config.base_channels == 0 {
            return Err(Error::InvalidArgument(
                "latent_dim and base_channels must be >= 1".into(),
            ));
        }
        if output_shape.is_empty() {
            return Err(Error::Shape(format!("degenerate output shape {output_shape}")));
        }
        let d = config.latent_dim;
        let (mut h0, mut w0, mut ups) = (output_shape.height, output_shape.width, 0);
        while ups < 3 && h0 % 2 == 0 && w0 % 2 == 0 && h0 >= 4 && w0 >= 4 {
            h0 /= 2;
            w0 /= 2;
            ups += 1;
        }
        let mut wb = WeightBuilder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            weights: Vec::new(),
        };
        let leaky = || Layer::Act(Activation::LeakyRelu);
        let mut layers = vec![
            Layer::PixelNorm,
            wb.linear("mapping.fc1", d, d),
            leaky(),
            wb.linear("mapping.fc2", d, d),
            leaky(),
        ];
        let mut ch = config.base_channels;
        layers.push(wb.linear("synthesis.const", d, ch * h0 * w0));
        layers.push(Layer::Reshape {
            channels: ch,
            height: h0,
            width: w0,
        });
        layers.push(leaky());
        for i in 0..ups {
            let next = (ch / 2).max(8);
            layers.push(wb.conv(&format!("synthesis.up{i}"), true, ch, next, 4, 2, 1));
            layers.push(leaky());
            ch = next;
        }
        layers.push(wb.conv("synthesis.to_image", false, ch, output_shape.channels, 3, 1, 1));
        layers.push(Layer::Act(Activation::Sigmoid));
        Ok(Self {
            config,
            output_shape,
            layers,
            weights: wb.weights,
            trained: false,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn output_shape(&self) -> ImageShape {
        self.output_shape
    }

    pub fn weights(&self) -> &[NamedArray] {
        &self.weights
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn with_weights(&self, weights: Vec<NamedArray>, trained: bool) -> Result<Self> {
        check_same_layout("generator weights", &self.weights, &weights)?;
        Ok(Self {
            weights,
            trained,
            ..self.clone()
        })
    }

    fn check_latents(&self, latents: &LatentBatch) -> Result<()> {
        if latents.dim() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent width {} but generator expects {}",
                latents.dim(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    fn values(&self) -> Vec<Vec<f64>> {
        self.weights.iter().map(|w| w.data.clone()).collect()
    }

    fn latent_tensor(latents: &LatentBatch) -> Tensor<f64> {
        Tensor::new(vec![latents.batch(), latents.dim()], latents.data().to_vec())
    }

    fn to_images(&self, t: Tensor<f64>) -> Result<ImageBatch> {
        ImageBatch::new(self.output_shape, t.data)
    }

    /// `x = G(z)`; deterministic in (weights, latents).
    pub fn generate(&self, latents: &LatentBatch) -> Result<ImageBatch> {
        self.check_latents(latents)?;
        let out = layers::forward(&self.layers, &self.values(), Self::latent_tensor(latents), None);
        self.to_images(out)
    }

    /// Like [`generate`](Self::generate) but keeps what
    /// [`pullback`](Self::pullback) needs.
    pub fn generate_taped(&self, latents: &LatentBatch) -> Result<(ImageBatch, GeneratorTape)> {
        self.check_latents(latents)?;
        let mut tape = Vec::with_capacity(self.layers.len());
        let out = layers::forward(
            &self.layers,
            &self.values(),
            Self::latent_tensor(latents),
            Some(&mut tape),
        );
        Ok((
            self.to_images(out)?,
            GeneratorTape {
                tape,
                batch: latents.batch(),
            },
        ))
    }

    /// Vector-Jacobian product `J_G(z)ᵀ · grad_images`, flat B×d.
    pub fn pullback(&self, tape: GeneratorTape, grad_images: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pullback_full(tape, grad_images)?.0)
    }

    fn pullback_full(&self, tape: GeneratorTape, grad_images: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let s = self.output_shape;
        if grad_images.len() != tape.batch * s.len() {
            return Err(Error::Shape(format!(
                "image gradient has {} values, expected {}",
                grad_images.len(),
                tape.batch * s.len()
            )));
        }
        let params = self.values();
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let g = Tensor::new(
            vec![tape.batch, s.channels, s.height, s.width],
            grad_images.to_vec(),
        );
        let gz = layers::backward(&self.layers, &params, tape.tape, g, &mut grads);
        Ok((gz.data, grads))
    }

    /// Jointly fits the weights and one free latent code per training image
    /// to minimise mean squared reconstruction error (full-batch Adam).
    pub fn fit(&self, dataset: &ImageBatch, options: &PretrainOptions) -> Result<PretrainReport> {
        if dataset.batch() == 0 {
            return Err(Error::Empty("training set"));
        }
        if dataset.shape() != self.output_shape {
            return Err(Error::Shape(format!(
                "training images are {} but the generator produces {}",
                dataset.shape(),
                self.output_shape
            )));
        }
        let n = dataset.batch();
        let d = self.config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let codes: Vec<f64> = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut codes = LatentBatch::new(n, d, codes)?;
        let mut gen = self.clone();
        let initial_mse = reconstruction_mse(&gen.generate(&codes)?, dataset);
        if options.epochs == 0 {
            return Ok(PretrainReport {
                generator: gen,
                codes,
                initial_mse,
                final_mse: initial_mse,
            });
        }

        let mut flat_w: Vec<f64> = gen.weights.iter().flat_map(|w| w.data.iter().copied()).collect();
        let mut opt_w = Adam::new(flat_w.len());
        let mut opt_z = Adam::new(n * d);
        let scale = 2.0 / dataset.data().len() as f64;
        for _ in 0..options.epochs {
            let (x, tape) = gen.generate_taped(&codes)?;
            let gx: Vec<f64> = x
                .data()
                .iter()
                .zip(dataset.data())
                .map(|(a, b)| scale * (a - b))
                .collect();
            let (gz, gw) = gen.pullback_full(tape, &gx)?;
            let gw: Vec<f64> = gw.into_iter().flatten().collect();
            opt_w.step(&mut flat_w, &gw, options.lr);
            opt_z.step(codes.data_mut(), &gz, options.lr);
            let mut off = 0;
            for w in &mut gen.weights {
                let len = w.data.len();
                w.data.copy_from_slice(&flat_w[off..off + len]);
                off += len;
            }
        }
        gen.trained = true;
        let final_mse = reconstruction_mse(&gen.generate(&codes)?, dataset);
        Ok(PretrainReport {
            generator: gen,
            codes,
            initial_mse,
            final_mse,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1500,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub generator: Generator,
    /// Learned code of every training image, in dataset order.
    pub codes: LatentBatch,
    pub initial_mse: f64,
    pub final_mse: f64,
}

fn reconstruction_mse(a: &ImageBatch, b: &ImageBatch) -> f64 {
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

/// Trains `generator` on `dataset` for `epochs` full-batch steps.
pub fn pretrain_generator(generator: &Generator, dataset: &ImageBatch, epochs: usize, seed: u64) -> Result<Generator> {
    let options = PretrainOptions {
        epochs,
        seed,
        ..PretrainOptions::default()
    };
    Ok(generator.fit(dataset, &options)?.generator)
}

/// `G(z)` for a batch of latents.
pub fn generate(generator: &Generator, latents: &LatentBatch) -> Result<ImageBatch> {
    generator.generate(latents)
}

/// Finds latents whose decodings approximate `targets` under pixel MSE.
pub fn project_latents(
    generator: &Generator,
    targets: &ImageBatch,
    init: LatentBatch,
    iters: usize,
    lr: f64,
) -> Result<LatentBatch> {
    if targets.shape() != generator.output_shape() || targets.batch() != init.batch() {
        return Err(Error::Shape("targets do not match generator/latents".into()));
    }
    let mut z = init;
    let mut opt = Adam::new(z.data().len());
    let scale = 2.0 / targets.data().len() as f64;
    for _ in 0..iters {
        let (x, tape) = generator.generate_taped(&z)?;
        let gx: Vec<f64> = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(a, b)| scale * (a - b))
            .collect();
        let gz = generator.pullback(tape, &gx)?;
        opt.step(z.data_mut(), &gz, lr);
    }
    Ok(z)
}
