//! Gradient-matching reconstruction.
//!
//! [`gi_smn_attack`] optimises one latent code per image slot through a
//! generator; [`direct_attack`] optimises the pixels themselves. Both share
//! one loop: generate candidates, take their batch gradient on the target
//! model, score it against the observed gradient, add scheduled image
//! priors, and move the variables with Adam under a step-decay learning
//! rate.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::{client_gradient_differentiable, AttackInput, GradientSet};
use crate::gradmatch::{
    combined_aux, combined_aux_grad, compute_consensus, grad_distance_with_grad, schedule_weights, Distance,
    LossSchedule, RegWeights, ScheduleParams,
};
use crate::nnmodels::{Generator, GeneratorTape};
use crate::optim::Adam;
use crate::tensor::{ImageBatch, ImageShape, LatentBatch};

/// Per-channel ImageNet statistics used by [`InitKind::NormalImagenet`].
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// i.i.d. standard normal.
    #[default]
    Randn,
    /// i.i.d. uniform on `[0, 1)`.
    Rand,
    /// Normal with ImageNet channel mean/std; latent entry `j` uses channel `j mod 3`.
    NormalImagenet,
}

impl InitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InitKind::Randn => "randn",
            InitKind::Rand => "rand",
            InitKind::NormalImagenet => "normal-imagenet",
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng, channel: usize) -> f64 {
        match self {
            InitKind::Randn => StandardNormal.sample(rng),
            InitKind::Rand => Uniform::new(0.0, 1.0).expect("valid range").sample(rng),
            InitKind::NormalImagenet => {
                let c = channel % 3;
                Normal::new(IMAGENET_MEAN[c], IMAGENET_STD[c])
                    .expect("positive std")
                    .sample(rng)
            }
        }
    }
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InitKind::Randn, InitKind::Rand, InitKind::NormalImagenet]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "init kind",
                name: s.to_string(),
            })
    }
}

/// Slot `i` draws from its own stream seeded with `seed + i`, so a batch
/// slot can be reproduced by a single-image run.
fn slot_rng(seed: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(slot as u64))
}

pub fn init_latents(batch_size: usize, dim: usize, kind: InitKind, seed: u64) -> Result<LatentBatch> {
    if dim == 0 {
        return Err(Error::InvalidArgument("latent dim must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(batch_size * dim);
    for slot in 0..batch_size {
        let mut rng = slot_rng(seed, slot);
        data.extend((0..dim).map(|j| kind.sample(&mut rng, j)));
    }
    LatentBatch::new(batch_size, dim, data)
}

/// Initial pixels for the direct attack, clamped into `[0, 1]`.
pub fn init_pixels(batch_size: usize, shape: ImageShape, kind: InitKind, seed: u64) -> Result<ImageBatch> {
    let plane = shape.height * shape.width;
    let mut data = Vec::with_capacity(batch_size * shape.len());
    for slot in 0..batch_size {
        let mut rng = slot_rng(seed, slot);
        data.extend((0..shape.len()).map(|j| kind.sample(&mut rng, j / plane)));
    }
    ImageBatch::from_clamped(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub total_iters: usize,
    pub base_lr: f64,
    /// Fractions of `total_iters` at which the learning rate decays.
    pub lr_milestones: Vec<f64>,
    pub lr_decay_factor: f64,
    pub distance: Distance,
    pub reg_weights: RegWeights,
    pub schedule: LossSchedule,
    pub consensus_period: usize,
    pub init_kind: InitKind,
    pub seed: u64,
    /// Compare gradients only where the observed gradient is nonzero.
    pub match_support: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            total_iters: 4000,
            base_lr: 0.1,
            lr_milestones: vec![3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0],
            lr_decay_factor: 0.1,
            distance: Distance::Mse,
            reg_weights: RegWeights::default(),
            schedule: LossSchedule::default(),
            consensus_period: 100,
            init_kind: InitKind::Randn,
            seed: 1314,
            match_support: true,
        }
    }
}

impl AttackConfig {
    /// Defaults for pixel-space reconstruction: cosine distance, TV prior only.
    pub fn direct() -> Self {
        Self {
            distance: Distance::Cosine,
            reg_weights: RegWeights::tv_only(1e-6),
            ..Self::default()
        }
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        self.schedule.with_total(self.total_iters)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::InvalidArgument("total_iters must be >= 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("base_lr {} must be > 0", self.base_lr)));
        }
        let mut prev = 0.0;
        for &m in &self.lr_milestones {
            if !(m > prev && m < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "lr milestones {:?} must be strictly increasing in (0, 1)",
                    self.lr_milestones
                )));
            }
            prev = m;
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::InvalidArgument("lr_decay_factor must be > 0".into()));
        }
        if self.consensus_period == 0 {
            return Err(Error::InvalidArgument("consensus_period must be >= 1".into()));
        }
        self.reg_weights.validate()?;
        self.schedule_params().validate()
    }
}

/// `base_lr · decay^(number of milestones m with m ≤ t/T)`.
pub fn lr_at(t: usize, config: &AttackConfig) -> Result<f64> {
    let total = config.total_iters;
    if t >= total {
        return Err(Error::InvalidArgument(format!("iteration {t} outside [0, {total})")));
    }
    let passed = config
        .lr_milestones
        .iter()
        .filter(|&&m| {
            let at = m * total as f64;
            t as f64 >= at - 1e-9 * at.max(1.0)
        })
        .count();
    Ok(config.base_lr * config.lr_decay_factor.powi(passed as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iter: usize,
    /// Unweighted gradient distance.
    pub grad_loss: f64,
    /// Scheduled regularizer contribution `w_aux · R_aux`.
    pub aux_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub images: ImageBatch,
    /// Absent for the direct attack.
    pub final_latents: Option<LatentBatch>,
    pub trajectory: Vec<TrajectoryRow>,
    pub iters_run: usize,
    /// Iterations at which the group consensus was (re)built.
    pub consensus_updates: Vec<usize>,
}

pub fn write_trajectory_csv<W: Write>(mut out: W, rows: &[TrajectoryRow]) -> std::io::Result<()> {
    writeln!(out, "iter,grad_loss,aux_loss,lr")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.iter, r.grad_loss, r.aux_loss, r.lr)?;
    }
    Ok(())
}

/// Nonzero pattern of `observed`; `None` when disabled or fully dense.
fn observed_support(observed: &GradientSet, enabled: bool) -> Option<Vec<bool>> {
    if !enabled || observed.values().all(|v| v != 0.0) {
        return None;
    }
    Some(observed.values().map(|v| v != 0.0).collect())
}

fn mask_gradient(g: &GradientSet, mask: &[bool]) -> Result<GradientSet> {
    let flat: Vec<f64> = g.flatten().iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    g.with_flat(&flat)
}

enum Variable<'g> {
    Latent {
        generator: &'g Generator,
        latents: LatentBatch,
    },
    Pixels(ImageBatch),
}

/// Mid-run state of one attack; advance it with [`AttackState::step`].
pub struct AttackState<'a> {
    input: &'a AttackInput<'a>,
    config: &'a AttackConfig,
    schedule: ScheduleParams,
    reg_weights: RegWeights,
    variable: Variable<'a>,
    optimizer: Adam,
    t: usize,
    consensus: Option<ImageBatch>,
    consensus_updates: Vec<usize>,
    trajectory: Vec<TrajectoryRow>,
    /// Observed-gradient support, when restricted matching applies.
    support: Option<Vec<bool>>,
}

impl<'a> AttackState<'a> {
    /// Latent-space state with codes drawn per `config.init_kind`/`seed`.
    pub fn latent(input: &'a AttackInput<'a>, generator: &'a Generator, config: &'a AttackConfig) -> Result<Self> {
        let z = init_latents(input.batch_size, generator.latent_dim(), config.init_kind, config.seed)?;
        Self::latent_from(input, generator, config, z)
    }

    pub fn latent_from(
        input: &'a AttackInput<'a>,
        generator: &'a Generator,
        config: &'a AttackConfig,
        latents: LatentBatch,
    ) -> Result<Self> {
        config.validate()?;
        if generator.output_shape() != input.model.input_shape() {
            return Err(Error::Shape(format!(
                "generator produces {} but the model expects {}",
                generator.output_shape(),
                input.model.input_shape()
            )));
        }
        if latents.batch() != input.batch_size || latents.dim() != generator.latent_dim() {
            return Err(Error::Shape(format!(
                "{}x{} latents for batch {} / width {}",
                latents.batch(),
                latents.dim(),
                input.batch_size,
                generator.latent_dim()
            )));
        }
        Ok(Self::with_variable(
            input,
            config,
            config.reg_weights,
            Variable::Latent { generator, latents },
        ))
    }

    /// Pixel-space state with images drawn per `config.init_kind`/`seed`.
    pub fn direct(input: &'a AttackInput<'a>, config: &'a AttackConfig) -> Result<Self> {
        let x = init_pixels(input.batch_size, input.model.input_shape(), config.init_kind, config.seed)?;
        Self::direct_from(input, config, x)
    }

    pub fn direct_from(input: &'a AttackInput<'a>, config: &'a AttackConfig, images: ImageBatch) -> Result<Self> {
        config.validate()?;
        if images.shape() != input.model.input_shape() || images.batch() != input.batch_size {
            return Err(Error::Shape(format!(
                "{} initial {} images for batch {} of {}",
                images.batch(),
                images.shape(),
                input.batch_size,
                input.model.input_shape()
            )));
        }
        let tv_only = RegWeights::tv_only(config.reg_weights.alpha_tv);
        let weights = RegWeights {
            tv_pairs_twice: config.reg_weights.tv_pairs_twice,
            ..tv_only
        };
        Ok(Self::with_variable(input, config, weights, Variable::Pixels(images)))
    }

    fn with_variable(
        input: &'a AttackInput<'a>,
        config: &'a AttackConfig,
        reg_weights: RegWeights,
        variable: Variable<'a>,
    ) -> Self {
        let len = match &variable {
            Variable::Latent { latents, .. } => latents.data().len(),
            Variable::Pixels(x) => x.data().len(),
        };
        Self {
            input,
            config,
            schedule: config.schedule_params(),
            reg_weights,
            variable,
            optimizer: Adam::new(len),
            t: 0,
            consensus: None,
            consensus_updates: Vec::new(),
            trajectory: Vec::with_capacity(config.total_iters),
            support: observed_support(&input.observed_gradient, config.match_support),
        }
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.total_iters
    }

    pub fn latents(&self) -> Option<&LatentBatch> {
        match &self.variable {
            Variable::Latent { latents, .. } => Some(latents),
            Variable::Pixels(_) => None,
        }
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    pub fn consensus_updates(&self) -> &[usize] {
        &self.consensus_updates
    }

    /// Current candidate images.
    pub fn images(&self) -> Result<ImageBatch> {
        match &self.variable {
            Variable::Latent { generator, latents } => generator.generate(latents),
            Variable::Pixels(x) => Ok(x.clone()),
        }
    }

    /// One iteration at the scheduled learning rate.
    pub fn step(&mut self) -> Result<()> {
        let lr = lr_at(self.t, self.config)?;
        self.step_with_lr(lr)
    }

    /// One iteration with an explicit learning rate in place of the schedule.
    pub fn step_with_lr(&mut self, lr: f64) -> Result<()> {
        let t = self.t;
        let (w_grad, w_aux) = schedule_weights(t, &self.schedule)?;

        let (x, gen_tape): (ImageBatch, Option<GeneratorTape>) = match &self.variable {
            Variable::Latent { generator, latents } => {
                let (x, tape) = generator.generate_taped(latents)?;
                (x, Some(tape))
            }
            Variable::Pixels(x) => (x.clone(), None),
        };

        if t >= self.schedule.transition()
            && gen_tape.is_some()
            && (self.consensus.is_none() || t % self.config.consensus_period == 0)
        {
            self.consensus = Some(compute_consensus(&x)?);
            self.consensus_updates.push(t);
        }

        let dummy = client_gradient_differentiable(self.input.model, &x, &self.input.labels)?;
        let masked;
        let dummy_grad = match &self.support {
            Some(mask) => {
                masked = mask_gradient(dummy.gradient(), mask)?;
                &masked
            }
            None => dummy.gradient(),
        };
        let (distance, mut d_dist) = grad_distance_with_grad(self.config.distance, dummy_grad, &self.input.observed_gradient)
            .map_err(|e| match e {
                Error::DegenerateCosine(why) => Error::InvalidArgument(format!("iteration {t}: cosine distance undefined, {why}")),
                other => other,
            })?;
        if let Some(mask) = &self.support {
            d_dist = mask_gradient(&d_dist, mask)?;
        }
        let mut grad_x = if w_grad != 0.0 {
            let mut g = dummy.pullback(&d_dist)?;
            g.iter_mut().for_each(|v| *v *= w_grad);
            g
        } else {
            vec![0.0; x.data().len()]
        };

        let mut aux = 0.0;
        if w_aux != 0.0 {
            let consensus = self.consensus.as_ref();
            aux = w_aux * combined_aux(&x, &self.reg_weights, consensus)?;
            for (g, a) in grad_x.iter_mut().zip(combined_aux_grad(&x, &self.reg_weights, consensus)?) {
                *g += w_aux * a;
            }
        }

        let total = w_grad * distance + aux;
        if !total.is_finite() || grad_x.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iter: t });
        }
        self.trajectory.push(TrajectoryRow {
            iter: t,
            grad_loss: distance,
            aux_loss: aux,
            lr,
        });

        match &mut self.variable {
            Variable::Latent { generator, latents } => {
                let tape = gen_tape.expect("latent mode records a generator tape");
                let gz = generator.pullback(tape, &grad_x)?;
                self.optimizer.step(latents.data_mut(), &gz, lr);
                if latents.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLoss { iter: t });
                }
            }
            Variable::Pixels(x) => {
                let mut data = x.data().to_vec();
                self.optimizer.step(&mut data, &grad_x, lr);
                *x = ImageBatch::from_clamped(x.shape(), data)?;
            }
        }
        self.t += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<ReconstructionResult> {
        let images = self.images()?;
        let final_latents = match self.variable {
            Variable::Latent { latents, .. } => Some(latents),
            Variable::Pixels(_) => None,
        };
        Ok(ReconstructionResult {
            images,
            final_latents,
            iters_run: self.trajectory.len(),
            trajectory: self.trajectory,
            consensus_updates: self.consensus_updates,
        })
    }

    /// Steps until `total_iters`.
    pub fn run(mut self) -> Result<ReconstructionResult> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }
}

/// Advances `state` by exactly one iteration.
pub fn attack_step(mut state: AttackState<'_>) -> Result<AttackState<'_>> {
    state.step()?;
    Ok(state)
}

/// Latent-code optimisation through `generator`.
pub fn gi_smn_attack(input: &AttackInput<'_>, generator: &Generator, config: &AttackConfig) -> Result<ReconstructionResult> {
    AttackState::latent(input, generator, config)?.run()
}

/// Pixel-space optimisation (TV prior only, pixels clamped after each step).
pub fn direct_attack(input: &AttackInput<'_>, config: &AttackConfig) -> Result<ReconstructionResult> {
    AttackState::direct(input, config)?.run()
}
