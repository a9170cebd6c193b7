//! Gradient distances, image regularizers and the two-phase loss schedule.
//!
//! Every objective comes with its analytic gradient: distances w.r.t. the
//! dummy gradient, regularizers w.r.t. the image pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::GradientSet;
use crate::tensor::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// Squared Frobenius norm of the difference.
    #[default]
    Mse,
    /// One minus cosine similarity of the flattened gradients.
    Cosine,
    /// Largest absolute entry of the difference.
    Maxabs,
}

impl Distance {
    pub fn as_str(self) -> &'static str {
        match self {
            Distance::Mse => "mse",
            Distance::Cosine => "cosine",
            Distance::Maxabs => "maxabs",
        }
    }
}

pub fn grad_distance_mse(g1: &GradientSet, g2: &GradientSet) -> Result<f64> {
    g1.check_layout(g2)?;
    Ok(g1.values().zip(g2.values()).map(|(a, b)| (a - b) * (a - b)).sum())
}

struct CosineParts {
    dot: f64,
    n1: f64,
    n2: f64,
}

fn cosine_parts(g1: &GradientSet, g2: &GradientSet) -> Result<CosineParts> {
    g1.check_layout(g2)?;
    let (mut dot, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (a, b) in g1.values().zip(g2.values()) {
        dot += a * b;
        s1 += a * a;
        s2 += b * b;
    }
    if s1 == 0.0 && s2 == 0.0 {
        return Err(Error::DegenerateCosine("both gradients are zero"));
    }
    Ok(CosineParts {
        dot,
        n1: s1.sqrt(),
        n2: s2.sqrt(),
    })
}

/// `1 − ⟨g1, g2⟩ / (‖g1‖‖g2‖)`; a zero vector against a nonzero one gives 1.
pub fn grad_distance_cosine(g1: &GradientSet, g2: &GradientSet) -> Result<f64> {
    let p = cosine_parts(g1, g2)?;
    if p.n1 == 0.0 || p.n2 == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - p.dot / (p.n1 * p.n2)).clamp(0.0, 2.0))
}

pub fn grad_distance_maxabs(g1: &GradientSet, g2: &GradientSet) -> Result<f64> {
    g1.check_layout(g2)?;
    Ok(g1.values().zip(g2.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

pub fn grad_distance(kind: Distance, g1: &GradientSet, g2: &GradientSet) -> Result<f64> {
    match kind {
        Distance::Mse => grad_distance_mse(g1, g2),
        Distance::Cosine => grad_distance_cosine(g1, g2),
        Distance::Maxabs => grad_distance_maxabs(g1, g2),
    }
}

/// Distance value and its gradient with respect to `dummy`.
///
/// For `Maxabs` the gradient is the subgradient at the first maximising
/// entry. For `Cosine` a zero `dummy` is an error: the direction is
/// undefined there.
pub fn grad_distance_with_grad(kind: Distance, dummy: &GradientSet, observed: &GradientSet) -> Result<(f64, GradientSet)> {
    let a = dummy.flatten();
    let b = observed.flatten();
    let (value, grad) = match kind {
        Distance::Mse => {
            dummy.check_layout(observed)?;
            let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            (diff.iter().map(|d| d * d).sum(), diff.iter().map(|d| 2.0 * d).collect())
        }
        Distance::Cosine => {
            let p = cosine_parts(dummy, observed)?;
            if p.n1 == 0.0 {
                return Err(Error::DegenerateCosine("dummy gradient is zero"));
            }
            if p.n2 == 0.0 {
                (1.0, vec![0.0; a.len()])
            } else {
                let s = p.dot / (p.n1 * p.n2);
                let inv = 1.0 / (p.n1 * p.n2);
                let k = s / (p.n1 * p.n1);
                let g = a.iter().zip(&b).map(|(x, y)| -(y * inv - k * x)).collect();
                ((1.0 - s).clamp(0.0, 2.0), g)
            }
        }
        Distance::Maxabs => {
            dummy.check_layout(observed)?;
            let mut best = (0usize, 0.0f64);
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                if (x - y).abs() > best.1 {
                    best = (i, (x - y).abs());
                }
            }
            let mut g = vec![0.0; a.len()];
            if best.1 > 0.0 {
                g[best.0] = (a[best.0] - b[best.0]).signum();
            }
            (best.1, g)
        }
    };
    Ok((value, dummy.with_flat(&grad)?))
}

/// Weights of the three image priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegWeights {
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_group: f64,
    /// Count every unordered neighbour pair twice in TV (full 4-neighbourhood).
    pub tv_pairs_twice: bool,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            alpha_tv: 1e-4,
            alpha_l2: 1e-4,
            alpha_group: 1e-4,
            tv_pairs_twice: false,
        }
    }
}

impl RegWeights {
    pub fn tv_only(alpha_tv: f64) -> Self {
        Self {
            alpha_tv,
            alpha_l2: 0.0,
            alpha_group: 0.0,
            tv_pairs_twice: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("alpha_group", self.alpha_group),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Σ over right/down neighbour pairs of squared differences, all channels and images.
pub fn tv_regularizer(images: &ImageBatch) -> f64 {
    let s = images.shape();
    let (h, w) = (s.height, s.width);
    let mut total = 0.0;
    for plane in images.data().chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if x + 1 < w {
                    total += (v - plane[y * w + x + 1]).powi(2);
                }
                if y + 1 < h {
                    total += (v - plane[(y + 1) * w + x]).powi(2);
                }
            }
        }
    }
    total
}

pub fn tv_regularizer_grad(images: &ImageBatch) -> Vec<f64> {
    let s = images.shape();
    let (h, w) = (s.height, s.width);
    let mut grad = vec![0.0; images.data().len()];
    for (plane, g) in images.data().chunks_exact(h * w).zip(grad.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = 2.0 * (plane[i] - plane[i + 1]);
                    g[i] += d;
                    g[i + 1] -= d;
                }
                if y + 1 < h {
                    let d = 2.0 * (plane[i] - plane[i + w]);
                    g[i] += d;
                    g[i + w] -= d;
                }
            }
        }
    }
    grad
}

/// Σ over images of ‖xᵢ‖².
pub fn l2_regularizer(images: &ImageBatch) -> f64 {
    images.data().iter().map(|v| v * v).sum()
}

pub fn l2_regularizer_grad(images: &ImageBatch) -> Vec<f64> {
    images.data().iter().map(|v| 2.0 * v).collect()
}

/// Pixelwise mean over the batch, as a one-image batch.
pub fn compute_consensus(images: &ImageBatch) -> Result<ImageBatch> {
    if images.batch() == 0 {
        return Err(Error::Empty("image batch"));
    }
    let n = images.shape().len();
    let mut mean = vec![0.0; n];
    for img in images.images() {
        for (m, v) in mean.iter_mut().zip(img) {
            *m += v;
        }
    }
    let inv = 1.0 / images.batch() as f64;
    ImageBatch::from_clamped(images.shape(), mean.into_iter().map(|m| m * inv).collect())
}

fn check_consensus(images: &ImageBatch, consensus: &ImageBatch) -> Result<()> {
    if consensus.shape() != images.shape() || consensus.batch() != 1 {
        return Err(Error::Shape(format!(
            "consensus must be one {} image, got {} of {}",
            images.shape(),
            consensus.batch(),
            consensus.shape()
        )));
    }
    Ok(())
}

/// Σᵢ ‖xᵢ − consensus‖²; the consensus is treated as a constant.
pub fn group_regularizer(images: &ImageBatch, consensus: &ImageBatch) -> Result<f64> {
    check_consensus(images, consensus)?;
    let c = consensus.image(0);
    Ok(images
        .images()
        .map(|img| img.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum())
}

pub fn group_regularizer_grad(images: &ImageBatch, consensus: &ImageBatch) -> Result<Vec<f64>> {
    check_consensus(images, consensus)?;
    let c = consensus.image(0);
    Ok(images
        .images()
        .flat_map(|img| img.iter().zip(c).map(|(a, b)| 2.0 * (a - b)))
        .collect())
}

fn tv_factor(weights: &RegWeights) -> f64 {
    if weights.tv_pairs_twice {
        2.0
    } else {
        1.0
    }
}

fn needs_consensus<'a>(weights: &RegWeights, consensus: Option<&'a ImageBatch>) -> Result<Option<&'a ImageBatch>> {
    match (weights.alpha_group != 0.0, consensus) {
        (true, None) => Err(Error::InvalidArgument(
            "group regularizer weighted but no consensus available".into(),
        )),
        (true, Some(c)) => Ok(Some(c)),
        (false, _) => Ok(None),
    }
}

/// `α_tv·TV + α_l2·L2 + α_group·Group`. The consensus may be absent when
/// `α_group` is zero.
pub fn combined_aux(images: &ImageBatch, weights: &RegWeights, consensus: Option<&ImageBatch>) -> Result<f64> {
    weights.validate()?;
    let mut total = 0.0;
    if weights.alpha_tv != 0.0 {
        total += weights.alpha_tv * tv_factor(weights) * tv_regularizer(images);
    }
    if weights.alpha_l2 != 0.0 {
        total += weights.alpha_l2 * l2_regularizer(images);
    }
    if let Some(c) = needs_consensus(weights, consensus)? {
        total += weights.alpha_group * group_regularizer(images, c)?;
    }
    Ok(total)
}

pub fn combined_aux_grad(images: &ImageBatch, weights: &RegWeights, consensus: Option<&ImageBatch>) -> Result<Vec<f64>> {
    weights.validate()?;
    let mut grad = vec![0.0; images.data().len()];
    let mut accumulate = |alpha: f64, part: Vec<f64>| {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += alpha * p;
        }
    };
    if weights.alpha_tv != 0.0 {
        accumulate(weights.alpha_tv * tv_factor(weights), tv_regularizer_grad(images));
    }
    if weights.alpha_l2 != 0.0 {
        accumulate(weights.alpha_l2, l2_regularizer_grad(images));
    }
    if let Some(c) = needs_consensus(weights, consensus)? {
        accumulate(weights.alpha_group, group_regularizer_grad(images, c)?);
    }
    Ok(grad)
}

/// Loss-scheduler constants, independent of the run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSchedule {
    pub alpha_grad: f64,
    pub alpha_aux: f64,
    pub switch_fraction: f64,
    pub late_grad_factor: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            alpha_grad: 1.0,
            alpha_aux: 1.0,
            switch_fraction: 4.0 / 9.0,
            late_grad_factor: 0.5,
        }
    }
}

impl LossSchedule {
    pub fn with_total(self, total_iters: usize) -> ScheduleParams {
        ScheduleParams {
            alpha_grad: self.alpha_grad,
            alpha_aux: self.alpha_aux,
            total_iters,
            switch_fraction: self.switch_fraction,
            late_grad_factor: self.late_grad_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub alpha_grad: f64,
    pub alpha_aux: f64,
    pub total_iters: usize,
    pub switch_fraction: f64,
    pub late_grad_factor: f64,
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::InvalidArgument("total_iters must be >= 1".into()));
        }
        if !(self.switch_fraction > 0.0 && self.switch_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "switch_fraction {} not in (0, 1)",
                self.switch_fraction
            )));
        }
        Ok(())
    }

    /// First iteration of the regularised phase, `⌊switch_fraction·T⌋`.
    pub fn transition(&self) -> usize {
        let x = self.switch_fraction * self.total_iters as f64;
        // 4/9·9 must land on 4 even if the product rounds just below it
        (x + 1e-9 * x.max(1.0)).floor() as usize
    }
}

/// `(w_grad, w_aux)` at iteration `t`: `(α_grad, 0)` before the transition,
/// `(late_grad_factor·α_grad, α_aux)` from it on.
pub fn schedule_weights(t: usize, params: &ScheduleParams) -> Result<(f64, f64)> {
    params.validate()?;
    if t >= params.total_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} outside [0, {})",
            params.total_iters
        )));
    }
    Ok(if t < params.transition() {
        (params.alpha_grad, 0.0)
    } else {
        (params.late_grad_factor * params.alpha_grad, params.alpha_aux)
    })
}
