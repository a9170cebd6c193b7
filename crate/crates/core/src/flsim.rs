//! One simulated federated round: a client reports the (possibly defended)
//! gradient of its private batch; the honest-but-curious server keeps the
//! model, that gradient and the true labels, never the images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::defenses::{apply_defense, DefenseSpec};
use crate::error::{Error, Result};
use crate::nnmodels::TargetModel;
use crate::scalar::Dual;
use crate::tensor::{ImageBatch, LabelBatch, NamedArray};

/// Per-parameter gradient arrays in the model's parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    entries: Vec<NamedArray>,
    batch_size_used: usize,
}

impl GradientSet {
    pub fn new(entries: Vec<NamedArray>, batch_size_used: usize) -> Self {
        Self {
            entries,
            batch_size_used,
        }
    }

    pub fn entries(&self) -> &[NamedArray] {
        &self.entries
    }

    pub fn batch_size_used(&self) -> usize {
        self.batch_size_used
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.entries.iter().map(NamedArray::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation of every array in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.data.iter().copied()).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.data.iter().copied())
    }

    /// Same layout, new values taken from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for a gradient of {} entries",
                flat.len(),
                self.len()
            )));
        }
        let mut off = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let data = flat[off..off + e.len()].to_vec();
                off += e.len();
                NamedArray {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data,
                }
            })
            .collect();
        Ok(Self {
            entries,
            batch_size_used: self.batch_size_used,
        })
    }

    /// Errors unless both sets have identical names and shapes.
    pub fn check_layout(&self, other: &GradientSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "gradient sets have {} and {} arrays",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.shape != b.shape || a.name != b.name {
                return Err(Error::Shape(format!(
                    "gradient arrays differ: {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Errors unless the arrays mirror `model`'s parameters one-to-one.
    pub fn check_model(&self, model: &TargetModel) -> Result<()> {
        let params = model.parameters();
        if params.len() != self.entries.len()
            || params
                .iter()
                .zip(&self.entries)
                .any(|(p, e)| p.name != e.name || p.shape != e.shape)
        {
            return Err(Error::Shape(format!(
                "gradient does not match the parameters of {} ({} arrays vs {})",
                model.arch(),
                self.entries.len(),
                params.len()
            )));
        }
        Ok(())
    }
}

fn gradient_set(model: &TargetModel, grads: Vec<Vec<f64>>, batch: usize) -> GradientSet {
    let entries = model
        .parameters()
        .iter()
        .zip(grads)
        .map(|(p, data)| NamedArray {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data,
        })
        .collect();
    GradientSet::new(entries, batch)
}

/// `∇w = 1/B Σ ∂ℓ(F(xᵢ, w), yᵢ)/∂w` for the client's batch.
pub fn client_gradient(model: &TargetModel, images: &ImageBatch, labels: &LabelBatch) -> Result<GradientSet> {
    model.check_batch(images, labels)?;
    let (_, grads, _) = model.loss_and_grads::<f64>(&model.param_values(), model.image_tensor(images), labels.as_slice());
    Ok(gradient_set(model, grads, images.batch()))
}

/// Batch gradient that can be differentiated again with respect to the
/// images that produced it.
#[derive(Debug, Clone)]
pub struct DifferentiableGradient<'m> {
    model: &'m TargetModel,
    images: ImageBatch,
    labels: LabelBatch,
    loss: f64,
    gradient: GradientSet,
}

/// [`client_gradient`] that also supports [`DifferentiableGradient::pullback`].
pub fn client_gradient_differentiable<'m>(
    model: &'m TargetModel,
    images: &ImageBatch,
    labels: &LabelBatch,
) -> Result<DifferentiableGradient<'m>> {
    model.check_batch(images, labels)?;
    let (loss, grads, _) = model.loss_and_grads::<f64>(&model.param_values(), model.image_tensor(images), labels.as_slice());
    Ok(DifferentiableGradient {
        model,
        images: images.clone(),
        labels: labels.clone(),
        loss,
        gradient: gradient_set(model, grads, images.batch()),
    })
}

impl DifferentiableGradient<'_> {
    pub fn gradient(&self) -> &GradientSet {
        &self.gradient
    }

    pub fn into_gradient(self) -> GradientSet {
        self.gradient
    }

    /// Training loss of the batch the gradient was taken on.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// `∂⟨∇w ℓ(x), c⟩/∂x` for a fixed cotangent `c` (flat B×C×H×W).
    ///
    /// With `c = ∂φ/∂(∇w)` this is the image gradient of any scalar `φ` of
    /// the batch gradient. Computed by re-running the reverse pass with
    /// parameters perturbed along `c` in dual numbers, i.e. a directional
    /// derivative of `∇x ℓ` in weight space.
    pub fn pullback(&self, cotangent: &GradientSet) -> Result<Vec<f64>> {
        self.gradient.check_layout(cotangent)?;
        let params: Vec<Vec<Dual>> = self
            .model
            .parameters()
            .iter()
            .zip(cotangent.entries())
            .map(|(p, c)| p.data.iter().zip(&c.data).map(|(&w, &v)| Dual::new(w, v)).collect())
            .collect();
        let input = self.model.image_tensor::<Dual>(&self.images);
        let (_, _, gx) = self.model.loss_and_grads(&params, input, self.labels.as_slice());
        Ok(gx.data.into_iter().map(|d| d.du).collect())
    }
}

/// Applies the client-side defense; the input gradient is left untouched.
pub fn report_gradient<R: Rng + ?Sized>(grad: &GradientSet, spec: &DefenseSpec, rng: &mut R) -> Result<GradientSet> {
    apply_defense(grad, spec, rng)
}

/// What the server holds: the model, the observed gradient and the labels.
#[derive(Debug, Clone)]
pub struct AttackInput<'m> {
    pub model: &'m TargetModel,
    pub observed_gradient: GradientSet,
    pub labels: LabelBatch,
    pub batch_size: usize,
}

pub fn make_attack_input<'m>(
    model: &'m TargetModel,
    defended_grad: GradientSet,
    labels: LabelBatch,
) -> Result<AttackInput<'m>> {
    defended_grad.check_model(model)?;
    if labels.is_empty() {
        return Err(Error::Empty("label batch"));
    }
    labels.check_range(model.num_classes())?;
    if defended_grad.batch_size_used() != labels.len() {
        return Err(Error::Shape(format!(
            "gradient was taken on {} samples but {} labels were given",
            defended_grad.batch_size_used(),
            labels.len()
        )));
    }
    Ok(AttackInput {
        model,
        batch_size: labels.len(),
        observed_gradient: defended_grad,
        labels,
    })
}
