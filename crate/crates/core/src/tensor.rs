//! Plain data containers: named parameter arrays, image/label/latent batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, shaped, row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "array {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Channel/height/width of a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// `B` images of one shape, stored B×C×H×W, every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    shape: ImageShape,
    batch: usize,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape(format!("degenerate image shape {shape}")));
        }
        if data.len() % shape.len() != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form whole {shape} images",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} = {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            shape,
            batch: data.len() / shape.len(),
            data,
        })
    }

    /// Builds a batch after clamping every value into `[0, 1]` (NaN → 0).
    pub fn from_clamped(shape: ImageShape, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(shape, data)
    }

    pub fn filled(shape: ImageShape, batch: usize, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; batch * shape.len()])
    }

    pub fn from_images(shape: ImageShape, images: &[&[f64]]) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * shape.len());
        for img in images {
            if img.len() != shape.len() {
                return Err(Error::Shape(format!(
                    "image of {} values does not match {shape}",
                    img.len()
                )));
            }
            data.extend_from_slice(img);
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.shape.len())
    }

    /// New batch made of the listed slots, in order.
    pub fn select(&self, slots: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(slots.len() * self.shape.len());
        for &s in slots {
            if s >= self.batch {
                return Err(Error::InvalidArgument(format!(
                    "slot {s} out of range for batch of {}",
                    self.batch
                )));
            }
            data.extend_from_slice(self.image(s));
        }
        Self::new(self.shape, data)
    }
}

/// Integer class labels, one per image slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBatch(pub Vec<usize>);

impl LabelBatch {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }
}

/// `B` latent codes of width `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    batch: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentBatch {
    pub fn new(batch: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("latent dim must be >= 1".into()));
        }
        if data.len() != batch * dim {
            return Err(Error::Shape(format!(
                "{} values for {batch} latents of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite latent entry".into()));
        }
        Ok(Self { batch, dim, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn code(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
