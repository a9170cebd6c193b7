//! Binary container for model, generator and gradient arrays.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `GILABCK\0` |
//! | 4     | `u32` format version |
//! | 4     | `u32` manifest length `m` |
//! | m     | UTF-8 JSON [`Manifest`] |
//! | rest  | `f32` values of every entry, in manifest order |
//!
//! Values are stored as `f32`, so a round trip is exact only to single
//! precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::GradientSet;
use crate::nnmodels::{ArchId, Generator, GeneratorConfig, TargetModel};
use crate::tensor::{ImageShape, NamedArray};

pub const MAGIC: &[u8; 8] = b"GILABCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    TargetModel,
    Generator,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: PayloadKind,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_id: Option<ArchId>,
    /// Model input or generator output shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<ImageShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size_used: Option<usize>,
    pub entries: Vec<EntryInfo>,
}

impl Manifest {
    fn new(kind: PayloadKind, arrays: &[NamedArray]) -> Self {
        Self {
            kind,
            version: FORMAT_VERSION,
            arch_id: None,
            image_shape: None,
            num_classes: None,
            seed: None,
            generator: None,
            trained: None,
            batch_size_used: None,
            entries: arrays
                .iter()
                .map(|a| EntryInfo {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
        }
    }

    fn require<T: Copy>(&self, field: Option<T>, name: &str) -> Result<T> {
        field.ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{name}`")))
    }
}

pub fn write_container<W: Write>(mut out: W, manifest: &Manifest, arrays: &[NamedArray]) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for a in arrays {
        for &v in &a.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut input: R) -> Result<(Manifest, Vec<NamedArray>)> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    input.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let mut arrays = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated data for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        arrays.push(NamedArray::new(e.name.clone(), e.shape.clone(), data)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last array".into()));
    }
    Ok((manifest, arrays))
}

fn expect_kind(manifest: &Manifest, kind: PayloadKind) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            manifest.kind
        )));
    }
    Ok(())
}

pub fn write_model<W: Write>(out: W, model: &TargetModel) -> Result<()> {
    let mut m = Manifest::new(PayloadKind::TargetModel, model.parameters());
    m.arch_id = Some(model.arch());
    m.image_shape = Some(model.input_shape());
    m.num_classes = Some(model.num_classes());
    m.seed = Some(model.init_seed());
    write_container(out, &m, model.parameters())
}

pub fn read_model<R: Read>(input: R) -> Result<TargetModel> {
    let (m, arrays) = read_container(input)?;
    expect_kind(&m, PayloadKind::TargetModel)?;
    let model = TargetModel::build(
        m.require(m.arch_id, "arch_id")?,
        m.require(m.image_shape, "image_shape")?,
        m.require(m.num_classes, "num_classes")?,
        m.require(m.seed, "seed")?,
    )?;
    model.with_parameters(arrays)
}

pub fn write_generator<W: Write>(out: W, generator: &Generator) -> Result<()> {
    let mut m = Manifest::new(PayloadKind::Generator, generator.weights());
    m.image_shape = Some(generator.output_shape());
    m.seed = Some(generator.config().seed);
    m.generator = Some(*generator.config());
    m.trained = Some(generator.is_trained());
    write_container(out, &m, generator.weights())
}

pub fn read_generator<R: Read>(input: R) -> Result<Generator> {
    let (m, arrays) = read_container(input)?;
    expect_kind(&m, PayloadKind::Generator)?;
    let g = Generator::new(m.require(m.generator, "generator")?, m.require(m.image_shape, "image_shape")?)?;
    g.with_weights(arrays, m.trained.unwrap_or(true))
}

pub fn write_gradient<W: Write>(out: W, grad: &GradientSet) -> Result<()> {
    let mut m = Manifest::new(PayloadKind::Gradient, grad.entries());
    m.batch_size_used = Some(grad.batch_size_used());
    write_container(out, &m, grad.entries())
}

pub fn read_gradient<R: Read>(input: R) -> Result<GradientSet> {
    let (m, arrays) = read_container(input)?;
    expect_kind(&m, PayloadKind::Gradient)?;
    Ok(GradientSet::new(arrays, m.require(m.batch_size_used, "batch_size_used")?))
}

pub fn save_model(path: impl AsRef<Path>, model: &TargetModel) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TargetModel> {
    read_model(BufReader::new(File::open(path)?))
}

pub fn save_generator(path: impl AsRef<Path>, generator: &Generator) -> Result<()> {
    write_generator(BufWriter::new(File::create(path)?), generator)
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    read_generator(BufReader::new(File::open(path)?))
}

pub fn save_gradient(path: impl AsRef<Path>, grad: &GradientSet) -> Result<()> {
    write_gradient(BufWriter::new(File::create(path)?), grad)
}

pub fn load_gradient(path: impl AsRef<Path>) -> Result<GradientSet> {
    read_gradient(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let model = TargetModel::build(ArchId::Linear, ImageShape::new(1, 1, 2), 2, 0).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let m = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        assert_eq!(buf.len(), 16 + m + 4 * 4);
        let back = read_model(buf.as_slice()).unwrap();
        for (a, b) in model.parameters()[0].data.iter().zip(&back.parameters()[0].data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(matches!(read_container(&b"NOTACKPT...."[..]), Err(Error::Checkpoint(_))));
        let model = TargetModel::build(ArchId::Linear, ImageShape::new(1, 1, 2), 2, 0).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        assert!(read_model(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_model(extra.as_slice()).is_err());
        assert!(read_gradient(buf.as_slice()).is_err());
    }
}
