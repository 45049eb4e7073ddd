//! CKPT1 model files: magic, u32-LE header length, JSON header holding the
//! architecture and tensor table, then every tensor as f32-LE in table order
//! (parameters first, then buffers).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ArchSpec, Autoencoder, AutoencoderSpec, ClassifierModel};
use super::tensor::{ParamStore, Tensor};
use crate::container;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arch", rename_all = "snake_case")]
pub enum ModelArch {
    Classifier(ArchSpec),
    Autoencoder(AutoencoderSpec),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(flatten)]
    arch: ModelArch,
    tensors: Vec<TensorEntry>,
}

fn write_store<W: Write>(w: &mut W, arch: ModelArch, store: &ParamStore<f32>) -> Result<()> {
    let mut tensors: Vec<TensorEntry> = store
        .params
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            buffer: false,
        })
        .collect();
    tensors.extend(store.buffers.iter().map(|b| TensorEntry {
        name: b.name.clone(),
        shape: b.value.shape().to_vec(),
        buffer: true,
    }));
    let header = Header {
        format: "CKPT1".into(),
        arch,
        tensors,
    };
    container::write_header(w, MAGIC, &header)?;
    for p in &store.params {
        container::write_f32s(w, p.value.data())?;
    }
    for b in &store.buffers {
        container::write_f32s(w, b.value.data())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let header: Header = container::read_header(r, MAGIC)?;
    if header.format != "CKPT1" {
        return Err(Error::Format(format!("unexpected format tag {}", header.format)));
    }
    Ok(header)
}

/// Fills a freshly built store from the payload, checking the tensor table
/// against the architecture.
fn fill_store<R: Read>(r: &mut R, entries: &[TensorEntry], store: &mut ParamStore<f32>) -> Result<()> {
    let expected = store.params.len() + store.buffers.len();
    if entries.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, architecture has {expected}",
            entries.len()
        )));
    }
    let slots = store
        .params
        .iter_mut()
        .map(|p| (&p.name, &mut p.value, false))
        .chain(store.buffers.iter_mut().map(|b| (&b.name, &mut b.value, true)));
    for (entry, (name, value, buffer)) in entries.iter().zip(slots) {
        if &entry.name != name || entry.shape != value.shape() || entry.buffer != buffer {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match architecture tensor {name} {:?}",
                entry.name,
                entry.shape,
                value.shape()
            )));
        }
        let data = container::read_f32s(r, value.len())?;
        *value = Tensor::from_vec(&entry.shape, data)?;
    }
    Ok(())
}

impl ClassifierModel<f32> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_store(w, ModelArch::Classifier(self.spec().clone()), &self.store)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header = read_header(r)?;
        let ModelArch::Classifier(spec) = header.arch else {
            return Err(Error::Format(
                "checkpoint holds an autoencoder, not a classifier".into(),
            ));
        };
        let mut model = ClassifierModel::new(spec, 0)?;
        fill_store(r, &header.tensors, &mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

impl Autoencoder<f32> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_store(w, ModelArch::Autoencoder(self.spec().clone()), &self.store)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header = read_header(r)?;
        let ModelArch::Autoencoder(spec) = header.arch else {
            return Err(Error::Format(
                "checkpoint holds a classifier, not an autoencoder".into(),
            ));
        };
        let mut model = Autoencoder::new(spec, 0)?;
        fill_store(r, &header.tensors, &mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
