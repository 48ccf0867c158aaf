//! Checkpoint archive: a magic line, one JSON header line, then every
//! parameter as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Vocab};
use crate::corpus::CategorySchema;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "EXTSUMM-CKPT-v1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    schema: CategorySchema,
    separator: char,
    tensors: Vec<TensorMeta>,
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (_, name, t) in self.params.iter() {
            tensors.push(TensorMeta {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                offset,
            });
            offset += t.data().len();
        }
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema: self.schema.clone(),
            separator: self.separator,
            tensors,
        };
        let mut out = Vec::with_capacity(offset * 8 + 4096);
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (_, _, t) in self.params.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let (magic, rest) = split_line(bytes).ok_or_else(|| bad("missing magic line"))?;
        if magic != CHECKPOINT_MAGIC.as_bytes() {
            return Err(bad("not an EXTSUMM-CKPT-v1 archive"));
        }
        let (head, data) = split_line(rest).ok_or_else(|| bad("missing header"))?;
        let header: Header = serde_json::from_slice(head)?;
        if data.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut model = Model::new(header.config, header.vocab, header.schema, header.separator)?;
        if header.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "archive has {} tensors, config expects {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        for meta in &header.tensors {
            let id = model
                .params
                .id(&meta.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {:?}", meta.name)))?;
            let t = model.params.get_mut(id);
            if t.shape() != (meta.rows, meta.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} is {}x{}, expected {}x{}",
                    meta.name,
                    meta.rows,
                    meta.cols,
                    t.rows(),
                    t.cols()
                )));
            }
            let src = values
                .get(meta.offset..meta.offset + meta.rows * meta.cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {:?} is truncated", meta.name)))?;
            t.data_mut().copy_from_slice(src);
        }
        Ok(model)
    }

    /// Writes the archive next to `path` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}
