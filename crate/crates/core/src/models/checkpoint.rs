//! Flat named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "VFLCKPT1"
//! count   u32
//! entry*  name_len u32 | name utf-8 | ndim u32 | dims u64* | values f64*
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::mlp::{Linear, MlpModel};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VFLCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format(format!("checkpoint name is not utf-8: {e}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Appends `prefix.layerN.weight` / `prefix.layerN.bias` entries.
    pub fn push_mlp(&mut self, prefix: &str, m: &MlpModel) {
        for (i, l) in m.layers().iter().enumerate() {
            self.push(format!("{prefix}.layer{i}.weight"), l.weight.clone());
            self.push(format!("{prefix}.layer{i}.bias"), l.bias.clone());
        }
    }

    pub fn mlp(&self, prefix: &str) -> Result<MlpModel> {
        let mut layers = Vec::new();
        loop {
            let i = layers.len();
            let (Some(w), Some(b)) = (
                self.get(&format!("{prefix}.layer{i}.weight")),
                self.get(&format!("{prefix}.layer{i}.bias")),
            ) else {
                break;
            };
            layers.push(Linear {
                weight: w.clone(),
                bias: b.clone(),
            });
        }
        if layers.is_empty() {
            return Err(Error::Format(format!("checkpoint has no model under '{prefix}'")));
        }
        MlpModel::from_layers(layers)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
