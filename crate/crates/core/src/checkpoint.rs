//! Binary checkpoint format.
//!
//! ```text
//! "FHDU" | u32 version | u32 header length | JSON header | f32 data
//! ```
//!
//! All integers and floats are little-endian. The header lists every tensor
//! with its name, shape and byte offset into the data section; model
//! parameters come first, followed by optimizer moments when present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FhdunModel, ModelConfig};
use crate::train::{AdamConfig, AdamW, TrainProgress};

pub const MAGIC: &[u8; 4] = b"FHDU";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub kind: String,
    #[serde(flatten)]
    pub config: AdamConfig,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainProgress>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FhdunModel<f32>,
    pub optimizer: Option<AdamW>,
    pub training: Option<TrainProgress>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl Checkpoint {
    pub fn new(model: FhdunModel<f32>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            training: None,
        }
    }

    fn tensors(&self) -> Vec<(String, [usize; 4], &[f32])> {
        let specs = self.model.param_specs();
        let mut out: Vec<(String, [usize; 4], &[f32])> = specs
            .iter()
            .zip(self.model.params().tensors())
            .map(|(s, t)| (s.name.clone(), s.shape.dims(), t.data()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(M_PREFIX, &opt.m), (V_PREFIX, &opt.v)] {
                for (s, m) in specs.iter().zip(moments) {
                    if s.trainable {
                        out.push((format!("{prefix}{}", s.name), s.shape.dims(), m.as_slice()));
                    }
                }
            }
        }
        out
    }

    pub fn header(&self) -> Header {
        let mut offset = 0;
        let tensors = self
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry { name, shape, offset };
                offset += data.len() * 4;
                e
            })
            .collect();
        Header {
            model: self.model.config().clone(),
            dtype: "f32-le".into(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: "adamw".into(),
                config: o.config,
                updates: o.t,
            }),
            training: self.training.clone(),
            tensors,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, _, data) in self.tensors() {
            let mut buf = Vec::with_capacity(data.len() * 4);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint", "file too short"))?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)
            .map_err(|_| Error::format("checkpoint", "truncated header"))?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.dtype != "f32-le" {
            return Err(Error::format("checkpoint", format!("unsupported dtype {}", header.dtype)));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;

        let mut values = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let bytes = data.get(e.offset..e.offset + n * 4).ok_or_else(|| {
                Error::format("checkpoint", format!("data for {} is truncated", e.name))
            })?;
            values.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect::<Vec<f32>>(),
            );
        }

        let probe = FhdunModel::<f32>::zeros(header.model.clone())?;
        let specs = probe.param_specs();
        if header.tensors.len() < specs.len() {
            return Err(Error::format("checkpoint", "missing model tensors"));
        }
        for (s, e) in specs.iter().zip(&header.tensors) {
            if s.name != e.name || s.shape.dims() != e.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {} {:?} does not match expected {} {}", e.name, e.shape, s.name, s.shape),
                ));
            }
        }
        let mut values = values.into_iter();
        let params: Vec<Vec<f32>> = values.by_ref().take(specs.len()).collect();
        let model = FhdunModel::from_values(header.model.clone(), params)?;

        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let mut m = Vec::with_capacity(specs.len());
                let mut v = Vec::with_capacity(specs.len());
                let rest: Vec<(&TensorEntry, Vec<f32>)> = header.tensors[specs.len()..].iter().zip(values).collect();
                for (prefix, out) in [(M_PREFIX, &mut m), (V_PREFIX, &mut v)] {
                    for s in specs {
                        if !s.trainable {
                            out.push(Vec::new());
                            continue;
                        }
                        let name = format!("{prefix}{}", s.name);
                        let found = rest.iter().find(|(e, _)| e.name == name).ok_or_else(|| {
                            Error::format("checkpoint", format!("missing optimizer tensor {name}"))
                        })?;
                        out.push(found.1.clone());
                    }
                }
                Some(AdamW {
                    config: h.config,
                    t: h.updates,
                    m,
                    v,
                })
            }
        };
        Ok(Checkpoint {
            model,
            optimizer,
            training: header.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
