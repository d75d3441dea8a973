//! Checkpoint container.
//!
//! Layout: the 8-byte magic `MDCKPT01`, the header length as a
//! little-endian `u64`, a UTF-8 JSON header, then every parameter as
//! little-endian `f64` values in the order listed by the header's
//! `parameters` array (the encoder's declaration order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterSet, Tensor};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::evaluation::Metrics;
use crate::model::{Encoder, EncoderConfig};
use crate::training::Regime;

pub const MAGIC: &[u8; 8] = b"MDCKPT01";

/// Metrics on the domain a checkpoint was last trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub domain: String,
    pub split: Split,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet<f64>,
    pub encoder: EncoderConfig,
    pub config_digest: String,
    pub regime: Regime,
    /// Training domains in the order they were trained; never empty.
    pub history: Vec<String>,
    pub class_names: Vec<String>,
    pub epoch: usize,
    pub snapshot: Option<MetricSnapshot>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    config_digest: String,
    regime: Regime,
    history: Vec<String>,
    class_names: Vec<String>,
    epoch: usize,
    snapshot: Option<MetricSnapshot>,
    parameters: Vec<ParamEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.history.is_empty() {
            return Err(bad("training history is empty"));
        }
        if self.class_names.len() != self.encoder.class_count {
            return Err(bad(format!(
                "{} class names for a {}-class head",
                self.class_names.len(),
                self.encoder.class_count
            )));
        }
        Encoder::new(self.encoder.clone())?
            .check_params(&self.params)
            .map_err(|e| bad(e.to_string()))
    }

    pub fn last_domain(&self) -> &str {
        self.history.last().map(String::as_str).unwrap_or("")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let shapes = self.encoder.parameter_shapes();
        let header = Header {
            encoder: self.encoder.clone(),
            config_digest: self.config_digest.clone(),
            regime: self.regime,
            history: self.history.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            snapshot: self.snapshot.clone(),
            parameters: shapes
                .iter()
                .map(|(name, shape)| ParamEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, _) in &shapes {
            let t = self.params.get(name).expect("validated");
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut rest = &body[hlen..];
        let mut params = ParameterSet::new();
        for p in &header.parameters {
            let n: usize = p.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad(format!("truncated data for {}", p.name)));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[8 * n..];
            params.insert(&p.name, Tensor::new(p.shape.clone(), data)?)?;
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let ck = Self {
            params,
            encoder: header.encoder,
            config_digest: header.config_digest,
            regime: header.regime,
            history: header.history,
            class_names: header.class_names,
            epoch: header.epoch,
            snapshot: header.snapshot,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
