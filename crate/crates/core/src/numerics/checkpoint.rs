//! Parameter checkpoints: one JSON header line naming each tensor and its
//! shape, followed by the raw little-endian `f64` payload of every tensor in
//! header order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

const FORMAT: &str = "layerlab-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    params: Vec<Entry>,
    #[serde(default)]
    counters: BTreeMap<String, u64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Named tensors plus counters (e.g. optimizer steps) and free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub counters: BTreeMap<String, u64>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            ..Default::default()
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), NumericsError> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            params: self
                .params
                .iter()
                .map(|(n, t)| Entry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            counters: self.counters.clone(),
            meta: self.meta.clone(),
        };
        let line =
            serde_json::to_string(&header).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in self.params.iter() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, NumericsError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported header {} v{}",
                header.format, header.version
            )));
        }
        let mut params = ParamStore::new();
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| {
                NumericsError::Checkpoint(format!("truncated payload for `{}`", e.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(e.name, Tensor::new(e.shape, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(NumericsError::Checkpoint(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(Self {
            params,
            counters: header.counters,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NumericsError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
