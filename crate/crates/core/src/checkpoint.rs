//! "CRBS" checkpoint container.
//!
//! Layout: magic `CRBS`, `u32` LE format version, `u64` LE header length,
//! a JSON header `{kind, config, tensors: [{name, shape, offset}], metadata}`,
//! then every tensor as little-endian `f32`. Offsets count floats from the
//! start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{Backbone, BackboneConfig};
use crate::heads::{HeadConfig, HeadStack};
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CRBS";
pub const VERSION: u32 = 1;
pub const KIND_BACKBONE: &str = "backbone";
pub const KIND_HEADS: &str = "heads";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub metadata: Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.data().len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(offset * 4);
        for (_, t) in self.params.iter() {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("file too short for magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic, not a CRBS checkpoint"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut l = [0u8; 8];
        r.read_exact(&mut l).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(l) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut params = ParamStore::new();
        let mut expected = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > floats.len() {
                return Err(Error::Checkpoint(format!("tensor {} has a bad offset", e.name)));
            }
            expected += n;
            if params.id(&e.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
            let t = Tensor::new(e.shape, floats[e.offset..e.offset + n].to_vec())?;
            params.insert(e.name, t);
        }
        if expected != floats.len() {
            return Err(bad("payload length does not match the tensor directory"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::from_io(e, path))?;
        Checkpoint::read_from(std::io::BufReader::new(f))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadsConfig {
    heads: HeadConfig,
    d_model: usize,
    vocab_size: usize,
}

pub fn backbone_checkpoint(b: &Backbone, metadata: Value) -> Checkpoint {
    Checkpoint {
        kind: KIND_BACKBONE.into(),
        config: serde_json::to_value(b.config()).expect("config serialises"),
        metadata,
        params: b.params().clone(),
    }
}

pub fn save_backbone(path: &Path, b: &Backbone, metadata: Value) -> Result<()> {
    backbone_checkpoint(b, metadata).save(path)
}

pub fn load_backbone(path: &Path) -> Result<(Backbone, Value)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(KIND_BACKBONE)?;
    let cfg: BackboneConfig = serde_json::from_value(ck.config)?;
    Ok((Backbone::from_params(cfg, ck.params)?, ck.metadata))
}

pub fn heads_checkpoint(h: &HeadStack, metadata: Value) -> Checkpoint {
    let cfg = HeadsConfig {
        heads: *h.config(),
        d_model: h.d_model(),
        vocab_size: h.vocab_size(),
    };
    Checkpoint {
        kind: KIND_HEADS.into(),
        config: serde_json::to_value(cfg).expect("config serialises"),
        metadata,
        params: h.params().clone(),
    }
}

pub fn save_heads(path: &Path, h: &HeadStack, metadata: Value) -> Result<()> {
    heads_checkpoint(h, metadata).save(path)
}

pub fn load_heads(path: &Path) -> Result<(HeadStack, Value)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(KIND_HEADS)?;
    let cfg: HeadsConfig = serde_json::from_value(ck.config)?;
    let h = HeadStack::from_params(cfg.heads, cfg.d_model, cfg.vocab_size, ck.params)?;
    Ok((h, ck.metadata))
}
