//! `PIBC` checkpoint files.
//!
//! ```text
//! "PIBC" | version: u16 = 1
//! KIND: model tag u32 (1 = cnn, 2 = rnn) | training seed u64
//! CONF: UTF-8 JSON config echo
//! INDX: count u32, then per tensor: name (u32 len + UTF-8), offset u32 (in values),
//!       rank u32, dims u32 × rank
//! PARM: f64 little-endian values, concatenated in index order
//! ```
//!
//! Parameters are stored as `f64` so reloaded models reproduce logits bit-exactly.

use std::collections::HashMap;
use std::path::Path;

use super::{Model, ModelKind};
use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PIBC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.section(b"KIND", |s| {
        s.u32(ck.model.kind().tag());
        s.u64(ck.seed);
    });
    w.section(b"CONF", |s| s.bytes(ck.config.to_string().as_bytes()));
    let names = ck.model.param_names();
    w.section(b"INDX", |s| {
        s.u32(names.len() as u32);
        let mut offset = 0;
        for (name, p) in names.iter().zip(ck.model.params()) {
            s.len_prefixed(name.as_bytes());
            s.u32(offset as u32);
            s.u32(p.rank() as u32);
            for &d in p.shape() {
                s.u32(d as u32);
            }
            offset += p.len();
        }
    });
    w.section(b"PARM", |s| {
        for p in ck.model.params() {
            for &v in p.data() {
                s.f64(v);
            }
        }
    });
    w.finish()
}

/// Decodes a checkpoint, optionally requiring a model kind.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<ModelKind>) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, MAGIC, VERSION)?;
    let mut k = r.section(b"KIND")?;
    let tag = k.u32()?;
    let seed = k.u64()?;
    let kind = match tag {
        1 => ModelKind::Cnn,
        2 => ModelKind::Rnn,
        t => return Err(Error::Format(format!("unknown model tag {t}"))),
    };
    if let Some(want) = expected {
        if want != kind {
            return Err(Error::Format(format!("checkpoint holds a {kind:?} model, expected {want:?}")));
        }
    }
    let mut conf = r.section(b"CONF")?;
    let config: serde_json::Value = serde_json::from_slice(conf.take(conf.remaining(), "config")?)
        .map_err(|e| Error::Format(format!("config echo: {e}")))?;

    let mut ix = r.section(b"INDX")?;
    let count = ix.u32()? as usize;
    let mut index: HashMap<String, (usize, Vec<usize>)> = HashMap::new();
    for _ in 0..count {
        let name = std::str::from_utf8(ix.len_prefixed("name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let offset = ix.u32()? as usize;
        let rank = ix.u32()? as usize;
        let dims = (0..rank).map(|_| ix.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        index.insert(name, (offset, dims));
    }
    ix.expect_done("INDX")?;

    let mut pr = r.section(b"PARM")?;
    let mut values = Vec::with_capacity(pr.remaining() / 8);
    while !pr.is_done() {
        values.push(pr.f64()?);
    }
    r.expect_done("checkpoint")?;

    let blank = Model::new(kind, 0);
    let mut params = Vec::new();
    for name in blank.param_names() {
        let (offset, dims) = index
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing layer entry `{name}`")))?;
        let n: usize = dims.iter().product();
        let slice = values
            .get(*offset..offset + n)
            .ok_or_else(|| Error::Truncated(format!("parameter `{name}` past end of blob")))?;
        params.push(Tensor::new(dims.clone(), slice.to_vec())?);
    }
    Ok(Checkpoint {
        model: Model::from_params(kind, params)?,
        seed,
        config,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<ModelKind>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Batch;
    use crate::rng::RngStream;

    fn ck(kind: ModelKind) -> Checkpoint {
        Checkpoint {
            model: Model::new(kind, 17),
            seed: 17,
            config: serde_json::json!({"epochs": 3}),
        }
    }

    #[test]
    fn round_trip_logits_bit_exact() {
        let c = ck(ModelKind::Cnn);
        let back = decode_checkpoint(&encode_checkpoint(&c), Some(ModelKind::Cnn)).unwrap();
        assert_eq!(back, c);
        let mut r = RngStream::new(1, 1);
        let batch = Batch::Images(r.uniform_tensor(&[100, 1, 16, 16], 0.0, 1.0));
        assert_eq!(
            c.model.predict_logits(&batch).unwrap(),
            back.model.predict_logits(&batch).unwrap()
        );
    }

    #[test]
    fn kind_mismatch() {
        let bytes = encode_checkpoint(&ck(ModelKind::Rnn));
        assert!(decode_checkpoint(&bytes, Some(ModelKind::Cnn)).is_err());
        assert!(decode_checkpoint(&bytes, Some(ModelKind::Rnn)).is_ok());
    }

    #[test]
    fn missing_layer_entry() {
        // Rename one index entry so the expected name is absent.
        let mut bytes = encode_checkpoint(&ck(ModelKind::Cnn));
        let needle = b"fc2.bias";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos] = b'x';
        let err = decode_checkpoint(&bytes, None).unwrap_err();
        assert!(err.to_string().contains("missing layer entry"), "{err}");
    }
}
