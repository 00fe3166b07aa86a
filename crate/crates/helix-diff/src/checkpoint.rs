//! Binary checkpoint format.
//!
//! Layout: 8-byte ASCII magic `DHDF0001`, u32 LE config-text length and the
//! UTF-8 config text, u32 LE parameter count, then per parameter a u16 LE
//! name length + name, u8 rank, u32 LE dims, and the f64 LE data. The file
//! ends with a u64 LE FNV-1a checksum of every preceding byte.

use std::path::Path;

use crate::backbone::Model;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DHDF0001";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    /// Sorted by parameter name.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(config_text: String, model: &Model) -> Self {
        let mut params: Vec<(String, Tensor)> = model
            .parameters()
            .into_iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint {
            config_text,
            params,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// Rebuild the model this checkpoint was saved from: construct the
    /// architecture from the embedded config, then overwrite every
    /// parameter tensor by name.
    pub fn instantiate(&self) -> Result<Model> {
        let cfg = self.config()?;
        cfg.validate()?;
        let mut model = Model::new(
            cfg.backbone(),
            cfg.placement()?,
            &[],
            cfg.seed,
            false,
        )?;
        model.vocab = crate::backbone::PromptVocabulary::from_token_list(
            &cfg.vocab_tokens,
            cfg.vocab_size,
            cfg.d_text,
        )?;
        let lookup: std::collections::BTreeMap<&str, &Tensor> = self
            .params
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut expected = 0usize;
        for p in model.parameters_mut() {
            let Some(saved) = lookup.get(p.name.as_str()) else {
                return Err(Error::Corrupt(format!(
                    "checkpoint is missing parameter {}",
                    p.name
                )));
            };
            if saved.shape != p.tensor.shape {
                return Err(Error::Corrupt(format!(
                    "parameter {} has shape {:?}, checkpoint holds {:?}",
                    p.name, p.tensor.shape, saved.shape
                )));
            }
            p.tensor.data = saved.data.clone();
            expected += 1;
        }
        if expected != self.params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} parameters, model has {expected}",
                self.params.len()
            )));
        }
        Ok(model)
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = ckpt.config_text.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.params {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Corrupt("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let cfg_len = r.u32("config length")? as usize;
    let config_text = String::from_utf8(r.take(cfg_len, "config text")?.to_vec())
        .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
    let n_params = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(8 * numel, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((
            name,
            Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?,
        ));
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after parameters",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_text,
        params,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            config_text: "seed = 3\n".into(),
            params: vec![
                (
                    "a.w".into(),
                    Tensor::from_vec(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]),
                ),
                ("b.b".into(), Tensor::from_vec(vec![3], vec![0.5, 0.5, -1.0])),
            ],
        }
    }

    #[test]
    fn encode_decode_round_trip_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let bytes = encode(&ckpt);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.params.len(), 2);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(&ckpt.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            assert_eq!(t1.data, t2.data);
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn flipping_any_payload_byte_fails_the_checksum() {
        let bytes = encode(&sample_checkpoint());
        for idx in [0, 9, bytes.len() / 2, bytes.len() - 9] {
            let mut bad = bytes.clone();
            bad[idx] ^= 0x40;
            assert!(
                matches!(decode(&bad), Err(Error::Corrupt(_))),
                "byte {idx} flip went undetected"
            );
        }
    }

    #[test]
    fn empty_parameter_list_is_a_valid_file() {
        let ckpt = Checkpoint {
            config_text: String::new(),
            params: Vec::new(),
        };
        let back = decode(&encode(&ckpt)).unwrap();
        assert!(back.params.is_empty());
    }

    #[test]
    fn fnv_vector() {
        // Published FNV-1a 64 test vector.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
