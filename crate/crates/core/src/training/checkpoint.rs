//! `VFCK` checkpoint files.
//!
//! Layout (little-endian): magic `VFCK`, `u32` version, `u32` byte length
//! of the canonical config text followed by the text, `u64` FNV-1a hash of
//! that text, `u32` tensor count, then per tensor: `u16` name length, name
//! bytes, `u8` rank, `rank` x `u32` dims, and the `f32` data row-major.
//! Optimizer moments are stored as `adam.m.<name>` / `adam.v.<name>` and the
//! step counter as the single-element tensor `adam.step`.

use std::fs;
use std::path::Path;

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::model::{fnv1a64, ModelConfig, Params, Tensor};

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub state: Option<OptimState<f32>>,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for d in shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes to a temporary file, then renames it over `path`.
pub fn save_checkpoint(
    path: &Path,
    params: &Params<f32>,
    state: Option<&OptimState<f32>>,
    config: &ModelConfig,
) -> Result<()> {
    params.check_shapes(config)?;
    let text = config.to_canonical_text();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&fnv1a64(text.as_bytes()).to_le_bytes());
    let tensors = params.tensors();
    let count = tensors.len() * if state.is_some() { 3 } else { 1 } + state.is_some() as usize;
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for t in &tensors {
        push_tensor(&mut buf, &t.name, &t.shape, &t.data);
    }
    if let Some(s) = state {
        for (prefix, p) in [("adam.m.", &s.m), ("adam.v.", &s.v)] {
            for t in p.tensors() {
                push_tensor(&mut buf, &format!("{prefix}{}", t.name), &t.shape, &t.data);
            }
        }
        push_tensor(&mut buf, "adam.step", &[1], &[s.step as f32]);
    }
    write_atomic(path, &buf)
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Truncated(format!("{what} at offset {}", self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and validates a checkpoint. Nothing is returned unless the whole
/// file parsed.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

/// Like [`load_checkpoint`] but also requires the stored config to hash to
/// the same value as `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let (found, want) = (ck.config.hash(), expected.hash());
    if found != want {
        return Err(Error::ConfigHash {
            found,
            expected: want,
        });
    }
    Ok(ck)
}

fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "VFCK".into(),
        });
    }
    let mut c = Cursor { b: bytes, pos: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion {
            found: version,
            expected: VERSION,
        });
    }
    let tlen = c.u32("config length")? as usize;
    let text_bytes = c.take(tlen, "config text")?;
    let stored = c.u64("config hash")?;
    let computed = fnv1a64(text_bytes);
    if stored != computed {
        return Err(Error::ConfigHash {
            found: stored,
            expected: computed,
        });
    }
    let text = std::str::from_utf8(text_bytes)
        .map_err(|_| Error::Validation("config text is not utf-8".into()))?;
    let config = ModelConfig::from_canonical_text(text)?;
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u16("tensor name length")? as usize;
        let name = String::from_utf8_lossy(c.take(nlen, "tensor name")?).into_owned();
        let rank = c.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4, &format!("tensor {name} data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after tensors",
            bytes.len() - c.pos
        )));
    }

    let mut params = Params::<f32>::zeros(&config);
    let n_params = params.tensors().len();
    if tensors.len() != n_params && tensors.len() != 3 * n_params + 1 {
        return Err(Error::Validation(format!(
            "checkpoint has {} tensors, expected {n_params} or {}",
            tensors.len(),
            3 * n_params + 1
        )));
    }
    let mut it = tensors.into_iter();
    fill(&mut params, &mut it, "")?;
    let state = if it.len() > 0 {
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        fill(&mut m, &mut it, "adam.m.")?;
        fill(&mut v, &mut it, "adam.v.")?;
        let step = it.next().ok_or_else(|| Error::Validation("missing adam.step".into()))?;
        if step.name != "adam.step" || step.data.len() != 1 {
            return Err(Error::Validation("malformed adam.step".into()));
        }
        Some(OptimState {
            m,
            v,
            step: step.data[0] as u64,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        params,
        state,
    })
}

fn fill(dst: &mut Params<f32>, it: &mut impl Iterator<Item = Tensor<f32>>, prefix: &str) -> Result<()> {
    for slot in dst.tensors_mut() {
        let t = it
            .next()
            .ok_or_else(|| Error::Validation("missing tensors".into()))?;
        let want = format!("{prefix}{}", slot.name);
        if t.name != want || t.shape != slot.shape {
            return Err(Error::Validation(format!(
                "tensor {} {:?} where {want} {:?} was expected",
                t.name, t.shape, slot.shape
            )));
        }
        slot.data = t.data;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, Params<f32>) {
        let mut c = ModelConfig::tiny(16, 2);
        c.layers = 2;
        c.hidden = 16;
        c.heads = 2;
        let p = Params::init(&c, 7).unwrap();
        (c, p)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfck");
        let (c, p) = tiny();
        let mut s = OptimState::new(&p);
        s.step = 1234;
        s.m.head.data[1] = 0.25;
        s.v.tok_emb.data[2] = f32::MIN_POSITIVE;
        save_checkpoint(&path, &p, Some(&s), &c).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config, c);
        for (a, b) in ck.params.tensors().iter().zip(p.tensors()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(ck.state.as_ref(), Some(&s));
        save_checkpoint(&path, &p, None, &c).unwrap();
        assert!(load_checkpoint(&path).unwrap().state.is_none());
    }

    #[test]
    fn distinct_errors_for_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfck");
        let (c, p) = tiny();
        save_checkpoint(&path, &p, None, &c).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let e = load_checkpoint(&path).unwrap_err();
        assert!(matches!(e, Error::Truncated(_)), "{e}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadVersion { found: 9, .. })));

        let mut bad = bytes.clone();
        bad[12] ^= 1; // flip a byte of the config text
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::ConfigHash { .. })));

        fs::write(&path, &bytes).unwrap();
        let mut other = c.clone();
        other.dropout = 0.2;
        let e = load_checkpoint_for(&path, &other).unwrap_err();
        assert!(matches!(e, Error::ConfigHash { .. }));
        assert_ne!(e.code(), Error::Truncated(String::new()).code());
        assert!(load_checkpoint_for(&path, &c).is_ok());
    }
}
