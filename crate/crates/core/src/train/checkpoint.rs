//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TATTCKPT" | version u32 | precision u8 (32|64)
//! meta_len u32 | meta JSON (train + network config)
//! step u64 | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! param_count u32 | { name_len u32, name, trainable u8, ndim u32, dims u64*, data }*
//! adam_step u64 | moment_count u32 | { name_len u32, name, len u64, m, v }*
//! sha256 of everything above [u8; 32]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::nn::ParamStore;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"TATTCKPT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    train: TrainConfig,
    network: NetworkConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
}

/// A checkpoint whose precision is only known after reading it.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn precision(&self) -> Precision {
        match self {
            AnyCheckpoint::F32(_) => Precision::F32,
            AnyCheckpoint::F64(_) => Precision::F64,
        }
    }

    pub fn network(&self) -> &NetworkConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.network,
            AnyCheckpoint::F64(c) => &c.network,
        }
    }

    /// Parameters in the requested precision.
    pub fn params<T: Scalar>(&self) -> ParamStore<T> {
        match self {
            AnyCheckpoint::F32(c) => c.params.cast(),
            AnyCheckpoint::F64(c) => c.params.cast(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(T::BITS);
        let meta = serde_json::to_vec(&Meta {
            train: self.train.clone(),
            network: self.network.clone(),
        })
        .map_err(|e| Error::Parse(e.to_string()))?;
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, p) in self.params.iter() {
            put_name(&mut out, name);
            out.push(p.trainable as u8);
            put_u32(&mut out, p.tensor.ndim() as u32);
            for &d in p.tensor.shape() {
                put_u64(&mut out, d as u64);
            }
            for &v in p.tensor.data() {
                v.write_le(&mut out);
            }
        }
        put_u64(&mut out, self.adam.step);
        put_u32(&mut out, self.adam.moments.len() as u32);
        for (name, (m, v)) in &self.adam.moments {
            put_name(&mut out, name);
            put_u64(&mut out, m.len() as u64);
            for &x in m.iter().chain(v.iter()) {
                x.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (bits, mut r) = open(bytes)?;
        if bits != T::BITS {
            return Err(Error::Contract(format!(
                "checkpoint holds {bits}-bit values, {}-bit requested",
                T::BITS
            )));
        }
        read_body(&mut r)
    }
}

pub fn load_checkpoint_any(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (bits, mut r) = open(&bytes)?;
    match bits {
        32 => Ok(AnyCheckpoint::F32(read_body(&mut r)?)),
        64 => Ok(AnyCheckpoint::F64(read_body(&mut r)?)),
        b => Err(Error::Corrupt {
            offset: 12,
            detail: format!("precision byte {b}"),
        }),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos,
                detail: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn name(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32("name length")? as usize;
        let raw = self.take(n, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt {
            offset: at,
            detail: "name is not UTF-8".into(),
        })
    }

    fn values<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let w = (T::BITS / 8) as usize;
        let raw = self.take(
            n.checked_mul(w)
                .ok_or_else(|| self.corrupt("length overflow"))?,
            what,
        )?;
        Ok(raw.chunks_exact(w).map(T::read_le).collect())
    }

    fn corrupt(&self, detail: &str) -> Error {
        Error::Corrupt {
            offset: self.pos,
            detail: detail.into(),
        }
    }
}

/// Checks magic, version and digest; returns the precision and a reader
/// positioned after the precision byte.
fn open(bytes: &[u8]) -> Result<(u8, Reader<'_>)> {
    if bytes.len() < MAGIC.len() + 4 + 1 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            detail: "not a checkpoint (bad magic or too short)".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let body = bytes.len() - 32;
    if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
        return Err(Error::Checksum {
            what: format!(
                "checkpoint ({} bytes, digest at offset {body})",
                bytes.len()
            ),
        });
    }
    let bits = bytes[12];
    Ok((
        bits,
        Reader {
            bytes: &bytes[..body],
            pos: 13,
        },
    ))
}

fn read_body<T: Scalar>(r: &mut Reader<'_>) -> Result<Checkpoint<T>> {
    let meta_len = r.u32("meta length")? as usize;
    let at = r.pos;
    let meta: Meta =
        serde_json::from_slice(r.take(meta_len, "meta")?).map_err(|e| Error::Corrupt {
            offset: at,
            detail: format!("meta: {e}"),
        })?;
    let step = r.u64("step")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
    let mut params = ParamStore::new();
    for _ in 0..r.u32("param count")? {
        let name = r.name()?;
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            _ => return Err(r.corrupt("trainable flag")),
        };
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.values::<T>(n, "parameter data")?;
        params.insert(name, Tensor::new(shape, data)?, trainable);
    }
    let mut adam = AdamState::new();
    adam.step = r.u64("adam step")?;
    for _ in 0..r.u32("moment count")? {
        let name = r.name()?;
        let n = r.u64("moment length")? as usize;
        let m = r.values::<T>(n, "first moment")?;
        let v = r.values::<T>(n, "second moment")?;
        adam.moments.insert(name, (m, v));
    }
    if r.pos != r.bytes.len() {
        return Err(r.corrupt("trailing bytes before digest"));
    }
    Ok(Checkpoint {
        train: meta.train,
        network: meta.network,
        step,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
        params,
        adam,
    })
}
