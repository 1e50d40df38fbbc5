//! Network weight files.
//!
//! ```text
//! "TOFW" u32 version
//! u32 in_channels, u32 out_channels, u32 base_width, u32 n_resblocks,
//! f64 leaky_slope, f64 depth_max_m
//! u32 tensor count, then per tensor:
//!   u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values
//! ```
//!
//! Little-endian throughout. Tensors appear in `Network::params` order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{Network, NetworkConfig};
use crate::dataset::{write_atomic, DatasetError};

pub const MAGIC: &[u8; 4] = b"TOFW";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(net: &Network<f32>) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::with_capacity(64 + net.param_count() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    for v in [cfg.in_channels, cfg.out_channels, cfg.base_width, cfg.n_resblocks] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
    out.extend_from_slice(&cfg.depth_max_m.to_le_bytes());
    let params = net.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network<f32>, DatasetError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(DatasetError::Format("not a TOFW checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(DatasetError::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = NetworkConfig {
        in_channels: c.u32()?,
        out_channels: c.u32()?,
        base_width: c.u32()?,
        n_resblocks: c.u32()?,
        leaky_slope: c.f64()?,
        depth_max_m: c.f64()?,
    };
    // Weights are overwritten below; the seed only fixes the placeholder values.
    let mut net = Network::<f32>::new(config, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| DatasetError::Format(format!("checkpoint config: {e}")))?;
    let count = c.u32()?;
    let mut params = net.params_mut();
    if count != params.len() {
        return Err(DatasetError::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name_len = c.u32()?;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| DatasetError::Format("tensor name is not UTF-8".into()))?;
        if name != p.name {
            return Err(DatasetError::Format(format!("expected tensor {}, found {name}", p.name)));
        }
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        if dims != p.value.shape() {
            return Err(DatasetError::Format(format!("tensor {name}: shape {dims:?} != {:?}", p.value.shape())));
        }
        let payload = c.take(p.value.len() * 4)?;
        for (dst, src) in p.value.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
    }
    drop(params);
    if c.pos != bytes.len() {
        return Err(DatasetError::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(net)
}

pub fn save(path: &Path, net: &Network<f32>) -> Result<(), DatasetError> {
    write_atomic(path, &encode(net))
}

pub fn load(path: &Path) -> Result<Network<f32>, DatasetError> {
    decode(&fs::read(path).map_err(|e| DatasetError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> Network<f32> {
        let cfg = NetworkConfig {
            base_width: 2,
            n_resblocks: 2,
            out_channels: 3,
            leaky_slope: 0.2,
            depth_max_m: 6.3,
            ..NetworkConfig::default()
        };
        Network::new(cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let net = tiny(4);
        let bytes = encode(&net);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = encode(&tiny(1));
        for cut in (0..bytes.len()).step_by(7) {
            assert!(matches!(decode(&bytes[..cut]), Err(DatasetError::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn renamed_tensor_is_rejected() {
        let mut bytes = encode(&tiny(1));
        let at = bytes.windows(9).position(|w| w == b"d1.weight").unwrap();
        bytes[at] = b'x';
        assert!(decode(&bytes).is_err());
    }
}
