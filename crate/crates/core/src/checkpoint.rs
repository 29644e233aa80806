//! Binary checkpoint container for a trained model.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"PVDN"
//! version    u8   (= 1)
//! kind       u8   (0 pairvdn, 1 vdn, 2 iql)
//! n_agents   u32
//! n_layers   u32
//! sizes      u32 x (n_layers + 1)
//! per layer: in u32, out u32, weights f64 x (out*in) row-major, biases f64 x out
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::nn::{Layer, MlpParams};

pub const MAGIC: &[u8; 4] = b"PVDN";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub n_agents: usize,
    pub params: MlpParams,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let sizes = self.params.sizes();
        let mut out = Vec::with_capacity(16 + 8 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.kind.code());
        out.extend_from_slice(&(self.n_agents as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.layers().len() as u32).to_le_bytes());
        for s in &sizes {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        for l in self.params.layers() {
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            for v in l.weights().iter().chain(l.bias()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let code = r.u8()?;
        let kind = ModelKind::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown model kind code {code}")))?;
        let n_agents = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let sizes = (0..=n_layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let (in_dim, out_dim) = (r.u32()? as usize, r.u32()? as usize);
            if in_dim != sizes[k] || out_dim != sizes[k + 1] {
                return Err(Error::Checkpoint(format!(
                    "layer {k} is {in_dim}->{out_dim} but header says {}->{}",
                    sizes[k],
                    sizes[k + 1]
                )));
            }
            let weights = r.f64s(in_dim * out_dim)?;
            let bias = r.f64s(out_dim)?;
            layers.push(Layer::new(in_dim, out_dim, weights, bias).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = MlpParams::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            kind,
            n_agents,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Checkpoint {
            kind: ModelKind::Vdn,
            n_agents: 3,
            params: MlpParams::init(&[5, 4, 2], &mut rng).unwrap(),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"PVDN");
        assert_eq!(bytes[4], FORMAT_VERSION);
        assert_eq!(bytes[5], 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 2);
        // sizes 5, 4, 2 then first layer dims 5 -> 4
        let words: Vec<u32> = bytes[14..34]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![5, 4, 2, 5, 4]);
        let first_weight = f64::from_le_bytes(bytes[34..42].try_into().unwrap());
        assert_eq!(first_weight, sample().params.layers()[0].weights()[0]);
        assert_eq!(bytes.len(), 34 + 8 * (20 + 4) + 8 + 8 * (8 + 2));
    }

    #[test]
    fn decode_inverts_encode() {
        let c = sample();
        assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes;
        bad.push(0);
        assert!(Checkpoint::decode(&bad).is_err());
    }
}
