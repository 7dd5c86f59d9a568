//! Binary checkpoint container, little-endian throughout:
//!
//! ```text
//! magic     8 bytes  "EDCKPT01"
//! classes   u32
//! input     u32 rank, then rank x u32
//! specs     u32 count, then per layer: u8 kind + kind-specific u32 fields
//!             0 conv2d  filters kernel_h kernel_w stride padding
//!             1 dense   units
//!             2 relu    3 flatten
//!             4 maxpool size
//! params    per parameterized layer: weight then bias, each
//!             u32 rank, rank x u32 dims, len x f64 (IEEE-754 bits)
//! state     u32 length (u32::MAX = none), then length bytes of '0'/'1'
//! seed      u64
//! counter   u64 training iterations performed
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, Param};
use crate::state::PruningState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EDCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub best_state: Option<PruningState>,
    pub seed: u64,
    pub counter: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(self.net.num_classes());
        w.u32(self.net.input_shape().len());
        for &d in self.net.input_shape() {
            w.u32(d);
        }
        w.u32(self.net.specs().len());
        for spec in self.net.specs() {
            match *spec {
                LayerSpec::Conv2d { filters, kernel_h, kernel_w, stride, padding } => {
                    w.0.push(0);
                    for v in [filters, kernel_h, kernel_w, stride, padding] {
                        w.u32(v);
                    }
                }
                LayerSpec::Dense { units } => {
                    w.0.push(1);
                    w.u32(units);
                }
                LayerSpec::Relu => w.0.push(2),
                LayerSpec::Flatten => w.0.push(3),
                LayerSpec::MaxPool2d { size } => {
                    w.0.push(4);
                    w.u32(size);
                }
            }
        }
        for p in self.net.params().iter().flatten() {
            w.tensor(&p.weight);
            w.tensor(&p.bias);
        }
        match &self.best_state {
            Some(s) => {
                w.u32(s.len());
                w.0.extend(s.to_string().bytes());
            }
            None => w.0.extend_from_slice(&u32::MAX.to_le_bytes()),
        }
        w.0.extend_from_slice(&self.seed.to_le_bytes());
        w.0.extend_from_slice(&self.counter.to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let classes = r.u32()?;
        let rank = r.u32()?;
        let input = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()?;
        let mut specs = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            specs.push(match r.u8()? {
                0 => LayerSpec::Conv2d {
                    filters: r.u32()?,
                    kernel_h: r.u32()?,
                    kernel_w: r.u32()?,
                    stride: r.u32()?,
                    padding: r.u32()?,
                },
                1 => LayerSpec::Dense { units: r.u32()? },
                2 => LayerSpec::Relu,
                3 => LayerSpec::Flatten,
                4 => LayerSpec::MaxPool2d { size: r.u32()? },
                k => return Err(Error::Checkpoint(format!("unknown layer kind {k}"))),
            });
        }
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            params.push(if spec.has_params() { Some(Param { weight: r.tensor()?, bias: r.tensor()? }) } else { None });
        }
        let net = Network::from_parts(specs, input, classes, params)?;
        let len = r.u32()?;
        let best_state = if len == u32::MAX as usize {
            None
        } else {
            let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let s: PruningState = text.parse()?;
            s.check_len(net.num_units())?;
            Some(s)
        };
        let seed = r.u64()?;
        let counter = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { net, best_state, seed, counter })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::presets;
    use proptest::prelude::*;

    fn sample(seed: u64, state: Option<PruningState>) -> Checkpoint {
        let net = Network::build(&presets::by_name("smallcnn", 4).unwrap(), &[1, 8, 8], 4, seed).unwrap();
        Checkpoint { net, best_state: state, seed, counter: 17 }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample(1, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), raw in any::<u64>(), has_state in any::<bool>()) {
            let state = has_state.then(|| PruningState::from_index(raw % (1 << 20), 56));
            let ck = sample(seed, state);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.net.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            ck.net.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, ck);
        }
    }
}
