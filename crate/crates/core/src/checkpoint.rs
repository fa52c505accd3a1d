//! Binary model container.
//!
//! All integers and floats are little-endian. Layout, version 1:
//!
//! ```text
//! magic            4 bytes   "DOSS"
//! version          u32       1
//! num_classes      u32
//! input_dim        u32
//! topology         u32       0 single head, 1 shared decoder, 2 dual decoder
//! seed             u64
//! n_encoder        u32, then n_encoder x u32 widths
//! n_decoder        u32, then n_decoder x u32 widths
//! n_known          u32, then n_known x u16 class ids (ascending)
//! n_tensors        u32, then per tensor:
//!                    rows u32, cols u32, rows*cols x f64 (row-major)
//!                  weights and biases alternate, layer by layer
//! mu_ready         u8        0 or 1
//! mu_bar           tensor    (rows u32, cols u32, f64 data)
//! epoch_sum        tensor
//! center           tensor
//! epoch_count      num_classes x u64
//! center_count     num_classes x u64
//! ```
//!
//! Nothing follows the last field; trailing bytes are a format error.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::io::ClassId;
use crate::losses::ClassMeanState;
use crate::network::{Linear, NetConfig, Network, Topology};
use crate::voxel::KnownClasses;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DOSS";
pub const VERSION: u32 = 1;

/// Trained network, its class set, and the mean-state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub known: KnownClasses,
    pub state: ClassMeanState,
}

impl Checkpoint {
    pub fn new(net: Network, known: KnownClasses, state: ClassMeanState) -> Result<Self> {
        if net.num_classes() != known.len() {
            return Err(Error::Config(format!(
                "network has {} classes but the known set has {}",
                net.num_classes(),
                known.len()
            )));
        }
        if state.num_classes() != known.len() {
            return Err(Error::Config("mean state does not match the class count".into()));
        }
        Ok(Checkpoint { net, known, state })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        let cfg = self.net.config();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u32(&mut w, cfg.num_classes as u32);
        put_u32(&mut w, cfg.input_dim as u32);
        put_u32(&mut w, cfg.topology.code());
        w.extend_from_slice(&cfg.seed.to_le_bytes());
        for widths in [&cfg.encoder_widths, &cfg.decoder_widths] {
            put_u32(&mut w, widths.len() as u32);
            for &x in widths.iter() {
                put_u32(&mut w, x as u32);
            }
        }
        put_u32(&mut w, self.known.len() as u32);
        for &id in self.known.ids() {
            w.extend_from_slice(&id.to_le_bytes());
        }
        put_u32(&mut w, (2 * self.net.layers().len()) as u32);
        for t in self.net.params() {
            put_tensor(&mut w, t);
        }
        let s = &self.state;
        w.push(u8::from(s.mu_ready));
        for t in [&s.mu_bar, &s.epoch_sum, &s.center] {
            put_tensor(&mut w, t);
        }
        for counts in [&s.epoch_count, &s.center_count] {
            for &c in counts.iter() {
                w.extend_from_slice(&c.to_le_bytes());
            }
        }
        w
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let num_classes = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let topology = Topology::from_code(r.u32()?).map_err(|e| Error::format(path, e.to_string()))?;
        let seed = r.u64()?;
        let encoder_widths = r.widths()?;
        let decoder_widths = r.widths()?;
        let cfg = NetConfig {
            num_classes,
            input_dim,
            encoder_widths,
            decoder_widths,
            topology,
            seed,
        };
        let n_known = r.u32()? as usize;
        let mut ids: Vec<ClassId> = Vec::with_capacity(n_known.min(1 << 16));
        for _ in 0..n_known {
            let b = r.take(2)?;
            ids.push(u16::from_le_bytes([b[0], b[1]]));
        }
        let known = KnownClasses::new(ids).map_err(|e| Error::format(path, e.to_string()))?;
        let n_tensors = r.u32()? as usize;
        if n_tensors % 2 != 0 {
            return Err(Error::format(path, "odd parameter tensor count"));
        }
        let mut layers = Vec::with_capacity(n_tensors / 2);
        for _ in 0..n_tensors / 2 {
            let weight = r.tensor()?;
            let bias = r.tensor()?;
            layers.push(Linear { weight, bias });
        }
        let net = Network::from_layers(cfg, layers).map_err(|e| Error::format(path, e.to_string()))?;
        let mu_ready = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(path, format!("bad mu_ready flag {b}"))),
        };
        let mu_bar = r.tensor()?;
        let epoch_sum = r.tensor()?;
        let center = r.tensor()?;
        let epoch_count = r.counts(num_classes)?;
        let center_count = r.counts(num_classes)?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        let shape = [num_classes, num_classes];
        if [&mu_bar, &epoch_sum, &center].iter().any(|t| t.shape() != shape) {
            return Err(Error::format(path, "mean-state tensors have the wrong shape"));
        }
        let state = ClassMeanState {
            mu_bar,
            mu_ready,
            epoch_sum,
            epoch_count,
            center,
            center_count,
        };
        Checkpoint::new(net, known, state).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    put_u32(w, t.rows() as u32);
    put_u32(w, t.cols() as u32);
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    fn counts(&mut self, n: usize) -> Result<Vec<u64>> {
        (0..n).map(|_| self.u64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(self.path, "tensor size overflows"))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(rows, cols, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(topology: Topology) -> Checkpoint {
        let cfg = NetConfig {
            num_classes: 3,
            encoder_widths: vec![5, 6],
            decoder_widths: vec![4],
            topology,
            seed: 9,
            ..NetConfig::default()
        };
        let net = Network::new(cfg).unwrap();
        let mut state = ClassMeanState::new(3, 3);
        state.update(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]), &[Some(1)]);
        state.end_epoch();
        Checkpoint::new(net, KnownClasses::new(vec![40, 10, 50]).unwrap(), state).unwrap()
    }

    #[test]
    fn round_trip_every_topology() {
        for t in [Topology::SingleHead, Topology::SharedDecoderDualHead, Topology::DualDecoder] {
            let ck = sample(t);
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }

    #[test]
    fn header_fields_at_documented_offsets() {
        let b = sample(Topology::DualDecoder).to_bytes();
        assert_eq!(&b[0..4], b"DOSS");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 9);
    }

    #[test]
    fn corrupted_inputs_are_format_errors() {
        let b = sample(Topology::DualDecoder).to_bytes();
        let p = Path::new("mem");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1], p), Err(Error::Format { .. })));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long, p), Err(Error::Format { .. })));
        let mut v2 = b;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, p), Err(Error::Format { .. })));
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let ck = sample(Topology::SingleHead);
        let known = KnownClasses::new(vec![1, 2]).unwrap();
        assert!(Checkpoint::new(ck.net, known, ck.state).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample(Topology::SharedDecoderDualHead);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
