//! `CKPT` binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CKPT" | u32 version | u32 entry count
//! entries: u16 name length | UTF-8 name | u8 rank | u32 dim × rank | f32 × numel
//! trailer: u32 config length | UTF-8 config | u32 epoch
//!          | [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! ```

use std::path::Path;

use cvaegan_tensor::{EntryKind, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::optim::Adam;

pub const CKPT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CKPT";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
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

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
    /// Text of the configuration the run was started with.
    pub config: String,
    /// Number of completed epochs.
    pub epoch: u32,
    pub rng: RngState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(config: String, epoch: u32, rng: RngState) -> Self {
        Checkpoint {
            entries: Vec::new(),
            config,
            epoch,
            rng,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("entry name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::config(format!("rank too large: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::config(format!("dimension too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "missing CKPT magic"));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version} (expected {CKPT_VERSION})")));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = r.string(len, "entry name")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let at = r.pos;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(at as u64, format!("shape of `{name}` overflows")))?;
            let data = r
                .take(numel, "tensor payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        let len = r.u32("config length")? as usize;
        let config = r.string(len, "config")?;
        let epoch = r.u32("epoch")?;
        let rng = RngState {
            seed: r.array("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: r.u128("rng position")?,
        };
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes"));
        }
        Ok(Checkpoint {
            entries,
            config,
            epoch,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Appends every entry of `store` as `prefix/name`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for e in store.entries() {
            self.entries.push((format!("{prefix}/{}", e.name), e.value.clone()));
        }
    }

    /// Overwrites `store` with the `prefix/…` entries, which must all be
    /// present with matching shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}/{}", store.name(id));
            let t = self
                .get(&name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::config(format!(
                    "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// Appends the optimizer's step count (`prefix.step`, rank 0) and its
    /// moments (`prefix.m/name`, `prefix.v/name`).
    pub fn push_adam(&mut self, prefix: &str, adam: &Adam<f32>, store: &ParamStore<f32>) {
        self.entries
            .push((format!("{prefix}.step"), Tensor::scalar(adam.step_count() as f32)));
        for id in store.ids() {
            if let Some((m, v)) = adam.moments(id.index()) {
                let name = store.name(id);
                self.entries.push((format!("{prefix}.m/{name}"), m.clone()));
                self.entries.push((format!("{prefix}.v/{name}"), v.clone()));
            }
        }
    }

    pub fn load_adam(&self, prefix: &str, adam: &mut Adam<f32>, store: &ParamStore<f32>) -> Result<()> {
        let step = self
            .get(&format!("{prefix}.step"))
            .ok_or_else(|| Error::config(format!("checkpoint lacks `{prefix}.step`")))?
            .item()? as u64;
        let moments = store
            .entries()
            .iter()
            .map(|e| {
                if e.kind != EntryKind::Trainable {
                    return None;
                }
                let m = self.get(&format!("{prefix}.m/{}", e.name))?;
                let v = self.get(&format!("{prefix}.v/{}", e.name))?;
                Some((m.clone(), v.clone()))
            })
            .collect();
        adam.restore(step, moments);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("stage=1\n".into(), 7, RngState::capture(&ChaCha8Rng::seed_from_u64(3)));
        c.entries.push(("a/w".into(), Tensor::new([2, 3], vec![1.0, -0.0, 3.5, f32::MIN_POSITIVE, 5.0, 6.0]).unwrap()));
        c.entries.push(("opt.step".into(), Tensor::scalar(12.0)));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 11, 20, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = a.random();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
