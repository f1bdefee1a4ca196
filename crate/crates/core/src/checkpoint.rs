//! Binary checkpoint container.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic            8 bytes  "LMCCKPT\0"
//! version          u32      FORMAT_VERSION
//! kind             u8       0 = encoder only, 1 = encoder + training state
//! encoder config   u32 x 7 (depth, heads, embed_dim, patch_size_tokens,
//!                  input_side, mlp_ratio, projector_dim or 0), u64 seed
//! tensor count     u32
//! per tensor       u32 path length, path bytes (UTF-8), u32 rank,
//!                  u64 per dimension, f64 per entry
//! training state   (kind 1 only) train config, optimizer moments in tensor
//!                  order, progress counters, shuffle order, RNG position
//! ```
//!
//! Trailing bytes are rejected.

use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams, ParamTensor};
use crate::error::{Error, Result};
use crate::manifold::AugmentationRange;
use crate::stain_math::StainBasis;
use crate::trainer::{Checkpoint, OptimizerState, RngState, TrainConfig, TrainingState};

pub const MAGIC: &[u8; 8] = b"LMCCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn usize32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("value fits in u32"));
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated file at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("invalid flag byte {v} at {}", self.pos - 1))),
        }
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

fn write_encoder_config(w: &mut Writer, c: &EncoderConfig) {
    w.usize32(c.depth);
    w.usize32(c.heads);
    w.usize32(c.embed_dim);
    w.usize32(c.patch_size_tokens);
    w.usize32(c.input_side);
    w.usize32(c.mlp_ratio);
    w.usize32(c.projector_dim.unwrap_or(0));
    w.u64(c.seed);
}

fn read_encoder_config(r: &mut Reader) -> Result<EncoderConfig> {
    Ok(EncoderConfig {
        depth: r.usize()?,
        heads: r.usize()?,
        embed_dim: r.usize()?,
        patch_size_tokens: r.usize()?,
        input_side: r.usize()?,
        mlp_ratio: r.usize()?,
        projector_dim: match r.usize()? {
            0 => None,
            n => Some(n),
        },
        seed: r.u64()?,
    })
}

fn write_train_config(w: &mut Writer, c: &TrainConfig) {
    w.u64(c.batch_size as u64);
    w.f64(c.base_lr);
    w.f64(c.final_lr);
    w.u64(c.warmup_steps as u64);
    w.u64(c.total_steps as u64);
    w.u64(c.anneal_start_step as u64);
    w.f64(c.weight_decay);
    w.f64(c.lambda);
    w.u64(c.seed);
    w.u8(c.center_embeddings as u8);
    w.u8(c.grad_clip.is_some() as u8);
    w.f64(c.grad_clip.unwrap_or(0.0));
    w.f64(c.augmentation.min);
    w.f64(c.augmentation.max);
    w.u8(c.fixed_basis.is_some() as u8);
    let (h, e) = c.fixed_basis.map_or(([0.0; 3], [0.0; 3]), |b| (b.h(), b.e()));
    w.f64s(&h);
    w.f64s(&e);
}

fn read_train_config(r: &mut Reader) -> Result<TrainConfig> {
    let batch_size = r.u64()? as usize;
    let base_lr = r.f64()?;
    let final_lr = r.f64()?;
    let warmup_steps = r.u64()? as usize;
    let total_steps = r.u64()? as usize;
    let anneal_start_step = r.u64()? as usize;
    let weight_decay = r.f64()?;
    let lambda = r.f64()?;
    let seed = r.u64()?;
    let center_embeddings = r.flag()?;
    let has_clip = r.flag()?;
    let clip = r.f64()?;
    let augmentation = AugmentationRange::new(r.f64()?, r.f64()?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let has_basis = r.flag()?;
    let h = r.f64s(3)?;
    let e = r.f64s(3)?;
    let fixed_basis = if has_basis {
        Some(
            StainBasis::new([h[0], h[1], h[2]], [e[0], e[1], e[2]])
                .map_err(|err| Error::Format(err.to_string()))?,
        )
    } else {
        None
    };
    Ok(TrainConfig {
        batch_size,
        base_lr,
        final_lr,
        warmup_steps,
        total_steps,
        anneal_start_step,
        weight_decay,
        lambda,
        seed,
        center_embeddings,
        grad_clip: has_clip.then_some(clip),
        augmentation,
        fixed_basis,
    })
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(ckpt.training.is_some() as u8);
    write_encoder_config(&mut w, ckpt.params.config());
    w.usize32(ckpt.params.tensors().len());
    for t in ckpt.params.tensors() {
        w.usize32(t.path.len());
        w.0.extend(t.path.as_bytes());
        w.usize32(t.shape.len());
        t.shape.iter().for_each(|d| w.u64(*d as u64));
        w.f64s(&t.data);
    }
    if let Some(st) = &ckpt.training {
        write_train_config(&mut w, &st.config);
        w.u64(st.optimizer.step);
        for t in st.optimizer.m.tensors().iter().chain(st.optimizer.v.tensors()) {
            w.f64s(&t.data);
        }
        w.u64(st.step);
        w.u64(st.epoch);
        w.u64(st.cursor);
        w.usize32(st.order.len());
        st.order.iter().for_each(|i| w.u32(*i));
        w.0.extend(st.rng.seed);
        w.u64(st.rng.stream);
        w.u128(st.rng.word_pos);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r
        .take(MAGIC.len())
        .map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic string {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let with_training = r.flag()?;
    let config = read_encoder_config(&mut r)?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored encoder config: {e}")))?;
    let n = r.usize()?;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.usize()?;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?
            .to_owned();
        let rank = r.usize()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let data = r.f64s(count)?;
        tensors.push(ParamTensor { path, shape, data });
    }
    let params = EncoderParams::from_tensors(config, tensors)
        .map_err(|e| Error::Format(format!("parameters do not match config: {e}")))?;

    let training = if with_training {
        let cfg = read_train_config(&mut r)?;
        let opt_step = r.u64()?;
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        for t in m.tensors_mut().iter_mut().chain(v.tensors_mut()) {
            t.data = r.f64s(t.data.len())?;
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let cursor = r.u64()?;
        let len = r.usize()?;
        let order = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        Some(TrainingState {
            config: cfg,
            optimizer: OptimizerState { m, v, step: opt_step },
            step,
            epoch,
            order,
            cursor,
            rng,
        })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing byte(s) after checkpoint",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, training })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use crate::trainer::Trainer;

    fn sample() -> Checkpoint {
        let enc = EncoderConfig {
            projector_dim: Some(4),
            ..EncoderConfig::tiny()
        };
        let cfg = TrainConfig {
            fixed_basis: Some(StainBasis::reference()),
            grad_clip: Some(1.5),
            ..TrainConfig::with_total_steps(10)
        };
        Trainer::new(&enc, &cfg).unwrap().checkpoint()
    }

    #[test]
    fn round_trip_is_structural_and_byte_exact() {
        let ck = sample();
        let bytes = to_bytes(&ck);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(to_bytes(&back), bytes);

        let enc_only = Checkpoint {
            params: init_params(&EncoderConfig::tiny()).unwrap(),
            training: None,
        };
        assert_eq!(from_bytes(&to_bytes(&enc_only)).unwrap(), enc_only);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = to_bytes(&sample());
        bytes[0] = b'X';
        let err = from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("magic")), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&sample());
        bytes[8] = 99;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_and_trailing() {
        let bytes = to_bytes(&sample());
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
    }
}
