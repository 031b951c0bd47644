use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Module, Tensor};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"AMAUTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training progress stored next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: u64,
    pub rng: Rng,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState { epoch: 0, rng: Rng::seed_from_u64(0) }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub fn encode_checkpoint(model: &mut Model<f32>, state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_string(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_bytes(&mut out, config.as_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&state.epoch.to_le_bytes());

    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    model.visit_params(&mut |n, t| tensors.push((n.to_string(), t.clone())));
    model.visit_buffers(&mut |n, t| tensors.push((n.to_string(), t.clone())));
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in &tensors {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(Model<f32>, TrainState)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let config: ModelConfig =
        serde_json::from_slice(r.bytes("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let rng_stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
    let epoch = r.u64("epoch")?;
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(rng_stream);
    rng.set_word_pos(word_pos);

    let count = r.u32("tensor count")? as usize;
    let mut stored: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name = String::from_utf8(r.bytes("tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32("tensor rank")? as usize;
        let shape = (0..ndim).map(|_| r.u32("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if stored.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let mut model = Model::<f32>::new(config, 0).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut problem: Option<String> = None;
    let mut fill = |name: &str, t: &mut Tensor<f32>| match stored.remove(name) {
        Some((shape, data)) if shape == t.shape() => t.data_mut().copy_from_slice(&data),
        Some((shape, _)) => {
            problem.get_or_insert(format!("{name}: stored shape {shape:?}, model expects {:?}", t.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing tensor {name}"));
        }
    };
    model.visit_params(&mut fill);
    model.visit_buffers(&mut fill);
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((model, TrainState { epoch, rng }))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &mut Model<f32>, state: &TrainState) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, TrainState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MelParams;
    use crate::model::plan_cnn;
    use crate::numerics::{Ctx, Layer, Mode};
    use crate::rng::seeded;
    use rand::RngCore;

    fn model() -> Model<f32> {
        let mel = MelParams { n_mels: 8, ..Default::default() };
        let mut cfg = ModelConfig::for_input(mel, 8000, 1.0, 3, 6, 8).unwrap();
        cfg.cnn = plan_cnn(98, 6, 8).unwrap().with_widths(6, 3, 1);
        cfg.n_transformer_blocks = 1;
        cfg.n_heads = 2;
        Model::new(cfg, 9).unwrap()
    }

    fn trained() -> Model<f32> {
        let mut m = model();
        let mut r = seeded(1);
        // Move the batch-norm statistics away from their initial values.
        for _ in 0..3 {
            let x = Tensor::randn(&[4, 8, 98], 1.0, &mut r);
            m.forward(&x, &mut Ctx::new(Mode::Train, &mut r)).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = trained();
        let mut rng = seeded(77);
        rng.next_u64();
        let state = TrainState { epoch: 12, rng };
        let bytes = encode_checkpoint(&mut m, &state).unwrap();
        let (mut back, st) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(st, state);
        assert_eq!(back.config(), m.config());
        let x = Tensor::randn(&[3, 8, 98], 1.0, &mut seeded(2));
        let a = m.forward(&x, &mut Ctx::new(Mode::Eval, &mut seeded(0))).unwrap();
        let b = back.forward(&x, &mut Ctx::new(Mode::Eval, &mut seeded(0))).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(encode_checkpoint(&mut back, &st).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode_checkpoint(&mut model(), &TrainState::default()).unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_checkpoint(&mut model(), &TrainState::default()).unwrap();
        bytes[9] = 2;
        match decode_checkpoint(&bytes) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version 2")),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = trained();
        save_checkpoint(&path, &mut m, &TrainState::default()).unwrap();
        let (mut back, _) = load_checkpoint(&path).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        m.visit_buffers(&mut |_, t| a.extend_from_slice(t.data()));
        back.visit_buffers(&mut |_, t| b.extend_from_slice(t.data()));
        assert_eq!(a, b);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::File { .. })));
    }
}
