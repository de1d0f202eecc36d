//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `HDITCKPT`, version `u32`, config length
//! `u64` + TOML bytes, step `u64`, RNG seed `[u8; 32]`, RNG stream `u64`,
//! RNG word position `u128`, tensor count `u64`, then per tensor: name length
//! `u32`, name bytes, rank `u32`, dims as `u64`, `f32` payload.

use std::io::Read;
use std::path::Path;

use ndarray::ArrayViewD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::HyperDit;
use crate::module::Module;
use crate::trainer::TrainState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HDITCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

fn groups(state: &TrainState) -> [&HyperDit<f32>; 4] {
    [&state.params, &state.ema, &state.adam_m, &state.adam_v]
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &ArrayViewD<'_, f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(config: &RunConfig, state: &TrainState) -> Result<Vec<u8>> {
    let text = config.to_toml()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let count: usize = groups(state).iter().map(|m| m.tensors().len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (group, model) in GROUPS.iter().zip(groups(state)) {
        for (name, t) in model.tensors() {
            write_tensor(&mut out, &format!("{group}/{name}"), &t);
        }
    }
    Ok(out)
}

pub fn save_checkpoint(config: &RunConfig, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_bytes(config, state)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    input: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.input.len() < n {
            return Err(Error::CorruptFile("truncated checkpoint".into()));
        }
        let (head, tail) = self.input.split_at(n);
        self.input = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(RunConfig, TrainState)> {
    let mut r = Reader { input: bytes };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptFile("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::CorruptFile("config length".into()))?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::CorruptFile("config is not UTF-8".into()))?;
    let config = RunConfig::from_toml(text).map_err(|e| Error::CorruptFile(format!("embedded config: {e}")))?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let zeros = HyperDit::<f32>::zeros(config.model.clone())?;
    let mut models = [zeros.clone(), zeros.clone(), zeros.clone(), zeros];
    let expected: usize = models.iter().map(|m| m.tensors().len()).sum();
    let count = r.u64()?;
    if count != expected as u64 {
        return Err(Error::CorruptFile(format!("{count} tensors, config implies {expected}")));
    }
    for (group, model) in GROUPS.iter().zip(models.iter_mut()) {
        for (name, mut t) in model.tensors_mut() {
            let want = format!("{group}/{name}");
            let name_len = r.u32()? as usize;
            let got = r.take(name_len)?;
            if got != want.as_bytes() {
                return Err(Error::CorruptFile(format!(
                    "expected tensor `{want}`, found `{}`",
                    String::from_utf8_lossy(got)
                )));
            }
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            if dims != t.shape() {
                return Err(Error::CorruptFile(format!(
                    "tensor `{want}` has shape {dims:?}, expected {:?}",
                    t.shape()
                )));
            }
            let raw = r.take(4 * t.len())?;
            for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
    }
    if !r.input.is_empty() {
        return Err(Error::CorruptFile("trailing bytes in checkpoint".into()));
    }
    let [params, ema, adam_m, adam_v] = models;
    Ok((config, TrainState { step, params, ema, adam_m, adam_v, rng }))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RunConfig, TrainState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it was written for `model`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, model: &ModelConfig) -> Result<(RunConfig, TrainState)> {
    let (config, state) = load_checkpoint(path)?;
    if &config.model != model {
        return Err(Error::VersionMismatch("checkpoint was written for a different model configuration".into()));
    }
    Ok((config, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};
    use crate::trainer::Trainer;

    fn small_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.model = ModelConfig {
            image_height: 8,
            image_width: 8,
            large_patch: 4,
            small_patch: 2,
            hidden: 16,
            heads: 2,
            depth: 2,
            connectors: 2,
            anchor_interval: 1,
            registers: 4,
            timestep_freq_dim: 16,
            align_dim: 6,
            align_hidden: 16,
            ..ModelConfig::nano()
        };
        config.features.tokens = 4;
        config.train.batch = 4;
        config.train.lr = 1e-3;
        config
    }

    #[test]
    fn round_trip_and_resume_are_exact() {
        let config = small_config();
        let ds = generate_synthetic_dataset(&SyntheticSpec { size: 8, count: 16, seed: 5 });
        let feats = crate::trainer::dataset_features(&config, &ds, None).unwrap();
        let mut full = Trainer::new(config.clone(), &ds, feats.clone()).unwrap();
        full.run_until(3, |_, _| Ok(())).unwrap();

        let bytes = checkpoint_bytes(&config, &full.state).unwrap();
        let (cfg2, state2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(cfg2, config);
        assert_eq!(state2, full.state);
        assert_eq!(checkpoint_bytes(&cfg2, &state2).unwrap(), bytes);

        let mut resumed = Trainer::resume(cfg2, &ds, feats, state2).unwrap();
        full.run_until(7, |_, _| Ok(())).unwrap();
        resumed.run_until(7, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn file_round_trip_and_model_check() {
        let config = small_config();
        let state = TrainState::new(&config.model, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&config, &state, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (cfg, loaded) = load_checkpoint_for(&path, &config.model).unwrap();
        let again = dir.path().join("b.ckpt");
        save_checkpoint(&cfg, &loaded, &again).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), first);

        let other = ModelConfig { hidden: 32, ..config.model.clone() };
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn malformed_bytes_are_rejected() {
        let config = small_config();
        let state = TrainState::new(&config.model, 3).unwrap();
        let bytes = checkpoint_bytes(&config, &state).unwrap();
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::CorruptFile(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(parse_checkpoint(&extra), Err(Error::CorruptFile(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(parse_checkpoint(&magic), Err(Error::CorruptFile(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(parse_checkpoint(&version), Err(Error::VersionMismatch(_))));
    }
}
