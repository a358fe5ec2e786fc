//! Checkpoint container: a fixed little-endian binary layout holding the
//! resolved run configuration, the step counter, and named tensor groups
//! (parameters, optional EMA shadow, optional optimizer moments).
//!
//! Layout:
//!
//! ```text
//! magic  b"FACMCKPT"
//! u32    format version (currently 1)
//! u64    config text length, then that many UTF-8 bytes
//! u64    training step
//! u8     flags: bit 0 = EMA present, bit 1 = optimizer present
//! u64    optimizer step counter (0 when absent)
//! u32    tensor count
//! per tensor:
//!   u32  name length, then UTF-8 name ("param.x", "ema.x", "opt.m.x", "opt.v.x")
//!   u32  rank, then rank u64 dims
//!   f64  payload, dims product values
//! ```
//!
//! Saving goes through a temporary file in the target directory followed by
//! a rename, so a crash never leaves a half-written checkpoint at the
//! final path. Loading is strict: truncation, trailing bytes, unknown
//! prefixes, or group/name mismatches are format errors, never panics.

use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FACMCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptSnapshot {
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub ema: Option<Vec<(String, Tensor)>>,
    pub opt: Option<OptSnapshot>,
}

impl Checkpoint {
    /// Network built from the online parameters.
    pub fn network(&self) -> Result<Network> {
        Network::from_named_params(self.config.network_config(), self.params.clone())
    }

    /// Network used for evaluation and sampling: EMA shadow when present,
    /// online parameters otherwise.
    pub fn eval_network(&self) -> Result<Network> {
        match &self.ema {
            Some(ema) => Network::from_named_params(self.config.network_config(), ema.clone()),
            None => self.network(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let mut flags = 0u8;
        if self.ema.is_some() {
            flags |= 1;
        }
        if self.opt.is_some() {
            flags |= 2;
        }
        out.push(flags);
        out.extend_from_slice(&self.opt.as_ref().map_or(0, |o| o.steps).to_le_bytes());

        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in &self.params {
            tensors.push((format!("param.{n}"), t));
        }
        if let Some(ema) = &self.ema {
            for (n, t) in ema {
                tensors.push((format!("ema.{n}"), t));
            }
        }
        if let Some(opt) = &self.opt {
            for (n, t) in &opt.m {
                tensors.push((format!("opt.m.{n}"), t));
            }
            for (n, t) in &opt.v {
                tensors.push((format!("opt.v.{n}"), t));
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::CheckpointFormat("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointFormat(format!(
                "format version {version} unsupported (expected {VERSION})"
            )));
        }
        let cfg_len = r.u64()? as usize;
        if cfg_len > 1 << 20 {
            return Err(Error::CheckpointFormat(format!("config blob length {cfg_len} implausible")));
        }
        let cfg_bytes = r.take(cfg_len)?;
        let cfg_text = std::str::from_utf8(cfg_bytes)
            .map_err(|e| Error::CheckpointFormat(format!("config blob is not UTF-8: {e}")))?;
        let config = TrainConfig::from_text(cfg_text)
            .map_err(|e| Error::CheckpointFormat(format!("embedded config invalid: {e}")))?;
        let step = r.u64()?;
        let flags = r.take(1)?[0];
        if flags & !3 != 0 {
            return Err(Error::CheckpointFormat(format!("unknown flag bits {flags:#04x}")));
        }
        let opt_steps = r.u64()?;
        let count = r.u32()? as usize;
        if count > 1 << 16 {
            return Err(Error::CheckpointFormat(format!("tensor count {count} implausible")));
        }

        let mut params = Vec::new();
        let mut ema = Vec::new();
        let mut opt_m = Vec::new();
        let mut opt_v = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::CheckpointFormat(format!("tensor name length {name_len} implausible")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::CheckpointFormat(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CheckpointFormat(format!("tensor rank {rank} implausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u64()? as usize;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= 1 << 28)
                    .ok_or_else(|| Error::CheckpointFormat("tensor size overflow".into()))?;
                shape.push(d);
            }
            let payload = r.take(numel * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data);
            if let Some(n) = name.strip_prefix("param.") {
                params.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("ema.") {
                ema.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("opt.m.") {
                opt_m.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("opt.v.") {
                opt_v.push((n.to_string(), t));
            } else {
                return Err(Error::CheckpointFormat(format!("unknown tensor group for {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        if params.is_empty() {
            return Err(Error::CheckpointFormat("no parameters in checkpoint".into()));
        }

        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let check_group = |group: &[(String, Tensor)], label: &str| -> Result<()> {
            let got: Vec<&str> = group.iter().map(|(n, _)| n.as_str()).collect();
            if got != names {
                return Err(Error::CheckpointFormat(format!(
                    "{label} tensor names do not mirror the parameter names"
                )));
            }
            Ok(())
        };

        let ema = if flags & 1 != 0 {
            check_group(&ema, "ema")?;
            Some(ema)
        } else if ema.is_empty() {
            None
        } else {
            return Err(Error::CheckpointFormat("ema tensors present but flag unset".into()));
        };
        let opt = if flags & 2 != 0 {
            check_group(&opt_m, "opt.m")?;
            check_group(&opt_v, "opt.v")?;
            Some(OptSnapshot { m: opt_m, v: opt_v, steps: opt_steps })
        } else if opt_m.is_empty() && opt_v.is_empty() {
            None
        } else {
            return Err(Error::CheckpointFormat("optimizer tensors present but flag unset".into()));
        };

        Ok(Checkpoint { config, step, params, ema, opt })
    }

    /// Atomic write: temporary file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Paradigm;

    fn sample_checkpoint(with_extras: bool) -> Checkpoint {
        let mut config = TrainConfig::default_for(Paradigm::Distill);
        config.hidden_width = 8;
        config.depth = 2;
        config.time_embed_dim = 4;
        config.seed = 31;
        config.teacher = Some("runs/teacher.ckpt".into());
        let net = Network::init(config.network_config());
        let params: Vec<(String, Tensor)> = net.params().to_vec();
        let ema = with_extras.then(|| {
            params.iter().map(|(n, t)| (n.clone(), t.scale(0.5))).collect::<Vec<_>>()
        });
        let opt = with_extras.then(|| OptSnapshot {
            m: params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec()))).collect(),
            v: params.iter().map(|(n, t)| (n.clone(), Tensor::full(t.shape().to_vec(), 0.25))).collect(),
            steps: 137,
        });
        Checkpoint { config, step: 1000, params, ema, opt }
    }

    #[test]
    fn byte_round_trip_is_bit_exact() {
        for extras in [false, true] {
            let ck = sample_checkpoint(extras);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back, ck);
            let net = back.network().unwrap();
            assert_eq!(net.params().len(), back.params.len());
            let eval = back.eval_network().unwrap();
            if extras {
                assert_eq!(eval.params()[0].1, back.params[0].1.scale(0.5));
            } else {
                assert_eq!(eval.params()[0].1, back.params[0].1);
            }
        }
    }

    #[test]
    fn every_truncation_is_a_clean_error() {
        let bytes = sample_checkpoint(true).to_bytes();
        // bisect-ish sweep plus the exact boundaries around the header
        let mut cuts: Vec<usize> = (0..64).collect();
        cuts.extend((64..bytes.len()).step_by(97));
        cuts.push(bytes.len() - 1);
        for cut in cuts {
            let r = Checkpoint::from_bytes(&bytes[..cut]);
            assert!(r.is_err(), "prefix of {cut} bytes must not parse");
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let ck = sample_checkpoint(false);
        let mut bad_magic = ck.to_bytes();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());

        let mut bad_version = ck.to_bytes();
        bad_version[8] = 99;
        assert!(Checkpoint::from_bytes(&bad_version).is_err());

        let mut trailing = ck.to_bytes();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample_checkpoint(true);
        ck.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists(), "temp file renamed away");
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn scheme_mismatch_surfaces_when_rebuilding_the_network() {
        let mut ck = sample_checkpoint(false);
        // pretend the params came from the other scheme: extra tensors missing
        ck.config.scheme = crate::flow::ConditioningScheme::AuxiliaryTime;
        assert!(ck.network().is_err());
    }
}
