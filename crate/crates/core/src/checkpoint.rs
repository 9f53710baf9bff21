//! Checkpoint blob format shared by pretraining and end-to-end training.
//!
//! Layout (little-endian):
//!   magic "BVCK" | u32 version | u64 body_len | body | u32 crc32(body)
//! Body:
//!   u64 epoch | u64 step | u64 optimizer step
//!   u32 config text length | config text (utf-8)
//!   u32 param count, then per param:
//!     u32 name len | name | u32 ndim | u64 dims... | f64 value | f64 m | f64 v

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamStore};
use crate::tensor::Arr;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BVCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    pub epoch: u64,
    pub step: u64,
    pub opt_step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    ctx: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!("{}: body ends early", self.ctx)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn encode_body(cfg: &RunConfig, ps: &ParamStore, state: TrainState) -> Vec<u8> {
    let mut body = Vec::new();
    put_u64(&mut body, state.epoch);
    put_u64(&mut body, state.step);
    put_u64(&mut body, state.opt_step);
    let cfg_text = cfg.to_text();
    put_u32(&mut body, cfg_text.len() as u32);
    body.extend_from_slice(cfg_text.as_bytes());

    let mut entries = ps.export();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    put_u32(&mut body, entries.len() as u32);
    for (name, value, m, v) in &entries {
        put_u32(&mut body, name.len() as u32);
        body.extend_from_slice(name.as_bytes());
        put_u32(&mut body, value.ndim() as u32);
        for &d in value.shape() {
            put_u64(&mut body, d as u64);
        }
        for arr in [value, m, v] {
            for &x in arr.iter() {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    body
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    ps: &ParamStore,
    opt: &AdamW,
    epoch: u64,
    step: u64,
) -> Result<()> {
    let body = encode_body(cfg, ps, TrainState { epoch, step, opt_step: opt.step });
    let mut out = Vec::with_capacity(body.len() + 20);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, body.len() as u64);
    out.extend_from_slice(&body);
    put_u32(&mut out, crc32fast::hash(&body));
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reports the first config field that differs between the checkpoint and the
/// running config as a [`Error::CheckpointMismatch`]. Training-schedule and
/// data-generation fields may differ; architecture and horizon fields must
/// match because parameter shapes depend on them.
fn check_config(saved: &RunConfig, cfg: &RunConfig) -> Result<()> {
    let strict = [
        "d_model",
        "n_bev_queries",
        "k_modes",
        "n_heads",
        "n_points",
        "key_points",
        "knn",
        "ffn_mult",
        "pre_encoder_layers",
        "bda_layers",
        "local_attn_layers",
        "sgcp_blocks",
        "itr_blocks",
        "encoder_blocks",
        "t_history",
        "t_future",
        "grid_h",
        "grid_w",
    ];
    let kv = |c: &RunConfig| -> std::collections::BTreeMap<String, String> {
        c.to_text()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    };
    let (a, b) = (kv(saved), kv(cfg));
    for field in strict {
        let (fa, fb) = (&a[field], &b[field]);
        if fa != fb {
            return Err(Error::CheckpointMismatch {
                field: field.to_string(),
                found: fa.clone(),
                expected: fb.clone(),
            });
        }
    }
    Ok(())
}

/// Loads a checkpoint into `ps` (values and optimizer moments), restores the
/// optimizer step, and returns the stored train state and config.
pub fn load_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    ps: &ParamStore,
    opt: &mut AdamW,
) -> Result<(TrainState, RunConfig)> {
    let ctx = path.display().to_string();
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 16 {
        return Err(Error::Truncated(format!("{ctx}: header incomplete")));
    }
    if &raw[0..4] != MAGIC {
        return Err(Error::BadMagic(ctx));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let body_len = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if raw.len() < 16 + body_len + 4 {
        return Err(Error::Truncated(format!("{ctx}: body incomplete")));
    }
    let body = &raw[16..16 + body_len];
    let want = u32::from_le_bytes(raw[16 + body_len..16 + body_len + 4].try_into().unwrap());
    if crc32fast::hash(body) != want {
        return Err(Error::ChecksumMismatch(ctx));
    }

    let mut r = Reader { buf: body, pos: 0, ctx };
    let epoch = r.u64()?;
    let step = r.u64()?;
    let opt_step = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| Error::Truncated(format!("config text: {e}")))?;
    let saved_cfg = RunConfig::parse(cfg_text)?;
    check_config(&saved_cfg, cfg)?;

    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Truncated(format!("param name: {e}")))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut arrs = Vec::with_capacity(3);
        for _ in 0..3 {
            arrs.push(Arr::from_shape_vec(IxDyn(&dims), r.f64s(count)?).unwrap());
        }
        let v = arrs.pop().unwrap();
        let m = arrs.pop().unwrap();
        let value = arrs.pop().unwrap();
        entries.push((name, value, m, v));
    }
    ps.import(entries);
    opt.step = opt_step;
    Ok((TrainState { epoch, step, opt_step }, saved_cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use tempfile::tempdir;

    fn store_with_params(seed: u64) -> ParamStore {
        let ps = ParamStore::new(seed);
        let _ = ps.param("a.w", &[3, 4], Init::Xavier { fan_in: 3, fan_out: 4 });
        let _ = ps.param("a.b", &[4], Init::Zeros);
        let _ = ps.param("z.k", &[2, 2, 2], Init::Uniform(0.3));
        ps
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bvck");
        let cfg = RunConfig::small();
        let ps = store_with_params(1);
        ps.with_slot("a.w", |s| {
            s.m.fill(0.25);
            s.v.fill(0.125);
        });
        let mut opt = AdamW::new(0.01, 5.0);
        opt.step = 17;
        save_checkpoint(&path, &cfg, &ps, &opt, 3, 99).unwrap();

        let ps2 = ParamStore::new(2);
        let mut opt2 = AdamW::new(0.01, 5.0);
        let (state, saved_cfg) = load_checkpoint(&path, &cfg, &ps2, &mut opt2).unwrap();
        assert_eq!(state, TrainState { epoch: 3, step: 99, opt_step: 17 });
        assert_eq!(opt2.step, 17);
        assert_eq!(saved_cfg.d_model, cfg.d_model);
        for (name, value, m, v) in ps.export() {
            let (v2, m2, vv2) = ps2
                .with_slot(&name, |s| (s.value.clone(), s.m.clone(), s.v.clone()))
                .unwrap();
            assert!(value.iter().zip(v2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(m.iter().zip(m2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(v.iter().zip(vv2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn mismatched_architecture_is_rejected_by_field_name() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bvck");
        let cfg = RunConfig::small();
        let ps = store_with_params(3);
        let opt = AdamW::new(0.01, 5.0);
        save_checkpoint(&path, &cfg, &ps, &opt, 0, 0).unwrap();

        let mut other = cfg.clone();
        other.d_model = 64;
        let ps2 = ParamStore::new(4);
        let mut opt2 = AdamW::new(0.01, 5.0);
        match load_checkpoint(&path, &other, &ps2, &mut opt2) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "d_model"),
            other => panic!("expected CheckpointMismatch, got {other:?}"),
        }
        // schedule fields may differ freely
        let mut sched = cfg.clone();
        sched.lr = 9.0;
        sched.epochs = 1;
        assert!(load_checkpoint(&path, &sched, &ps2, &mut opt2).is_ok());
    }

    #[test]
    fn corruption_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bvck");
        let cfg = RunConfig::small();
        let ps = store_with_params(5);
        let opt = AdamW::new(0.01, 5.0);
        save_checkpoint(&path, &cfg, &ps, &opt, 0, 0).unwrap();
        let mut raw = fs::read(&path).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0xFF;
        fs::write(&path, &raw).unwrap();
        let ps2 = ParamStore::new(6);
        let mut opt2 = AdamW::new(0.01, 5.0);
        assert!(matches!(
            load_checkpoint(&path, &cfg, &ps2, &mut opt2),
            Err(Error::ChecksumMismatch(_))
        ));
    }
}
