//! On-disk dataset format.
//!
//! A dataset is a directory with a text `index.txt` plus one binary record
//! per sample. Record layout (little-endian):
//!
//! ```text
//! magic "BVTD" | u32 version | u64 body_len | body | u32 crc32(body)
//! ```
//!
//! The body holds scene metadata, agent tracks (f64), and named grids
//! (raster channels as f32, segmentation labels as u8). Readers distinguish
//! bad magic, version mismatch, truncation, and checksum corruption.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::{AgentKind, AgentState, AgentTrack, BevRasterInput, SceneSample};
use crate::error::{Error, Result};
use crate::geom::{GridSpec, Pose2};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BVTD";
const INDEX_NAME: &str = "index.txt";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "{}: needed {n} bytes at offset {}, have {}",
                self.ctx,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Truncated(format!("{}: invalid utf-8 string", self.ctx)))
    }
}

fn encode_body(s: &SceneSample) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(s.scene_id);
    w.f64(s.ego_pose.x);
    w.f64(s.ego_pose.y);
    w.f64(s.ego_pose.yaw);
    w.u32(s.target_id);
    w.u32(s.t_history as u32);
    w.u32(s.t_future as u32);
    w.f64(s.raster.spec.range_m);
    w.u32(s.raster.spec.height_cells as u32);
    w.u32(s.raster.spec.width_cells as u32);

    w.u32(s.agents.len() as u32);
    for a in &s.agents {
        w.u32(a.agent_id);
        w.str(a.kind.name());
        w.u32(a.states.len() as u32);
        for st in &a.states {
            w.f64(st.t);
            w.f64(st.x);
            w.f64(st.y);
            w.f64(st.yaw);
            w.f64(st.vx);
            w.f64(st.vy);
            w.u8(st.valid as u8);
        }
    }

    // named grids
    w.u32(2);
    w.str("channels");
    w.u8(0); // f32 payload
    let dim = s.raster.channels.dim();
    w.u32(3);
    for d in [dim.0, dim.1, dim.2] {
        w.u32(d as u32);
    }
    for &v in s.raster.channels.iter() {
        w.f32(v as f32);
    }
    w.str("seg_labels");
    w.u8(1); // u8 payload
    let ldim = s.seg_labels.dim();
    w.u32(2);
    for d in [ldim.0, ldim.1] {
        w.u32(d as u32);
    }
    for &v in s.seg_labels.iter() {
        w.u8(v);
    }
    w.buf
}

fn decode_body(body: &[u8], ctx: &str) -> Result<SceneSample> {
    let mut r = Reader { buf: body, pos: 0, ctx };
    let scene_id = r.u64()?;
    let ego_pose = Pose2::new(r.f64()?, r.f64()?, r.f64()?);
    let target_id = r.u32()?;
    let t_history = r.u32()? as usize;
    let t_future = r.u32()? as usize;
    let range_m = r.f64()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let spec = GridSpec::new(range_m, h, w)
        .map_err(|e| Error::Truncated(format!("{ctx}: {e}")))?;

    let n_agents = r.u32()? as usize;
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let agent_id = r.u32()?;
        let kind_name = r.str()?;
        let kind = AgentKind::from_name(&kind_name)
            .ok_or_else(|| Error::Truncated(format!("{ctx}: unknown agent kind {kind_name}")))?;
        let n_states = r.u32()? as usize;
        let mut states = Vec::with_capacity(n_states);
        for _ in 0..n_states {
            states.push(AgentState {
                t: r.f64()?,
                x: r.f64()?,
                y: r.f64()?,
                yaw: r.f64()?,
                vx: r.f64()?,
                vy: r.f64()?,
                valid: r.u8()? != 0,
            });
        }
        agents.push(AgentTrack { agent_id, kind, states });
    }

    let n_grids = r.u32()? as usize;
    let mut channels: Option<Array3<f64>> = None;
    let mut seg_labels: Option<Array2<u8>> = None;
    for _ in 0..n_grids {
        let name = r.str()?;
        let dtype = r.u8()?;
        let n_dims = r.u32()? as usize;
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        match (name.as_str(), dtype, n_dims) {
            ("channels", 0, 3) => {
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    data.push(r.f32()? as f64);
                }
                channels = Some(
                    Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
                        .map_err(|e| Error::Truncated(format!("{ctx}: {e}")))?,
                );
            }
            ("seg_labels", 1, 2) => {
                let raw = r.take(count)?.to_vec();
                seg_labels = Some(
                    Array2::from_shape_vec((dims[0], dims[1]), raw)
                        .map_err(|e| Error::Truncated(format!("{ctx}: {e}")))?,
                );
            }
            _ => {
                // skip unknown grid payloads for forward compatibility
                let bytes = match dtype {
                    0 => count * 4,
                    1 => count,
                    _ => {
                        return Err(Error::Truncated(format!(
                            "{ctx}: unknown grid dtype {dtype}"
                        )))
                    }
                };
                r.take(bytes)?;
            }
        }
    }
    let channels =
        channels.ok_or_else(|| Error::Truncated(format!("{ctx}: missing channels grid")))?;
    let seg_labels =
        seg_labels.ok_or_else(|| Error::Truncated(format!("{ctx}: missing seg_labels grid")))?;
    if r.pos != body.len() {
        return Err(Error::Truncated(format!(
            "{ctx}: {} trailing bytes",
            body.len() - r.pos
        )));
    }

    Ok(SceneSample {
        scene_id,
        ego_pose,
        target_id,
        agents,
        raster: BevRasterInput { channels, spec },
        seg_labels,
        t_history,
        t_future,
    })
}

fn encode_record(s: &SceneSample) -> Vec<u8> {
    let body = encode_body(s);
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(body.len() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_sample(path: &Path) -> Result<SceneSample> {
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
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: DATASET_VERSION });
    }
    let body_len = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if raw.len() < 16 + body_len + 4 {
        return Err(Error::Truncated(format!(
            "{ctx}: body declares {body_len} bytes, file holds {}",
            raw.len().saturating_sub(20)
        )));
    }
    let body = &raw[16..16 + body_len];
    let crc_stored = u32::from_le_bytes(raw[16 + body_len..16 + body_len + 4].try_into().unwrap());
    if crc32fast::hash(body) != crc_stored {
        return Err(Error::ChecksumMismatch(ctx));
    }
    decode_body(body, &ctx)
}

fn sample_file_name(i: usize) -> String {
    format!("sample_{i:06}.bvtd")
}

pub fn write_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = format!("version {DATASET_VERSION}\ncount {}\n", samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        fs::File::create(dir.join(&name))?.write_all(&encode_record(s))?;
        index.push_str(&name);
        index.push('\n');
    }
    fs::write(dir.join(INDEX_NAME), index)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let index_path = dir.join(INDEX_NAME);
    let ctx = index_path.display().to_string();
    let text = fs::read_to_string(&index_path)?;
    let mut lines = text.lines();
    let version: u32 = lines
        .next()
        .and_then(|l| l.strip_prefix("version "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Truncated(format!("{ctx}: missing version line")))?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: DATASET_VERSION });
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Truncated(format!("{ctx}: missing count line")))?;
    let names: Vec<PathBuf> = lines.map(|l| dir.join(l.trim())).collect();
    if names.len() != count {
        return Err(Error::Truncated(format!(
            "{ctx}: index lists {} files, count says {count}",
            names.len()
        )));
    }
    names.iter().map(|p| read_sample(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scene_sim::gen::{generate_scene, GenConfig};

    fn samples(n: usize) -> Vec<SceneSample> {
        let mut cfg = GenConfig::from_run(&RunConfig::default());
        cfg.grid_h = 24;
        cfg.grid_w = 24;
        cfg.noise.rate = 0.02;
        (0..n as u64).map(|s| generate_scene(s, &cfg).unwrap()).collect()
    }

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("bvtd_test_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn round_trip_preserves_everything_but_f32_grids() {
        let orig = samples(3);
        let dir = tmp_dir("rt");
        write_dataset(&dir, &orig).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in orig.iter().zip(&back) {
            assert_eq!(a.scene_id, b.scene_id);
            assert_eq!(a.ego_pose, b.ego_pose);
            assert_eq!(a.target_id, b.target_id);
            assert_eq!(a.agents, b.agents); // tracks are stored in full precision
            assert_eq!(a.seg_labels, b.seg_labels);
            assert_eq!(a.raster.spec, b.raster.spec);
            // raster is stored as f32
            for (x, y) in a.raster.channels.iter().zip(b.raster.channels.iter()) {
                assert!((x - y).abs() <= f32::EPSILON as f64 * x.abs().max(1.0));
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn serialization_is_byte_identical() {
        let s = &samples(1)[0];
        assert_eq!(encode_record(s), encode_record(s));
        // and stable across a read-back cycle
        let dir = tmp_dir("bytes");
        write_dataset(&dir, std::slice::from_ref(s)).unwrap();
        let back = read_sample(&dir.join(sample_file_name(0))).unwrap();
        let reread = read_sample(&dir.join(sample_file_name(0))).unwrap();
        assert_eq!(encode_record(&back), encode_record(&reread));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tmp_dir("empty");
        write_dataset(&dir, &[]).unwrap();
        assert!(read_dataset(&dir).unwrap().is_empty());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn fault_injection_yields_distinct_errors() {
        let s = &samples(1)[0];
        let good = encode_record(s);
        let dir = tmp_dir("faults");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("case.bvtd");

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_sample(&p), Err(Error::BadMagic(_))));

        // wrong version
        let mut bad = good.clone();
        bad[4] = DATASET_VERSION as u8 + 1;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(
            read_sample(&p),
            Err(Error::VersionMismatch { found, expected })
                if found == DATASET_VERSION + 1 && expected == DATASET_VERSION
        ));

        // truncated
        fs::write(&p, &good[..good.len() / 2]).unwrap();
        assert!(matches!(read_sample(&p), Err(Error::Truncated(_))));

        // flipped body byte
        let mut bad = good.clone();
        let mid = 16 + (good.len() - 20) / 2;
        bad[mid] ^= 0xFF;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_sample(&p), Err(Error::ChecksumMismatch(_))));

        // pristine record still reads
        fs::write(&p, &good).unwrap();
        assert!(read_sample(&p).is_ok());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn index_count_mismatch_detected() {
        let dir = tmp_dir("idx");
        write_dataset(&dir, &samples(2)).unwrap();
        fs::write(dir.join(INDEX_NAME), "version 1\ncount 5\nsample_000000.bvtd\n").unwrap();
        assert!(matches!(read_dataset(&dir), Err(Error::Truncated(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
