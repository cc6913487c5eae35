//! Versioned binary container for [`TrainState`].
//!
//! Layout: magic `MTMRCKPT`, `u32` format version, `u32` section count, then
//! per section a `u32`-prefixed UTF-8 name and a `u64`-prefixed payload.
//! Sections: recon, seg, optimizer, schedule, itfs, counters, rng, history.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Adam, ByteReader, ParamSet};
use crate::real::Real;
use crate::recon::{ReconConfig, ReconParams};
use crate::schedule::{ItfsPolicy, WeightSchedule};
use crate::seg::{SegConfig, SegParams};
use crate::trainer::{Reduction, SegLossKind, StepRecord, TrainState};

pub const MAGIC: &[u8; 8] = b"MTMRCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

fn blob<'a>(r: &mut ByteReader<'a>) -> Result<&'a [u8]> {
    let n = r.u64()? as usize;
    r.take(n)
}

fn json<S: serde::Serialize>(v: &S) -> Vec<u8> {
    serde_json::to_vec(v).expect("config serializes")
}

fn from_json<S: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<S> {
    serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

fn network(config_json: Vec<u8>, params: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    put_blob(&mut out, &config_json);
    put_blob(&mut out, params);
    out
}

pub fn to_bytes<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
    sections.push((
        "recon",
        network(json(state.recon.config()), &state.recon.params().to_bytes()),
    ));
    sections.push((
        "seg",
        network(json(state.seg.config()), &state.seg.params().to_bytes()),
    ));
    let mut opt = Vec::new();
    put_blob(&mut opt, &state.recon_opt.to_bytes());
    put_blob(&mut opt, &state.seg_opt.to_bytes());
    sections.push(("optimizer", opt));
    let mut sched = Vec::new();
    put_blob(&mut sched, &json(&state.schedule));
    put_blob(&mut sched, &json(&state.seg_loss));
    put_blob(&mut sched, &json(&state.recon_reduction));
    sections.push(("schedule", sched));
    sections.push(("itfs", json(&state.itfs)));
    let mut counters = Vec::new();
    put_u64(&mut counters, state.epoch);
    put_u64(&mut counters, state.global_step);
    sections.push(("counters", counters));
    // Every random stream is derived from the run seed plus counters, so the
    // seed is the whole generator state at an epoch boundary.
    sections.push(("rng", state.seed.to_le_bytes().to_vec()));
    let mut hist = Vec::with_capacity(8 + state.history.len() * 57);
    put_u64(&mut hist, state.history.len() as u64);
    for r in &state.history {
        put_u64(&mut hist, r.step);
        put_u64(&mut hist, r.epoch);
        for v in [r.alpha, r.beta] {
            hist.extend_from_slice(&v.to_le_bytes());
        }
        hist.push(r.teacher as u8);
        for v in [r.l_recon, r.l_seg, r.l_total] {
            hist.extend_from_slice(&v.to_le_bytes());
        }
    }
    sections.push(("history", hist));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, sections.len() as u32);
    for (name, payload) in sections {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_blob(&mut out, &payload);
    }
    out
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing MTMRCKPT header".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut sections = std::collections::HashMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("section name is not utf-8".into()))?;
        sections.insert(name, blob(&mut r)?);
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last section".into()));
    }
    let section = |name: &str| {
        sections
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
    };

    let mut rr = ByteReader::new(section("recon")?);
    let recon_cfg: ReconConfig = from_json(blob(&mut rr)?, "recon config")?;
    let recon = ReconParams::from_parts(recon_cfg, ParamSet::from_bytes(blob(&mut rr)?)?)?;
    let mut rs = ByteReader::new(section("seg")?);
    let seg_cfg: SegConfig = from_json(blob(&mut rs)?, "seg config")?;
    let seg = SegParams::from_parts(seg_cfg, ParamSet::from_bytes(blob(&mut rs)?)?)?;

    let mut ro = ByteReader::new(section("optimizer")?);
    let recon_opt = Adam::from_bytes(blob(&mut ro)?)?;
    let seg_opt = Adam::from_bytes(blob(&mut ro)?)?;
    if recon_opt.m.shape_manifest() != recon.shape_manifest()
        || seg_opt.m.shape_manifest() != seg.shape_manifest()
    {
        return Err(Error::Checkpoint("optimizer moments do not match the networks".into()));
    }

    let mut rsch = ByteReader::new(section("schedule")?);
    let schedule: WeightSchedule = from_json(blob(&mut rsch)?, "schedule")?;
    let seg_loss: SegLossKind = from_json(blob(&mut rsch)?, "seg loss")?;
    let recon_reduction: Reduction = from_json(blob(&mut rsch)?, "recon reduction")?;
    let itfs: ItfsPolicy = from_json(section("itfs")?, "itfs")?;

    let mut rc = ByteReader::new(section("counters")?);
    let epoch = rc.u64()?;
    let global_step = rc.u64()?;
    let seed = ByteReader::new(section("rng")?).u64()?;

    let mut rh = ByteReader::new(section("history")?);
    let n = rh.u64()? as usize;
    let f = |r: &mut ByteReader| r.u64().map(f64::from_bits);
    let mut history = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        history.push(StepRecord {
            step: rh.u64()?,
            epoch: rh.u64()?,
            alpha: f(&mut rh)?,
            beta: f(&mut rh)?,
            teacher: rh.u8()? != 0,
            l_recon: f(&mut rh)?,
            l_seg: f(&mut rh)?,
            l_total: f(&mut rh)?,
        });
    }

    Ok(TrainState {
        recon,
        recon_opt,
        seg,
        seg_opt,
        epoch,
        global_step,
        seed,
        schedule,
        itfs,
        seg_loss,
        recon_reduction,
        history,
    })
}

pub fn save<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::SegConfig;
    use crate::trainer::{TrainSetup, TrainState};

    fn small() -> TrainSetup {
        TrainSetup {
            recon: ReconConfig {
                n_cascades: 1,
                convs_per_block: 2,
                channels: 4,
                ..ReconConfig::default()
            },
            seg: SegConfig {
                depth: 1,
                base_channels: 4,
                ..SegConfig::default()
            },
            ..TrainSetup::default()
        }
    }

    #[test]
    fn roundtrip() {
        let mut state = TrainState::<f32>::new(&small()).unwrap();
        state.epoch = 3;
        state.global_step = 17;
        state.history.push(StepRecord {
            step: 16,
            epoch: 2,
            alpha: 0.05,
            beta: 0.95,
            teacher: true,
            l_recon: 0.125,
            l_seg: 0.5,
            l_total: 0.481_25,
        });
        let bytes = to_bytes(&state);
        assert_eq!(&bytes[..8], b"MTMRCKPT");
        assert_eq!(from_bytes::<f32>(&bytes).unwrap(), state);
        assert_eq!(to_bytes(&from_bytes::<f32>(&bytes).unwrap()), bytes);
    }

    #[test]
    fn rejects_damage() {
        let state = TrainState::<f32>::new(&small()).unwrap();
        let bytes = to_bytes(&state);
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(from_bytes::<f32>(&bad).is_err());
        assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Checkpoint(_))));
    }
}
