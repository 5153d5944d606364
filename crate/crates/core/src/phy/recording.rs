//! On-disk I/Q captures.
//!
//! A recording is two files sharing a stem: `<stem>.iq` holds raw
//! little-endian `f32` pairs (I then Q) and `<stem>.json` holds the
//! [`RecordingMeta`] sidecar.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqcore::Sample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub device_id: u32,
    pub sample_count: usize,
    /// Samples per classifier example; `sample_count` is a multiple of it.
    pub example_len: usize,
    pub ofdm_digest: String,
    pub channel_seed: u64,
    /// Free-form capture label, e.g. `train` or `eval`.
    pub capture_epoch: String,
    pub created_unix: u64,
}

impl RecordingMeta {
    pub fn now_unix() -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("iq"), stem.with_extension("json"))
}

pub fn encode_iq(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        out.extend_from_slice(&(s.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_iq(bytes: &[u8]) -> Result<Vec<Sample>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt(format!("I/Q payload of {} bytes is not a whole number of f32 pairs", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Sample::new(re as f64, im as f64)
        })
        .collect())
}

pub fn write_recording(stem: &Path, samples: &[Sample], meta: &RecordingMeta) -> Result<()> {
    if meta.sample_count != samples.len() {
        return Err(Error::invalid(format!(
            "metadata says {} samples, got {}",
            meta.sample_count,
            samples.len()
        )));
    }
    let (iq, json) = paths(stem);
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(iq, encode_iq(samples))?;
    fs::write(json, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_recording(stem: &Path) -> Result<(Vec<Sample>, RecordingMeta)> {
    let (iq, json) = paths(stem);
    let meta: RecordingMeta = serde_json::from_str(&fs::read_to_string(json)?)?;
    let samples = decode_iq(&fs::read(iq)?)?;
    if samples.len() != meta.sample_count {
        return Err(Error::Corrupt(format!(
            "sidecar declares {} samples but the data file holds {}",
            meta.sample_count,
            samples.len()
        )));
    }
    if meta.example_len == 0 || samples.len() % meta.example_len != 0 {
        return Err(Error::Corrupt(format!(
            "{} samples do not split into examples of {}",
            samples.len(),
            meta.example_len
        )));
    }
    Ok((samples, meta))
}
