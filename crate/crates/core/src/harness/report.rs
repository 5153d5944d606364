use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::capture_setup;
use super::{AdversaryReport, CaptureEpoch, DeviceRegistry, ExperimentConfig, LinkPoint, MetricsReport, Recording};
use crate::cnn::Model;
use crate::error::{Error, Result};
use crate::iqcore::{FirFilter, IqFrame};
use crate::phy::recording::{read_recording, write_recording, RecordingMeta};
use crate::wop::FilterMessage;

/// One long-format report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub device: u32,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(experiment: &str, device: u32, seed: u64, metric: impl Into<String>, value: f64) -> Self {
        ReportRow { experiment: experiment.to_string(), device, seed, metric: metric.into(), value }
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const REPORT_HEADER: [&str; 5] = ["experiment", "device", "seed", "metric", "value"];

/// Long-format rows for a set of filter epochs.
pub fn metrics_rows(experiment: &str, reports: &[MetricsReport]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for r in reports {
        let mut push = |metric: String, value: f64| rows.push(ReportRow::new(experiment, r.device_id, r.stream, metric, value));
        for (i, (b, a)) in r.psa_before.iter().zip(&r.psa_after).enumerate() {
            push(format!("psa_before_{i}"), *b);
            push(format!("psa_after_{i}"), *a);
        }
        push("pba_before".into(), r.pba_before);
        push("pba_after".into(), r.pba_after);
        push("epsilon".into(), r.message.epsilon);
        push("objective_before".into(), r.message.objective_before);
        push("objective_after".into(), r.message.objective_after);
        for (name, link) in [("unfiltered", &r.link_unfiltered), ("compensated", &r.link_compensated)] {
            if let Some(l) = link {
                push(format!("ber_{name}"), l.ber);
                push(format!("per_{name}"), l.per);
                push(format!("throughput_kbps_{name}"), l.throughput_kbps);
            }
        }
    }
    rows
}

/// Writes `rows` as `experiment,device,seed,metric,value`. An empty list
/// yields the header only.
pub fn emit_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_rows(path, &REPORT_HEADER, rows)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Corrupt(format!("unexpected report header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Dense `D x D` matrix, rows are true devices and columns predicted ones.
pub fn emit_confusion_csv(path: &Path, counts: &[Vec<u64>]) -> Result<()> {
    let d = counts.len();
    if counts.iter().any(|r| r.len() != d) {
        return Err(Error::ShapeMismatch { expected: format!("{d} x {d}"), found: "ragged rows".into() });
    }
    let mut header = vec!["true".to_string()];
    header.extend((1..=d).map(|j| format!("pred_{j}")));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (i, row) in counts.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LinkCsvRow {
    epsilon: f64,
    noise_std: f64,
    ber: f64,
    per: f64,
    throughput_kbps: f64,
    frames: u64,
    bit_errors: u64,
    frame_errors: u64,
}

pub fn emit_link_csv(path: &Path, points: &[LinkPoint]) -> Result<()> {
    let rows: Vec<LinkCsvRow> = points
        .iter()
        .map(|p| LinkCsvRow {
            epsilon: p.epsilon,
            noise_std: p.noise_std,
            ber: p.report.ber,
            per: p.report.per,
            throughput_kbps: p.report.throughput_kbps,
            frames: p.report.frames as u64,
            bit_errors: p.report.bit_errors as u64,
            frame_errors: p.report.frame_errors as u64,
        })
        .collect();
    write_rows(
        path,
        &["epsilon", "noise_std", "ber", "per", "throughput_kbps", "frames", "bit_errors", "frame_errors"],
        &rows,
    )
}

#[derive(Serialize)]
struct AdversaryCsvRow {
    adversary: u32,
    victim: u32,
    seed: u64,
    slice: usize,
    as_victim_before: f64,
    as_victim_after: f64,
    as_self_before: f64,
    as_self_after: f64,
}

/// One row per adversary slice, with both the victim and self columns.
pub fn emit_adversary_csv(path: &Path, reports: &[AdversaryReport]) -> Result<()> {
    let mut rows = Vec::new();
    for r in reports {
        for i in 0..r.as_victim_before.len() {
            rows.push(AdversaryCsvRow {
                adversary: r.adversary_id,
                victim: r.victim_id,
                seed: r.stream,
                slice: i,
                as_victim_before: r.as_victim_before[i],
                as_victim_after: r.as_victim_after[i],
                as_self_before: r.as_self_before[i],
                as_self_after: r.as_self_after[i],
            });
        }
    }
    write_rows(
        path,
        &["adversary", "victim", "seed", "slice", "as_victim_before", "as_victim_after", "as_self_before", "as_self_after"],
        &rows,
    )
}

/// On-disk layout of one experiment:
///
/// ```text
/// <root>/config.toml
/// <root>/model.bin
/// <root>/recordings/<epoch>-s<stream>-d<device>.{iq,json}
/// <root>/filters/d<device>-e<epoch>.json
/// <root>/*.csv
/// ```
#[derive(Debug, Clone)]
pub struct ExperimentDir {
    root: PathBuf,
}

impl ExperimentDir {
    /// Opens `root`, creating it and its subdirectories if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("recordings"))?;
        fs::create_dir_all(root.join("filters"))?;
        Ok(ExperimentDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// `<root>/<prefix>-<n>.csv` for the smallest `n` not yet taken.
    pub fn next_numbered(&self, prefix: &str) -> PathBuf {
        (0..).map(|n| self.path(&format!("{prefix}-{n}.csv"))).find(|p| !p.exists()).expect("unbounded range")
    }

    pub fn config_path(&self) -> PathBuf {
        self.path("config.toml")
    }

    pub fn model_path(&self) -> PathBuf {
        self.path("model.bin")
    }

    fn recording_stem(&self, epoch: CaptureEpoch, stream: u64, device: u32) -> PathBuf {
        self.root.join("recordings").join(format!("{}-s{stream}-d{device}", epoch.label()))
    }

    fn filter_path(&self, device: u32, epoch_index: u32) -> PathBuf {
        self.root.join("filters").join(format!("d{device}-e{epoch_index}.json"))
    }

    pub fn save_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::write(self.config_path(), cfg.to_toml())?;
        Ok(())
    }

    pub fn load_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&fs::read_to_string(self.config_path())?)
    }

    pub fn save_model(&self, model: &Model) -> Result<()> {
        model.save(&self.model_path())
    }

    pub fn load_model(&self) -> Result<Model> {
        model_or_missing(&self.model_path())
    }

    pub fn save_recordings(&self, cfg: &ExperimentConfig, stream: u64, recordings: &[Recording]) -> Result<()> {
        let n = cfg.example_len();
        for r in recordings {
            let samples: Vec<_> = r.examples.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
            let meta = RecordingMeta {
                device_id: r.device_id,
                sample_count: samples.len(),
                example_len: n,
                ofdm_digest: cfg.ofdm.digest(),
                channel_seed: r.channel_seed,
                capture_epoch: r.epoch.label().to_string(),
                created_unix: RecordingMeta::now_unix(),
            };
            write_recording(&self.recording_stem(r.epoch, stream, r.device_id), &samples, &meta)?;
        }
        Ok(())
    }

    /// Loads every device's recording for `epoch` and `stream`. Channel and
    /// profile are rebuilt from the config and checked against the stored
    /// channel seed.
    pub fn load_recordings(&self, cfg: &ExperimentConfig, epoch: CaptureEpoch, stream: u64) -> Result<Vec<Recording>> {
        let registry = DeviceRegistry::from_config(cfg);
        (1..=cfg.devices as u32)
            .map(|d| {
                let stem = self.recording_stem(epoch, stream, d);
                if !stem.with_extension("iq").exists() {
                    return Err(Error::Config(format!(
                        "no {} capture for stream {stream} in {}; run `simulate` first",
                        epoch.label(),
                        self.root.display()
                    )));
                }
                let (samples, meta) = read_recording(&stem)?;
                if meta.ofdm_digest != cfg.ofdm.digest() || meta.example_len != cfg.example_len() {
                    return Err(Error::Config(format!("recording for device {d} was made with another OFDM config")));
                }
                let (channel, channel_seed, profile) = capture_setup(cfg, &registry, d, epoch, stream)?;
                if meta.device_id != d {
                    return Err(Error::Corrupt(format!("{} holds device {}", stem.display(), meta.device_id)));
                }
                if channel_seed != meta.channel_seed {
                    return Err(Error::Config(format!(
                        "recording for device {d} was generated with a different seed or channel config"
                    )));
                }
                let examples = samples
                    .chunks(meta.example_len)
                    .map(|c| IqFrame::new(c.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Recording { device_id: d, epoch, channel_seed, channel, profile, examples })
            })
            .collect()
    }

    pub fn save_filter(&self, message: &FilterMessage) -> Result<()> {
        let mut f = fs::File::create(self.filter_path(message.device_id, message.epoch_index))?;
        f.write_all(message.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load_filter_message(&self, device: u32, epoch_index: u32) -> Result<FilterMessage> {
        FilterMessage::from_json(&fs::read_to_string(self.filter_path(device, epoch_index))?)
    }

    /// The newest stored filter for `device`, if any.
    pub fn latest_filter(&self, device: u32) -> Result<Option<(u32, FirFilter)>> {
        let mut best: Option<u32> = None;
        for entry in fs::read_dir(self.root.join("filters"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            let Some(rest) = name.strip_prefix(&format!("d{device}-e")) else { continue };
            if let Some(e) = rest.strip_suffix(".json").and_then(|s| s.parse::<u32>().ok()) {
                best = Some(best.map_or(e, |b| b.max(e)));
            }
        }
        match best {
            Some(e) => Ok(Some((e, self.load_filter_message(device, e)?.filter()?))),
            None => Ok(None),
        }
    }
}

fn model_or_missing(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::Config(format!("no trained model at {}; run `train` first", path.display())));
    }
    Model::load(path)
}
