//! Seeded experiments: synthetic captures, classifier training, the
//! per-device filter loop, adversarial reuse of a filter, link-level
//! distortion sweeps and CSV reports.
//!
//! Every random draw derives from [`ExperimentConfig::seed`] plus a stream
//! tag, so a run is reproducible from its config file alone.

mod dataset;
mod linksweep;
mod pipeline;
mod report;
mod stats;

pub use dataset::{
    derive_seed, generate_dataset, generate_recordings, payload_bits, to_dataset, CaptureEpoch, DeviceRegistry,
    Recording,
};
pub use linksweep::{calibrate_noise_std, link_epsilon_sweep, perturbation_epsilon_bound, perturbation_filter, LinkPoint};
pub use pipeline::{
    compute_pba, compute_psa, confusion_counts, measure_compensated_link, random_filter_with_epsilon, run_adversary,
    run_fingerprint_pipeline, slice_batch, train_model, AdversaryReport, MetricsReport,
};
pub use report::{
    emit_adversary_csv, emit_confusion_csv, emit_link_csv, emit_report, metrics_rows, read_report_csv, ExperimentDir,
    ReportRow,
};
pub use stats::{one_sided_paired_t, Alternative, TTest};

use serde::{Deserialize, Serialize};

use crate::cnn::{ModelSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::phy::OfdmConfig;
use crate::wop::{EpochTrigger, NcgOptions};

/// Statistics of the multipath channel drawn for each device and capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSpec {
    /// Number of multipath taps.
    pub taps: usize,
    /// Power ratio between successive taps.
    pub decay: f64,
    /// Per-component AWGN standard deviation.
    pub noise_std: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec { taps: 3, decay: 0.3, noise_std: 0.02 }
    }
}

/// Link-level ε sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkSweepConfig {
    /// Fixed channel taps as `(re, im)` pairs.
    pub channel_taps: Vec<(f64, f64)>,
    /// Baseline packet error rate the noise level is calibrated to.
    pub target_per: f64,
    pub frames_per_point: usize,
    pub calibration_frames: usize,
    pub epsilons: Vec<f64>,
}

impl Default for LinkSweepConfig {
    fn default() -> Self {
        LinkSweepConfig {
            channel_taps: vec![(0.85, 0.0), (0.3, -0.35), (0.0, 0.2)],
            target_per: 0.02,
            frames_per_point: 10_000,
            calibration_frames: 4_000,
            epsilons: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Number of devices `D`.
    pub devices: usize,
    /// Inputs per slice `S`.
    pub slice_size: usize,
    /// Slices per batch `B`.
    pub batch_slices: usize,
    pub train_examples_per_device: usize,
    pub eval_examples_per_device: usize,
    /// Use impairment-free transmitters for every device.
    pub neutral_devices: bool,
    /// Largest CFO change (cycles/sample) between the training and the
    /// evaluation capture; each device draws a change of 0.5 to 1 times this
    /// with a random sign.
    pub cfo_shift: f64,
    pub ofdm: OfdmConfig,
    pub train_channel: ChannelSpec,
    pub eval_channel: ChannelSpec,
    /// Classifier architecture; defaults to the testbed network.
    pub model: Option<ModelSpec>,
    pub training: TrainConfig,
    pub ncg: NcgOptions,
    pub trigger: EpochTrigger,
    pub link: LinkSweepConfig,
    /// Frames sent through the compensated link in each pipeline run.
    pub pipeline_link_frames: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 1,
            devices: 5,
            slice_size: 10,
            batch_slices: 6,
            train_examples_per_device: 600,
            eval_examples_per_device: 60,
            neutral_devices: false,
            cfo_shift: 4e-5,
            ofdm: OfdmConfig::default(),
            train_channel: ChannelSpec::default(),
            eval_channel: ChannelSpec::default(),
            model: None,
            training: TrainConfig { learning_rate: 5e-4, epochs: 20, ..Default::default() },
            ncg: NcgOptions { eps_max: Some(0.05), ..Default::default() },
            trigger: EpochTrigger::default(),
            link: LinkSweepConfig::default(),
            pipeline_link_frames: 500,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config, filling every missing field (including fields of
    /// partially given tables) from [`ExperimentConfig::default`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let given: toml::Table = text.parse().map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| bad(&e))?;
        merge_tables(&mut merged, given);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("ExperimentConfig serializes")
    }

    pub fn example_len(&self) -> usize {
        self.ofdm.example_len()
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| ModelSpec::testbed(self.devices, self.example_len()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("devices", self.devices),
            ("slice_size", self.slice_size),
            ("batch_slices", self.batch_slices),
            ("train_examples_per_device", self.train_examples_per_device),
            ("eval_examples_per_device", self.eval_examples_per_device),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.devices < 2 {
            return Err(Error::Config("need at least two devices".into()));
        }
        if self.eval_examples_per_device < self.slice_size * self.batch_slices {
            return Err(Error::Config(format!(
                "eval_examples_per_device ({}) is smaller than one batch ({} x {})",
                self.eval_examples_per_device, self.slice_size, self.batch_slices
            )));
        }
        for (name, ch) in [("train_channel", &self.train_channel), ("eval_channel", &self.eval_channel)] {
            if ch.taps == 0 || !(ch.decay > 0.0) || !(ch.noise_std >= 0.0) {
                return Err(Error::Config(format!("{name} needs taps >= 1, decay > 0, noise_std >= 0")));
            }
            self.ofdm.validate_for_link(ch.taps, self.ncg.num_taps)?;
        }
        if !(self.cfo_shift >= 0.0) {
            return Err(Error::Config("cfo_shift must be non-negative".into()));
        }
        let spec = self.model_spec();
        spec.validate()?;
        if spec.classes != self.devices || spec.input != [1, 2, self.example_len()] {
            return Err(Error::Config(format!(
                "model expects {:?} inputs and {} classes, experiment has [1, 2, {}] and {} devices",
                spec.input,
                spec.classes,
                self.example_len(),
                self.devices
            )));
        }
        self.training.validate()?;
        self.ncg.validate()?;
        self.trigger.validate()?;
        if !(self.link.target_per > 0.0 && self.link.target_per < 1.0) || self.link.channel_taps.is_empty() {
            return Err(Error::Config("link sweep needs 0 < target_per < 1 and channel taps".into()));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests;
