use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ChannelSpec, ExperimentConfig};
use crate::cnn::{Dataset, Tensor};
use crate::error::{Error, Result};
use crate::iqcore::{IqFrame, Sample};
use crate::phy::{
    apply_channel, apply_impairments, equalized_payload, estimate_channel, modulate, ChannelModel, DeviceProfile,
};

/// SplitMix64-style mixing of a base seed with a list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t.wrapping_mul(0xd6e8_feb8_6659_fd93));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const TAG_REGISTRY: u64 = 1;
const TAG_PAYLOAD: u64 = 2;
const TAG_CHANNEL: u64 = 3;
const TAG_SHIFT: u64 = 4;
const TAG_NOISE: u64 = 5;

/// Distinct payload patterns cycled through by every device.
const PAYLOAD_PATTERNS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureEpoch {
    /// The capture the classifier is trained on.
    Train,
    /// A later capture with different channels and drifted oscillators.
    Eval,
}

impl CaptureEpoch {
    pub fn label(self) -> &'static str {
        match self {
            CaptureEpoch::Train => "train",
            CaptureEpoch::Eval => "eval",
        }
    }

    fn tag(self) -> u64 {
        match self {
            CaptureEpoch::Train => 0,
            CaptureEpoch::Eval => 1,
        }
    }
}

/// Hardware profile of every device, indexed by `device_id - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRegistry {
    pub profiles: Vec<DeviceProfile>,
}

impl DeviceRegistry {
    pub fn generate(devices: usize, seed: u64, neutral: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_REGISTRY]));
        let profiles = (1..=devices as u32)
            .map(|id| if neutral { DeviceProfile::neutral(id) } else { DeviceProfile::random(id, &mut rng) })
            .collect();
        DeviceRegistry { profiles }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        DeviceRegistry::generate(cfg.devices, cfg.seed, cfg.neutral_devices)
    }

    pub fn get(&self, device_id: u32) -> Result<&DeviceProfile> {
        self.profiles
            .get((device_id as usize).wrapping_sub(1))
            .ok_or(Error::InvalidLabel { label: device_id as usize, classes: self.profiles.len() })
    }
}

/// Equalized payload examples captured from one device.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub device_id: u32,
    pub epoch: CaptureEpoch,
    pub channel_seed: u64,
    pub channel: ChannelModel,
    /// The transmitter profile in effect during the capture.
    pub profile: DeviceProfile,
    pub examples: Vec<IqFrame>,
}

impl Recording {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.examples.iter().map(|x| Tensor::from_iq(x)).collect()
    }
}

/// Bits of payload pattern `index`, identical for every device.
pub fn payload_bits(cfg: &ExperimentConfig, index: usize) -> Vec<u8> {
    let n = cfg.ofdm.bits_per_example();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_PAYLOAD, (index % PAYLOAD_PATTERNS) as u64]));
    (0..n).map(|_| rng.gen_range(0..2u8)).collect()
}

/// Unit-energy multipath taps with exponentially decaying power.
fn draw_channel(spec: &ChannelSpec, seed: u64) -> Result<ChannelModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taps: Vec<Sample> = (0..spec.taps)
        .map(|l| {
            let s = (spec.decay.powi(l as i32) / 2.0).sqrt();
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Sample::new(re * s, im * s)
        })
        .collect();
    let energy: f64 = taps.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt();
    for t in taps.iter_mut() {
        *t /= energy;
    }
    ChannelModel::new(taps, spec.noise_std, seed)
}

/// The channel, profile and noise seed of one device's capture. The train
/// capture's channel is fixed by the experiment seed; the eval capture's
/// channel and oscillator drift also depend on `stream`.
pub(crate) fn capture_setup(
    cfg: &ExperimentConfig,
    registry: &DeviceRegistry,
    device_id: u32,
    epoch: CaptureEpoch,
    stream: u64,
) -> Result<(ChannelModel, u64, DeviceProfile)> {
    let base = registry.get(device_id)?.clone();
    let (spec, day) = match epoch {
        CaptureEpoch::Train => (&cfg.train_channel, 0),
        CaptureEpoch::Eval => (&cfg.eval_channel, stream),
    };
    let channel_seed = derive_seed(cfg.seed, &[TAG_CHANNEL, epoch.tag(), day, device_id as u64]);
    let channel = draw_channel(spec, channel_seed)?;
    let mut profile = base;
    if epoch == CaptureEpoch::Eval && cfg.cfo_shift > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SHIFT, stream, device_id as u64]));
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        profile.cfo += sign * rng.gen_range(0.5..=1.0) * cfg.cfo_shift;
    }
    Ok((channel, channel_seed, profile))
}

/// Captures `count` examples from one device: modulate the shared payload,
/// apply the device's impairments and the capture channel, estimate the
/// channel from the preamble and keep the equalized payload.
pub fn generate_recordings(
    cfg: &ExperimentConfig,
    registry: &DeviceRegistry,
    device_id: u32,
    epoch: CaptureEpoch,
    stream: u64,
    count: usize,
) -> Result<Recording> {
    let (channel, channel_seed, profile) = capture_setup(cfg, registry, device_id, epoch, stream)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_NOISE, epoch.tag(), stream, device_id as u64]));
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let tx = modulate(&payload_bits(cfg, i), &cfg.ofdm)?;
        let rx = apply_channel(&apply_impairments(&tx, &profile, &mut rng), &channel, &mut rng);
        let h = estimate_channel(&rx, &cfg.ofdm)?;
        examples.push(equalized_payload(&rx, &cfg.ofdm, &h)?);
    }
    Ok(Recording { device_id, epoch, channel_seed, channel, profile, examples })
}

/// One recording per device for the given capture epoch.
pub fn generate_dataset(cfg: &ExperimentConfig, epoch: CaptureEpoch, stream: u64) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let registry = DeviceRegistry::from_config(cfg);
    let count = match epoch {
        CaptureEpoch::Train => cfg.train_examples_per_device,
        CaptureEpoch::Eval => cfg.eval_examples_per_device,
    };
    (1..=cfg.devices as u32).map(|d| generate_recordings(cfg, &registry, d, epoch, stream, count)).collect()
}

/// Flattens recordings into a labeled classifier dataset.
pub fn to_dataset(recordings: &[Recording]) -> Dataset {
    let mut data = Dataset::default();
    for r in recordings {
        for t in r.tensors() {
            data.push(t, r.device_id as usize);
        }
    }
    data
}
