use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::to_dataset;
use super::linksweep::lost_if_undetected;
use super::{derive_seed, ExperimentConfig, Recording};
use crate::cnn::{train, Model, Tensor, TrainReport};
use crate::error::{Error, Result};
use crate::iqcore::{apply_fir, epsilon_of, FirFilter, Sample};
use crate::phy::{
    apply_channel, apply_impairments, apply_tx_fir, demodulate, demodulate_compensated, estimate_channel,
    measure_link, modulate, ChannelModel, DeviceProfile, LinkReport,
};
use crate::wop::{optimize_fir, Batch, ClassifierObjective, FilterMessage, Slice};

const TAG_LINK: u64 = 10;

/// Trains a fresh classifier on the given recordings.
pub fn train_model(cfg: &ExperimentConfig, recordings: &[Recording]) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(cfg.model_spec(), derive_seed(cfg.seed, &[20]))?;
    let report = train(&mut model, &to_dataset(recordings), &cfg.training)?;
    Ok((model, report))
}

/// The first `batch_slices` runs of `slice_size` consecutive examples.
pub fn slice_batch(recording: &Recording, slice_size: usize, batch_slices: usize) -> Result<Batch> {
    if recording.examples.len() < slice_size * batch_slices {
        return Err(Error::invalid(format!(
            "device {} has {} examples, a batch needs {}",
            recording.device_id,
            recording.examples.len(),
            slice_size * batch_slices
        )));
    }
    let slices = recording.examples[..slice_size * batch_slices]
        .chunks(slice_size)
        .map(|c| Slice::new(c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Batch::new(slices)
}

fn predictions(model: &Model, slice: &Slice, phi: &FirFilter) -> Result<Vec<usize>> {
    let xs: Vec<Tensor> = slice.inputs().iter().map(|x| Tensor::from_iq(&apply_fir(x, phi))).collect();
    Ok(model.predict(&xs)?.iter().map(|p| p.argmax()).collect())
}

fn fraction_labelled(model: &Model, slice: &Slice, phi: &FirFilter, label: usize) -> Result<f64> {
    let preds = predictions(model, slice, phi)?;
    Ok(preds.iter().filter(|&&p| p == label).count() as f64 / preds.len() as f64)
}

/// Fraction of the slice's inputs classified as `true_device` after
/// filtering each with `phi`.
pub fn compute_psa(model: &Model, slice: &Slice, phi: &FirFilter, true_device: usize) -> Result<f64> {
    if true_device == 0 || true_device > model.classes() {
        return Err(Error::InvalidLabel { label: true_device, classes: model.classes() });
    }
    fraction_labelled(model, slice, phi, true_device)
}

/// Mean of [`compute_psa`] over the batch's slices.
pub fn compute_pba(model: &Model, batch: &Batch, phi: &FirFilter, true_device: usize) -> Result<f64> {
    let psas = batch.slices().iter().map(|s| compute_psa(model, s, phi, true_device)).collect::<Result<Vec<_>>>()?;
    Ok(psas.iter().sum::<f64>() / psas.len() as f64)
}

/// `D x D` counts, rows indexed by true device and columns by predicted
/// device (both 0-based here, i.e. `label - 1`).
pub fn confusion_counts(model: &Model, batch: &Batch, phi: &FirFilter, true_device: usize) -> Result<Vec<Vec<u64>>> {
    let d = model.classes();
    let mut counts = vec![vec![0u64; d]; d];
    for s in batch.slices() {
        for p in predictions(model, s, phi)? {
            counts[true_device - 1][p - 1] += 1;
        }
    }
    Ok(counts)
}

/// Filter with `m` random taps scaled toward the identity so that its
/// `epsilon_of` equals `eps`.
pub fn random_filter_with_epsilon(m: usize, eps: f64, n_bins: usize, rng: &mut impl Rng) -> FirFilter {
    let mut taps: Vec<Sample> = (0..m).map(|_| Sample::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    taps[0] += Sample::new(1.0, 0.0);
    let phi = FirFilter::new(taps).expect("finite taps");
    let e = epsilon_of(&phi, n_bins);
    if e == 0.0 {
        return phi;
    }
    phi.scaled_toward_identity(eps / e)
}

/// Result of one filter epoch for one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub device_id: u32,
    pub stream: u64,
    /// Per-slice accuracy with the filter in use before the epoch.
    pub psa_before: Vec<f64>,
    /// Per-slice accuracy with the newly optimized filter.
    pub psa_after: Vec<f64>,
    pub pba_before: f64,
    pub pba_after: f64,
    pub confusion_before: Vec<Vec<u64>>,
    pub confusion_after: Vec<Vec<u64>>,
    pub message: FilterMessage,
    pub trace: Vec<f64>,
    /// Link with an unfiltered transmitter.
    pub link_unfiltered: Option<LinkReport>,
    /// Link with the new filter at the transmitter and compensation at the
    /// receiver.
    pub link_compensated: Option<LinkReport>,
}

impl MetricsReport {
    /// Accuracy change on the slice the filter was optimized on.
    pub fn psa_gain(&self) -> f64 {
        self.psa_after[0] - self.psa_before[0]
    }

    pub fn filter(&self) -> Result<FirFilter> {
        self.message.filter()
    }
}

/// Sends `frames` random frames from `profile` over `channel`, once without
/// a filter and once with `phi` applied at the transmitter and divided out
/// at the receiver. Both runs share payloads and noise.
pub fn measure_compensated_link(
    cfg: &ExperimentConfig,
    profile: &DeviceProfile,
    channel: &ChannelModel,
    phi: &FirFilter,
    frames: usize,
    seed: u64,
) -> Result<(LinkReport, LinkReport)> {
    let ofdm = &cfg.ofdm;
    let nbits = ofdm.bits_per_example();
    let mut tx_bits = Vec::with_capacity(frames * nbits);
    let mut plain = Vec::with_capacity(frames * nbits);
    let mut comp = Vec::with_capacity(frames * nbits);
    for i in 0..frames {
        let frame_seed = derive_seed(seed, &[TAG_LINK, i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
        let bits: Vec<u8> = (0..nbits).map(|_| rng.gen_range(0..2u8)).collect();
        let tx = modulate(&bits, ofdm)?;
        let send = |x: &crate::iqcore::IqFrame| -> Result<crate::iqcore::IqFrame> {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed ^ 1);
            Ok(apply_channel(&apply_impairments(x, profile, &mut rng), channel, &mut rng))
        };
        let rx = send(&tx)?;
        plain.extend(lost_if_undetected(estimate_channel(&rx, ofdm).and_then(|h| demodulate(&rx, ofdm, &h)), nbits)?);
        let rx = send(&apply_tx_fir(&tx, phi, ofdm)?)?;
        comp.extend(lost_if_undetected(
            estimate_channel(&rx, ofdm).and_then(|h| demodulate_compensated(&rx, phi, &h, ofdm)),
            nbits,
        )?);
        tx_bits.extend(bits);
    }
    if frames == 0 {
        return Err(Error::invalid("link measurement needs at least one frame"));
    }
    Ok((
        measure_link(&tx_bits, &plain, nbits, ofdm.frame_rate_hz)?,
        measure_link(&tx_bits, &comp, nbits, ofdm.frame_rate_hz)?,
    ))
}

/// One filter epoch for `recording`'s device: classify the batch with the
/// current filter (`warm_start`, identity if absent), optimize a new filter
/// on the first slice, classify again, and check the compensated link.
/// The classifier always sees filtered, uncompensated inputs.
pub fn run_fingerprint_pipeline(
    cfg: &ExperimentConfig,
    recording: &Recording,
    model: &Model,
    warm_start: Option<&FirFilter>,
    epoch_index: u32,
    stream: u64,
) -> Result<MetricsReport> {
    let device = recording.device_id as usize;
    if model.classes() != cfg.devices || model.spec().input != [1, 2, cfg.example_len()] {
        return Err(Error::Config("model does not match the experiment".into()));
    }
    let batch = slice_batch(recording, cfg.slice_size, cfg.batch_slices)?;
    let current = warm_start.cloned().unwrap_or_else(|| FirFilter::identity(cfg.ncg.num_taps));

    let psa_before = batch.slices().iter().map(|s| compute_psa(model, s, &current, device)).collect::<Result<Vec<_>>>()?;
    let confusion_before = confusion_counts(model, &batch, &current, device)?;

    let obj = ClassifierObjective { model, slice: &batch.slices()[0], target: device };
    let run = optimize_fir(&obj, &cfg.ncg, Some(&current))?;
    let phi = if cfg.ncg.t_max == 0 { current.clone() } else { run.filter.clone() };

    let psa_after = batch.slices().iter().map(|s| compute_psa(model, s, &phi, device)).collect::<Result<Vec<_>>>()?;
    let confusion_after = confusion_counts(model, &batch, &phi, device)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let (link_unfiltered, link_compensated) = if cfg.pipeline_link_frames > 0 {
        let seed = derive_seed(cfg.seed, &[stream, recording.device_id as u64, epoch_index as u64]);
        let (a, b) =
            measure_compensated_link(cfg, &recording.profile, &recording.channel, &phi, cfg.pipeline_link_frames, seed)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };

    Ok(MetricsReport {
        device_id: recording.device_id,
        stream,
        pba_before: mean(&psa_before),
        pba_after: mean(&psa_after),
        psa_before,
        psa_after,
        confusion_before,
        confusion_after,
        message: FilterMessage::new(
            recording.device_id,
            epoch_index,
            &phi,
            cfg.ncg.n_bins,
            run.objective_before(),
            run.objective_after(),
        ),
        trace: run.trace,
        link_unfiltered,
        link_compensated,
    })
}

/// A device transmitting with another device's filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub adversary_id: u32,
    pub victim_id: u32,
    pub stream: u64,
    /// Per-slice fraction classified as the victim, without and with the
    /// victim's filter.
    pub as_victim_before: Vec<f64>,
    pub as_victim_after: Vec<f64>,
    /// Per-slice fraction classified as the adversary itself.
    pub as_self_before: Vec<f64>,
    pub as_self_after: Vec<f64>,
}

impl AdversaryReport {
    pub fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn pba_victim_before(&self) -> f64 {
        Self::mean(&self.as_victim_before)
    }

    pub fn pba_victim_after(&self) -> f64 {
        Self::mean(&self.as_victim_after)
    }
}

/// Classifies the adversary's own captures without a filter and with the
/// victim's filter.
pub fn run_adversary(
    cfg: &ExperimentConfig,
    adversary: &Recording,
    victim_id: u32,
    victim_phi: &FirFilter,
    model: &Model,
    stream: u64,
) -> Result<AdversaryReport> {
    if victim_id == 0 || victim_id as usize > model.classes() {
        return Err(Error::InvalidLabel { label: victim_id as usize, classes: model.classes() });
    }
    let batch = slice_batch(adversary, cfg.slice_size, cfg.batch_slices)?;
    let id = FirFilter::identity(victim_phi.len());
    let per_slice = |phi: &FirFilter, label: u32| -> Result<Vec<f64>> {
        batch.slices().iter().map(|s| fraction_labelled(model, s, phi, label as usize)).collect()
    };
    Ok(AdversaryReport {
        adversary_id: adversary.device_id,
        victim_id,
        stream,
        as_victim_before: per_slice(&id, victim_id)?,
        as_victim_after: per_slice(victim_phi, victim_id)?,
        as_self_before: per_slice(&id, adversary.device_id)?,
        as_self_after: per_slice(victim_phi, adversary.device_id)?,
    })
}
