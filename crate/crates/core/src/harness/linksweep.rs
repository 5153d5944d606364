use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, LinkSweepConfig};
use crate::error::{Error, Result};
use crate::iqcore::{epsilon_of, FirFilter, Sample};
use crate::phy::{
    apply_channel, apply_tx_fir, demodulate_compensated, estimate_channel, measure_link, modulate, ChannelModel,
    LinkReport, OfdmConfig,
};

/// One point of an ε sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPoint {
    pub epsilon: f64,
    pub noise_std: f64,
    pub report: LinkReport,
}

/// Single-tap filter `(1 + eps u_re) + j eps u_im` with `u` in `[-1, 1]^2`.
pub fn perturbation_filter(eps: f64, u: (f64, f64)) -> FirFilter {
    FirFilter::new(vec![Sample::new(1.0 + eps * u.0, eps * u.1)]).expect("finite tap")
}

/// Sends `frames` one-example frames, each through a fresh random
/// perturbation filter of size `eps`, and decodes them with FIR
/// compensation. Frame `i` draws its payload, filter direction and noise
/// from a stream keyed by `(seed, i)` alone, so different `eps` (and noise
/// levels) see common random numbers.
fn run_frames(
    ofdm: &OfdmConfig,
    taps: &[Sample],
    noise_std: f64,
    eps: f64,
    frames: usize,
    seed: u64,
) -> Result<LinkReport> {
    let channel = ChannelModel::new(taps.to_vec(), noise_std, seed)?;
    ofdm.validate_for_link(taps.len(), 1)?;
    let nbits = ofdm.bits_per_example();
    let mut tx_all = Vec::with_capacity(frames * nbits);
    let mut rx_all = Vec::with_capacity(frames * nbits);
    for i in 0..frames {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let bits: Vec<u8> = (0..nbits).map(|_| rng.gen_range(0..2u8)).collect();
        let u = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
        let phi = perturbation_filter(eps, u);
        let tx = apply_tx_fir(&modulate(&bits, ofdm)?, &phi, ofdm)?;
        // Gaussian draws are std * z, so every noise level reuses the same z
        let rx = apply_channel(&tx, &channel, &mut rng);
        let got = lost_if_undetected(
            estimate_channel(&rx, ofdm).and_then(|h| demodulate_compensated(&rx, &phi, &h, ofdm)),
            nbits,
        )?;
        tx_all.extend_from_slice(&bits);
        rx_all.extend_from_slice(&got);
    }
    measure_link(&tx_all, &rx_all, nbits, ofdm.frame_rate_hz)
}

/// A frame whose preamble the receiver cannot find decodes to all zeros,
/// which counts as a packet error.
pub(crate) fn lost_if_undetected(decoded: Result<Vec<u8>>, nbits: usize) -> Result<Vec<u8>> {
    match decoded {
        Err(Error::EstimationFailure(_)) => Ok(vec![0; nbits]),
        other => other,
    }
}

fn channel_taps(link: &LinkSweepConfig) -> Vec<Sample> {
    link.channel_taps.iter().map(|&(re, im)| Sample::new(re, im)).collect()
}

/// Bisects the noise level (on a log scale) until the unfiltered packet
/// error rate matches `link.target_per`.
pub fn calibrate_noise_std(ofdm: &OfdmConfig, link: &LinkSweepConfig, seed: u64) -> Result<f64> {
    let taps = channel_taps(link);
    let per = |s: f64| run_frames(ofdm, &taps, s, 0.0, link.calibration_frames, seed).map(|r| r.per);
    let (mut lo, mut hi) = (1e-3f64.ln(), 2f64.ln());
    if per(lo.exp())? > link.target_per || per(hi.exp())? < link.target_per {
        return Err(Error::Config(format!("target PER {} is not reachable on this channel", link.target_per)));
    }
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        if per(mid.exp())? < link.target_per {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// PER and throughput at every `link.epsilons` value for a given noise level.
pub fn link_epsilon_sweep(ofdm: &OfdmConfig, link: &LinkSweepConfig, noise_std: f64, seed: u64) -> Result<Vec<LinkPoint>> {
    let taps = channel_taps(link);
    link.epsilons
        .iter()
        .map(|&eps| {
            Ok(LinkPoint {
                epsilon: eps,
                noise_std,
                report: run_frames(ofdm, &taps, noise_std, eps, link.frames_per_point, seed)?,
            })
        })
        .collect()
}

/// Largest `epsilon_of` the perturbation filter of size `eps` can reach.
pub fn perturbation_epsilon_bound(eps: f64) -> f64 {
    epsilon_of(&perturbation_filter(eps, (1.0, 1.0)), 1)
}
