use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::iqcore::{dft_in_place, fir_filter, frequency_response, idft_in_place, FirFilter, IqFrame, Sample, SpectrumFrame};

use super::{OfdmConfig, SubcarrierLayout};

const ZERO: Sample = Sample::new(0.0, 0.0);

/// Gray-coded QPSK: bit pair `(b0, b1)` maps to `((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)`.
pub fn map_qpsk(bits: &[u8]) -> Result<Vec<Sample>> {
    if bits.len() % 2 != 0 {
        return Err(Error::invalid("QPSK needs an even number of bits"));
    }
    bits.chunks_exact(2)
        .map(|pair| {
            if pair[0] > 1 || pair[1] > 1 {
                return Err(Error::invalid("bits must be 0 or 1"));
            }
            let i = 1.0 - 2.0 * f64::from(pair[0]);
            let q = 1.0 - 2.0 * f64::from(pair[1]);
            Ok(Sample::new(i * FRAC_1_SQRT_2, q * FRAC_1_SQRT_2))
        })
        .collect()
}

/// Hard-decision QPSK demapper.
pub fn demap_qpsk(symbols: &[Sample]) -> Vec<u8> {
    symbols.iter().flat_map(|s| [u8::from(s.re < 0.0), u8::from(s.im < 0.0)]).collect()
}

/// Known training sequence: +-1 on every used subcarrier, from the 7-bit
/// `x^7 + x^4 + 1` scrambler started in the all-ones state.
pub(crate) fn preamble_values(count: usize) -> Vec<f64> {
    let mut state: u8 = 0x7f;
    (0..count)
        .map(|_| {
            let bit = ((state >> 6) ^ (state >> 3)) & 1;
            state = ((state << 1) | bit) & 0x7f;
            if bit == 1 {
                -1.0
            } else {
                1.0
            }
        })
        .collect()
}

fn tx_scale(cfg: &OfdmConfig) -> f64 {
    cfg.fft_size as f64 / (cfg.used_subcarriers() as f64).sqrt()
}

fn rx_scale(cfg: &OfdmConfig) -> f64 {
    (cfg.used_subcarriers() as f64).sqrt() / cfg.fft_size as f64
}

fn push_symbol(out: &mut Vec<Sample>, mut bins: Vec<Sample>, cfg: &OfdmConfig) {
    idft_in_place(&mut bins);
    let s = tx_scale(cfg);
    for b in bins.iter_mut() {
        *b *= s;
    }
    out.extend_from_slice(&bins[cfg.fft_size - cfg.cp_len..]);
    out.extend_from_slice(&bins);
}

/// QPSK-maps `bits`, inserts pilots, and returns preamble + data symbols in
/// the time domain with cyclic prefixes.
pub fn modulate(bits: &[u8], cfg: &OfdmConfig) -> Result<IqFrame> {
    cfg.validate()?;
    let per_symbol = cfg.bits_per_symbol();
    if bits.is_empty() || bits.len() % per_symbol != 0 {
        return Err(Error::invalid(format!(
            "bit count {} is not a positive multiple of {per_symbol} bits per OFDM symbol",
            bits.len()
        )));
    }
    let layout = cfg.layout()?;
    let points = map_qpsk(bits)?;
    let n_sym = bits.len() / per_symbol;
    let mut out = Vec::with_capacity(cfg.frame_len(n_sym));

    let mut bins = vec![ZERO; cfg.fft_size];
    for (&b, p) in layout.used.iter().zip(preamble_values(layout.used.len())) {
        bins[b] = Sample::new(p, 0.0);
    }
    push_symbol(&mut out, bins, cfg);

    for chunk in points.chunks_exact(cfg.data_subcarriers) {
        let mut bins = vec![ZERO; cfg.fft_size];
        for (&b, &v) in layout.data.iter().zip(chunk) {
            bins[b] = v;
        }
        for &b in &layout.pilots {
            bins[b] = Sample::new(1.0, 0.0);
        }
        push_symbol(&mut out, bins, cfg);
    }
    IqFrame::new(out)
}

/// Applies `phi` to the data section of a frame (everything after the
/// preamble), as a transmitter inserting the filter into its baseband chain
/// would. The preamble stays unfiltered so the receiver's channel estimate
/// does not absorb the filter.
pub fn apply_tx_fir(frame: &IqFrame, phi: &FirFilter, cfg: &OfdmConfig) -> Result<IqFrame> {
    cfg.validate_for_link(1, phi.len())?;
    let (pre, data) = split_frame(frame, cfg)?;
    let mut out = pre.to_vec();
    out.extend(fir_filter(data, phi.taps()));
    IqFrame::new(out)
}

fn split_frame<'a>(frame: &'a [Sample], cfg: &OfdmConfig) -> Result<(&'a [Sample], &'a [Sample])> {
    let sl = cfg.symbol_len();
    if frame.len() < 2 * sl || frame.len() % sl != 0 {
        return Err(Error::EstimationFailure(format!(
            "frame of {} samples is not a preamble plus whole {sl}-sample symbols",
            frame.len()
        )));
    }
    Ok(frame.split_at(sl))
}

/// Receiver DFT of one symbol (CP stripped), scaled so that an ideal link
/// returns the transmitted bins.
fn symbol_bins(symbol: &[Sample], cfg: &OfdmConfig) -> Vec<Sample> {
    let mut body = symbol[cfg.cp_len..cfg.cp_len + cfg.fft_size].to_vec();
    dft_in_place(&mut body);
    let s = rx_scale(cfg);
    for b in body.iter_mut() {
        *b *= s;
    }
    body
}

/// Least-squares channel estimate from the preamble: `H~[k] = Y[k] / P[k]`
/// on every used bin; unused bins are set to zero.
pub fn estimate_channel(rx: &IqFrame, cfg: &OfdmConfig) -> Result<SpectrumFrame> {
    cfg.validate()?;
    let (pre, _) = split_frame(rx, cfg)?;
    let layout = cfg.layout()?;
    let y = symbol_bins(pre, cfg);

    let used_power: f64 = layout.used.iter().map(|&b| y[b].norm_sqr()).sum::<f64>() / layout.used.len() as f64;
    let guard: Vec<usize> = (0..cfg.fft_size).filter(|b| !layout.used.contains(b)).collect();
    let guard_power: f64 = guard.iter().map(|&b| y[b].norm_sqr()).sum::<f64>() / guard.len() as f64;
    if !(used_power > guard_power) || used_power <= f64::MIN_POSITIVE {
        return Err(Error::EstimationFailure(format!(
            "no preamble: used-bin power {used_power:.3e} does not exceed guard-bin power {guard_power:.3e}"
        )));
    }

    let mut bins = vec![ZERO; cfg.fft_size];
    for (&b, p) in layout.used.iter().zip(preamble_values(layout.used.len())) {
        bins[b] = y[b] / p;
    }
    Ok(SpectrumFrame { bins })
}

fn check_estimate(h_est: &SpectrumFrame, cfg: &OfdmConfig, layout: &SubcarrierLayout) -> Result<()> {
    if h_est.len() != cfg.fft_size {
        return Err(Error::invalid(format!(
            "channel estimate has {} bins, expected {}",
            h_est.len(),
            cfg.fft_size
        )));
    }
    if let Some(&b) = layout.data.iter().find(|&&b| h_est.bins[b].norm_sqr() == 0.0 || !h_est.bins[b].norm().is_finite()) {
        return Err(Error::EstimationFailure(format!("channel estimate is degenerate on bin {b}")));
    }
    Ok(())
}

/// Divides every data bin by `h_est` (and by `phi`'s response, if given) and
/// returns the payload values, symbol by symbol in ascending frequency order.
fn equalize(rx: &IqFrame, cfg: &OfdmConfig, h_est: &SpectrumFrame, phi_resp: Option<&[Sample]>) -> Result<IqFrame> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    check_estimate(h_est, cfg, &layout)?;
    let (_, data) = split_frame(rx, cfg)?;
    let mut out = Vec::with_capacity(data.len() / cfg.symbol_len() * cfg.data_subcarriers);
    for symbol in data.chunks_exact(cfg.symbol_len()) {
        let y = symbol_bins(symbol, cfg);
        for &b in &layout.data {
            let mut d = h_est.bins[b];
            if let Some(resp) = phi_resp {
                d *= resp[b];
            }
            out.push(y[b] / d);
        }
    }
    IqFrame::new(out)
}

/// Channel-equalized payload I/Q values. A transmit FIR is *not* divided out,
/// so its effect stays visible to a classifier.
pub fn equalized_payload(rx: &IqFrame, cfg: &OfdmConfig, h_est: &SpectrumFrame) -> Result<IqFrame> {
    equalize(rx, cfg, h_est, None)
}

/// Receiver-side FIR compensation: per symbol, strips the prefix, takes the
/// DFT and divides each data bin by `H~(w) Phi(w)`, returning the recovered
/// unfiltered payload values.
pub fn compensate_fir(rx: &IqFrame, phi: &FirFilter, h_est: &SpectrumFrame, cfg: &OfdmConfig) -> Result<IqFrame> {
    cfg.validate_for_link(1, phi.len())?;
    let resp = frequency_response(phi, cfg.fft_size)?;
    let layout = cfg.layout()?;
    for &b in &layout.used {
        let magnitude = resp.bins[b].norm();
        if magnitude < cfg.compensation_floor {
            return Err(Error::IllConditionedFilter { bin: b, magnitude, floor: cfg.compensation_floor });
        }
    }
    equalize(rx, cfg, h_est, Some(&resp.bins))
}

/// Hard-decision payload bits after channel equalization.
pub fn demodulate(rx: &IqFrame, cfg: &OfdmConfig, h_est: &SpectrumFrame) -> Result<Vec<u8>> {
    Ok(demap_qpsk(&equalized_payload(rx, cfg, h_est)?))
}

/// Hard-decision payload bits after channel equalization and FIR compensation.
pub fn demodulate_compensated(rx: &IqFrame, phi: &FirFilter, h_est: &SpectrumFrame, cfg: &OfdmConfig) -> Result<Vec<u8>> {
    Ok(demap_qpsk(&compensate_fir(rx, phi, h_est, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iqcore::epsilon_of;
    use crate::phy::{apply_channel, ChannelModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_bits(rng: &mut impl Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.gen_range(0..2u8)).collect()
    }

    fn known_response(taps: &[Sample], cfg: &OfdmConfig) -> SpectrumFrame {
        let mut bins = vec![ZERO; cfg.fft_size];
        for (k, b) in bins.iter_mut().enumerate() {
            *b = taps
                .iter()
                .enumerate()
                .map(|(m, h)| h * Sample::from_polar(1.0, -2.0 * PI * (k * m) as f64 / cfg.fft_size as f64))
                .sum();
        }
        SpectrumFrame { bins }
    }

    #[test]
    fn zero_bits_give_one_point_everywhere() {
        let cfg = OfdmConfig::default();
        let frame = modulate(&vec![0; cfg.bits_per_example()], &cfg).unwrap();
        assert_eq!(frame.len(), cfg.frame_len(6));
        let h = estimate_channel(&frame, &cfg).unwrap();
        let payload = equalized_payload(&frame, &cfg, &h).unwrap();
        assert_eq!(payload.len(), 288);
        let want = Sample::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2);
        assert!(payload.iter().all(|p| (p - want).norm() < 1e-12));
    }

    #[test]
    fn ideal_roundtrip_is_bit_exact() {
        let cfg = OfdmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bits = random_bits(&mut rng, cfg.bits_per_example());
        let frame = modulate(&bits, &cfg).unwrap();
        let h = estimate_channel(&frame, &cfg).unwrap();
        assert_eq!(demodulate(&frame, &cfg, &h).unwrap(), bits);
    }

    #[test]
    fn unit_average_power() {
        let cfg = OfdmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = modulate(&random_bits(&mut rng, 96 * 40), &cfg).unwrap();
        let p = frame.energy() / frame.len() as f64;
        assert!((p - 1.0).abs() < 0.05, "power {p}");
    }

    #[test]
    fn bad_bit_counts_rejected() {
        let cfg = OfdmConfig::default();
        assert!(modulate(&[0; 95], &cfg).is_err());
        assert!(modulate(&[], &cfg).is_err());
        assert!(modulate(&[2; 96], &cfg).is_err());
    }

    #[test]
    fn flat_channel_estimate_is_one() {
        let cfg = OfdmConfig::default();
        let frame = modulate(&vec![1; 96], &cfg).unwrap();
        let h = estimate_channel(&frame, &cfg).unwrap();
        for &b in &cfg.layout().unwrap().pilots {
            assert!((h.bins[b] - Sample::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn multipath_estimate_matches_analytic_response() {
        let cfg = OfdmConfig::default();
        let taps = vec![Sample::new(0.9, 0.1), Sample::new(-0.3, 0.25)];
        let ch = ChannelModel::new(taps.clone(), 0.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = modulate(&random_bits(&mut rng, 96 * 2), &cfg).unwrap();
        let rx = apply_channel(&frame, &ch, &mut rng);
        let h = estimate_channel(&rx, &cfg).unwrap();
        let want = known_response(&taps, &cfg);
        for &b in &cfg.layout().unwrap().used {
            assert!((h.bins[b] - want.bins[b]).norm() <= 1e-9);
        }
    }

    #[test]
    fn missing_preamble_fails() {
        let cfg = OfdmConfig::default();
        let zeros = IqFrame::new(vec![ZERO; cfg.frame_len(2)]).unwrap();
        assert!(matches!(estimate_channel(&zeros, &cfg), Err(Error::EstimationFailure(_))));
        let short = IqFrame::new(vec![Sample::new(1.0, 0.0); 100]).unwrap();
        assert!(matches!(estimate_channel(&short, &cfg), Err(Error::EstimationFailure(_))));
        // a DC tone has no energy on used bins
        let dc = IqFrame::new(vec![Sample::new(1.0, 0.0); cfg.frame_len(2)]).unwrap();
        assert!(matches!(estimate_channel(&dc, &cfg), Err(Error::EstimationFailure(_))));
    }

    #[test]
    fn multipath_equalization_is_exact() {
        let cfg = OfdmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bits = random_bits(&mut rng, cfg.bits_per_example());
        let frame = modulate(&bits, &cfg).unwrap();
        let ch = ChannelModel::new(vec![Sample::new(1.0, 0.0), Sample::new(0.4, -0.3), Sample::new(0.0, 0.2)], 0.0, 0).unwrap();
        let rx = apply_channel(&frame, &ch, &mut rng);
        let h = estimate_channel(&rx, &cfg).unwrap();
        let payload = equalized_payload(&rx, &cfg, &h).unwrap();
        let sent = map_qpsk(&bits).unwrap();
        for (a, b) in payload.iter().zip(sent.iter()) {
            assert!((a - b).norm() <= 1e-9);
        }
    }

    #[test]
    fn tx_filter_survives_equalization() {
        let cfg = OfdmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bits = random_bits(&mut rng, cfg.bits_per_example());
        let frame = modulate(&bits, &cfg).unwrap();
        let phi = FirFilter::new(vec![Sample::new(1.05, 0.1), Sample::new(-0.1, 0.05), Sample::new(0.02, -0.04)]).unwrap();
        let ch = ChannelModel::new(vec![Sample::new(0.8, 0.3), Sample::new(0.2, 0.0)], 0.0, 0).unwrap();
        let rx = apply_channel(&apply_tx_fir(&frame, &phi, &cfg).unwrap(), &ch, &mut rng);
        let h = estimate_channel(&rx, &cfg).unwrap();
        let payload = equalized_payload(&rx, &cfg, &h).unwrap();
        let resp = known_response(phi.taps(), &cfg);
        let layout = cfg.layout().unwrap();
        let sent = map_qpsk(&bits).unwrap();
        for (i, (a, s)) in payload.iter().zip(sent.iter()).enumerate() {
            let b = layout.data[i % cfg.data_subcarriers];
            assert!((a - s * resp.bins[b]).norm() <= 1e-9);
        }
        // and compensation removes it
        let comp = compensate_fir(&rx, &phi, &h, &cfg).unwrap();
        for (a, s) in comp.iter().zip(sent.iter()) {
            assert!((a - s).norm() <= 1e-9);
        }
    }

    #[test]
    fn compensation_exact_for_random_filters() {
        let cfg = OfdmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let taps = vec![Sample::new(1.0, 0.0), Sample::new(0.3, 0.3)];
        let ch = ChannelModel::new(taps.clone(), 0.0, 0).unwrap();
        let h = known_response(&taps, &cfg);
        for _ in 0..10 {
            let bits = random_bits(&mut rng, cfg.bits_per_example());
            let frame = modulate(&bits, &cfg).unwrap();
            let mut phi = FirFilter::new((0..5).map(|_| Sample::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).unwrap();
            let e = epsilon_of(&phi, cfg.fft_size);
            if e > 0.5 {
                phi = phi.scaled_toward_identity(0.5 / e);
            }
            let rx = apply_channel(&apply_tx_fir(&frame, &phi, &cfg).unwrap(), &ch, &mut rng);
            assert_eq!(demodulate_compensated(&rx, &phi, &h, &cfg).unwrap(), bits);
        }
    }

    #[test]
    fn ill_conditioned_filter_rejected() {
        let cfg = OfdmConfig::default();
        let frame = modulate(&vec![0; 96], &cfg).unwrap();
        let h = estimate_channel(&frame, &cfg).unwrap();
        // 1 - z^-1 has a null at DC only, which is unused: allowed
        let notch_dc = FirFilter::new(vec![Sample::new(1.0, 0.0), Sample::new(-1.0, 0.0)]).unwrap();
        assert!(compensate_fir(&frame, &notch_dc, &h, &cfg).is_ok());
        // 1 + z^-32 nulls every odd bin, including used ones
        let mut taps = vec![ZERO; 33];
        taps[0] = Sample::new(1.0, 0.0);
        taps[32] = Sample::new(1.0, 0.0);
        let comb = FirFilter::new(taps).unwrap();
        let wide = OfdmConfig { cp_len: 40, ..Default::default() };
        let frame = modulate(&vec![0; 96], &wide).unwrap();
        let h = estimate_channel(&frame, &wide).unwrap();
        assert!(matches!(compensate_fir(&frame, &comb, &h, &wide), Err(Error::IllConditionedFilter { .. })));
    }

    #[test]
    fn awgn_ber_matches_closed_form() {
        let cfg = OfdmConfig::default();
        let es_n0 = 10.0;
        // per-bin noise variance after the receiver DFT is 2 sigma^2 U / N
        let sigma = (cfg.fft_size as f64 / (2.0 * es_n0 * cfg.used_subcarriers() as f64)).sqrt();
        let ch = ChannelModel::new(vec![Sample::new(1.0, 0.0)], sigma, 0).unwrap();
        let h = known_response(&[Sample::new(1.0, 0.0)], &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut errors, mut total) = (0usize, 0usize);
        for _ in 0..2000 {
            let bits = random_bits(&mut rng, cfg.bits_per_symbol() * 10);
            let rx = apply_channel(&modulate(&bits, &cfg).unwrap(), &ch, &mut rng);
            let got = demodulate(&rx, &cfg, &h).unwrap();
            errors += bits.iter().zip(&got).filter(|(a, b)| a != b).count();
            total += bits.len();
        }
        let ber = errors as f64 / total as f64;
        let want = crate::phy::qpsk_awgn_ber(es_n0);
        assert!((ber - want).abs() / want < 0.1, "ber {ber} vs {want}");
    }

    #[test]
    fn estimator_error_power_matches_noise_over_pilot_energy() {
        let cfg = OfdmConfig::default();
        let sigma = 0.1;
        let ch = ChannelModel::new(vec![Sample::new(1.0, 0.0)], sigma, 0).unwrap();
        let layout = cfg.layout().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bits = random_bits(&mut rng, cfg.bits_per_symbol());
        let tx = modulate(&bits, &cfg).unwrap();
        let trials = 2000;
        let mut err = 0.0;
        for _ in 0..trials {
            let h = estimate_channel(&apply_channel(&tx, &ch, &mut rng), &cfg).unwrap();
            err += layout.used.iter().map(|&b| (h.bins[b] - 1.0).norm_sqr()).sum::<f64>();
        }
        let mse = err / (trials * layout.used.len()) as f64;
        // unit-energy BPSK training values
        let want = 2.0 * sigma * sigma * cfg.used_subcarriers() as f64 / cfg.fft_size as f64;
        assert!((mse - want).abs() / want < 0.05, "mse {mse} vs {want}");
    }
}
