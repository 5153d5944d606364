use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Bit/frame error statistics of a run of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub ber: f64,
    pub per: f64,
    /// `(1 - per) * frame_len * frame_rate`, in kbit/s.
    pub throughput_kbps: f64,
    pub frames: usize,
    pub bit_errors: usize,
    pub frame_errors: usize,
}

/// Compares transmitted and received bit streams frame by frame. A frame is
/// in error if any of its `frame_len` bits differ.
pub fn measure_link(tx_bits: &[u8], rx_bits: &[u8], frame_len: usize, frame_rate_hz: f64) -> Result<LinkReport> {
    if tx_bits.len() != rx_bits.len() {
        return Err(Error::invalid(format!(
            "bit streams differ in length ({} vs {})",
            tx_bits.len(),
            rx_bits.len()
        )));
    }
    if frame_len == 0 || tx_bits.is_empty() || tx_bits.len() % frame_len != 0 {
        return Err(Error::invalid(format!(
            "{} bits do not split into whole {frame_len}-bit frames",
            tx_bits.len()
        )));
    }
    let mut bit_errors = 0;
    let mut frame_errors = 0;
    for (t, r) in tx_bits.chunks_exact(frame_len).zip(rx_bits.chunks_exact(frame_len)) {
        let e = t.iter().zip(r).filter(|(a, b)| a != b).count();
        bit_errors += e;
        frame_errors += usize::from(e > 0);
    }
    let frames = tx_bits.len() / frame_len;
    let per = frame_errors as f64 / frames as f64;
    Ok(LinkReport {
        ber: bit_errors as f64 / tx_bits.len() as f64,
        per,
        throughput_kbps: (1.0 - per) * frame_len as f64 * frame_rate_hz / 1000.0,
        frames,
        bit_errors,
        frame_errors,
    })
}

/// Uncoded Gray-mapped QPSK bit error rate over AWGN: `Q(sqrt(Es/N0))`.
pub fn qpsk_awgn_ber(es_n0_linear: f64) -> f64 {
    0.5 * erfc((es_n0_linear / 2.0).sqrt())
}
