//! Minimal OFDM physical layer.
//!
//! A frame is one training (preamble) symbol followed by data symbols, each
//! prefixed with a cyclic prefix. The preamble carries a known BPSK sequence
//! on every used subcarrier and is what the receiver estimates the channel
//! from. Data symbols carry QPSK payload on the data subcarriers and a
//! constant `+1` on the pilot subcarriers.
//!
//! Time-domain scaling is chosen so that the average sample power of a
//! symbol is one and a receiver DFT of a symbol body returns the transmitted
//! constellation points exactly (`Y[k] = H[k] X[k]` for a channel `h`).

mod channel;
mod impair;
mod link;
mod ofdm;
pub mod recording;

pub use channel::{apply_channel, ChannelModel};
pub use impair::{apply_impairments, DeviceProfile};
pub use link::{measure_link, qpsk_awgn_ber, LinkReport};
pub use ofdm::{
    apply_tx_fir, compensate_fir, demap_qpsk, demodulate, demodulate_compensated, equalized_payload,
    estimate_channel, map_qpsk, modulate,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    #[default]
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Qpsk => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfdmConfig {
    pub fft_size: usize,
    pub data_subcarriers: usize,
    pub pilot_subcarriers: usize,
    pub cp_len: usize,
    pub modulation: Modulation,
    pub symbols_per_example: usize,
    /// Nominal frames per second, used to express throughput in kbit/s.
    pub frame_rate_hz: f64,
    /// Smallest `|Phi(w)|` on a used bin that FIR compensation will divide by.
    pub compensation_floor: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        OfdmConfig {
            fft_size: 64,
            data_subcarriers: 48,
            pilot_subcarriers: 4,
            cp_len: 16,
            modulation: Modulation::Qpsk,
            symbols_per_example: 6,
            frame_rate_hz: 175.0,
            compensation_floor: 1e-3,
        }
    }
}

/// Subcarrier roles, as FFT bin indices. Each list is in ascending frequency
/// order (negative frequencies first).
#[derive(Debug, Clone, PartialEq)]
pub struct SubcarrierLayout {
    pub used: Vec<usize>,
    pub data: Vec<usize>,
    pub pilots: Vec<usize>,
}

impl OfdmConfig {
    pub fn used_subcarriers(&self) -> usize {
        self.data_subcarriers + self.pilot_subcarriers
    }

    pub fn symbol_len(&self) -> usize {
        self.fft_size + self.cp_len
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.data_subcarriers * self.modulation.bits_per_symbol()
    }

    /// Payload I/Q values in one classifier example (`48 * 6 = 288` by default).
    pub fn example_len(&self) -> usize {
        self.data_subcarriers * self.symbols_per_example
    }

    pub fn bits_per_example(&self) -> usize {
        self.bits_per_symbol() * self.symbols_per_example
    }

    /// Samples in a frame carrying `data_symbols` OFDM symbols plus the preamble.
    pub fn frame_len(&self, data_symbols: usize) -> usize {
        (data_symbols + 1) * self.symbol_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 4 {
            return Err(Error::Config(format!("fft_size {} is too small", self.fft_size)));
        }
        if self.data_subcarriers == 0 {
            return Err(Error::Config("need at least one data subcarrier".into()));
        }
        if self.used_subcarriers() + 1 > self.fft_size {
            return Err(Error::Config(format!(
                "{} data + {} pilot subcarriers plus the DC guard do not fit in a {}-point FFT",
                self.data_subcarriers, self.pilot_subcarriers, self.fft_size
            )));
        }
        if self.cp_len >= self.fft_size {
            return Err(Error::Config("cyclic prefix must be shorter than the FFT".into()));
        }
        if self.symbols_per_example == 0 {
            return Err(Error::Config("symbols_per_example must be positive".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::Config("frame_rate_hz must be positive".into()));
        }
        if !(self.compensation_floor >= 0.0) {
            return Err(Error::Config("compensation_floor must be non-negative".into()));
        }
        self.layout().map(|_| ())
    }

    /// Checks that the cyclic prefix absorbs the combined memory of a channel
    /// with `channel_taps` taps and a transmit FIR with `fir_taps` taps, so
    /// that both act as per-bin multiplications inside each symbol.
    pub fn validate_for_link(&self, channel_taps: usize, fir_taps: usize) -> Result<()> {
        self.validate()?;
        let need = channel_taps + fir_taps.saturating_sub(1);
        if self.cp_len < need {
            return Err(Error::Config(format!(
                "cp_len {} is shorter than channel taps ({channel_taps}) + FIR taps ({fir_taps}) - 1 = {need}",
                self.cp_len
            )));
        }
        if fir_taps > self.fft_size {
            return Err(Error::Config(format!("{fir_taps} FIR taps exceed the FFT size")));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<SubcarrierLayout> {
        let used = self.used_subcarriers();
        let half_neg = used / 2;
        let half_pos = used - half_neg;
        let n = self.fft_size as i64;
        let bin = |f: i64| -> usize { f.rem_euclid(n) as usize };

        let p_neg = self.pilot_subcarriers / 2;
        let p_pos = self.pilot_subcarriers - p_neg;
        let place = |count: usize, half: usize| -> Vec<i64> {
            (0..count).map(|i| ((2 * i + 1) * (half + 2) / (2 * count)).clamp(1, half) as i64).collect()
        };
        let mut pilot_freqs: Vec<i64> = place(p_neg, half_neg).into_iter().map(|f| -f).collect();
        pilot_freqs.extend(place(p_pos, half_pos));
        pilot_freqs.sort_unstable();
        pilot_freqs.dedup();
        if pilot_freqs.len() != self.pilot_subcarriers {
            return Err(Error::Config("pilot subcarriers collide; use fewer pilots".into()));
        }

        let freqs: Vec<i64> = (-(half_neg as i64)..0).chain(1..=half_pos as i64).collect();
        let data_freqs: Vec<i64> = freqs.iter().copied().filter(|f| !pilot_freqs.contains(f)).collect();
        Ok(SubcarrierLayout {
            used: freqs.iter().map(|&f| bin(f)).collect(),
            data: data_freqs.iter().map(|&f| bin(f)).collect(),
            pilots: pilot_freqs.iter().map(|&f| bin(f)).collect(),
        })
    }

    /// SHA-256 of the canonical JSON form; ties recordings to the modem setup.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("OfdmConfig serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_matches_wifi_pilots() {
        let cfg = OfdmConfig::default();
        cfg.validate().unwrap();
        let l = cfg.layout().unwrap();
        assert_eq!(l.used.len(), 52);
        assert_eq!(l.data.len(), 48);
        assert_eq!(l.pilots, vec![64 - 21, 64 - 7, 7, 21]);
        assert!(!l.used.contains(&0));
        assert_eq!(cfg.example_len(), 288);
    }

    #[test]
    fn rejects_overfull_and_short_prefix() {
        let cfg = OfdmConfig { data_subcarriers: 60, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = OfdmConfig::default();
        assert!(cfg.validate_for_link(3, 10).is_ok());
        assert!(cfg.validate_for_link(8, 10).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = OfdmConfig::default();
        let b = OfdmConfig { cp_len: 20, ..Default::default() };
        assert_eq!(a.digest(), OfdmConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
