use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqcore::{fir_filter, FirFilter, IqFrame, Sample};

/// Static multipath channel with additive white Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub taps_h: Vec<Sample>,
    /// Per-component (I and Q separately) noise standard deviation.
    pub noise_std: f64,
    pub seed: u64,
}

impl ChannelModel {
    pub fn new(taps_h: Vec<Sample>, noise_std: f64, seed: u64) -> Result<Self> {
        let ch = ChannelModel { taps_h, noise_std, seed };
        ch.validate()?;
        Ok(ch)
    }

    pub fn ideal() -> Self {
        ChannelModel { taps_h: vec![Sample::new(1.0, 0.0)], noise_std: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps_h.is_empty() {
            return Err(Error::invalid("channel needs at least one tap"));
        }
        if self.taps_h.iter().any(|t| !t.re.is_finite() || !t.im.is_finite()) {
            return Err(Error::invalid("channel taps must be finite"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        Ok(())
    }

    /// The multipath taps as a filter, e.g. to compute the exact channel response.
    pub fn as_filter(&self) -> FirFilter {
        FirFilter::new(self.taps_h.clone()).expect("validated channel taps")
    }
}

/// `h * x + w`: causal convolution truncated to the input length, plus
/// independent `N(0, noise_std^2)` noise on I and on Q.
pub fn apply_channel(x: &IqFrame, ch: &ChannelModel, rng: &mut impl Rng) -> IqFrame {
    let mut y = fir_filter(x, &ch.taps_h);
    if ch.noise_std > 0.0 {
        let dist = Normal::new(0.0, ch.noise_std).expect("validated noise_std");
        for s in y.iter_mut() {
            s.re += dist.sample(rng);
            s.im += dist.sample(rng);
        }
    }
    IqFrame::new(y).expect("channel preserves length")
}
