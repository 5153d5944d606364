//! Complex baseband primitives: FIR filtering, DFTs, filter frequency
//! responses and the epsilon distortion metric.
//!
//! Every signal is a sequence of [`Sample`]s. Filtering is causal and
//! zero-padded: `y[n] = sum_k taps[k] * x[n - k]` with `x[m] = 0` for
//! `m < 0`, so the output has the same length as the input.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::ops::Deref;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One complex baseband sample (`re` = I, `im` = Q).
pub type Sample = Complex64;

fn all_finite(xs: &[Sample]) -> bool {
    xs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// A non-empty run of finite I/Q samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Sample>", into = "Vec<Sample>")]
pub struct IqFrame(Vec<Sample>);

impl IqFrame {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("I/Q frame must contain at least one sample"));
        }
        if !all_finite(&samples) {
            return Err(Error::invalid("I/Q frame contains non-finite samples"));
        }
        Ok(IqFrame(samples))
    }

    pub fn as_slice(&self) -> &[Sample] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Sample> {
        self.0
    }

    pub fn energy(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum()
    }
}

impl Deref for IqFrame {
    type Target = [Sample];
    fn deref(&self) -> &[Sample] {
        &self.0
    }
}

impl TryFrom<Vec<Sample>> for IqFrame {
    type Error = Error;
    fn try_from(v: Vec<Sample>) -> Result<Self> {
        IqFrame::new(v)
    }
}

impl From<IqFrame> for Vec<Sample> {
    fn from(f: IqFrame) -> Self {
        f.0
    }
}

/// Complex FIR taps `phi_0 .. phi_{M-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Sample>", into = "Vec<Sample>")]
pub struct FirFilter {
    taps: Vec<Sample>,
}

impl FirFilter {
    pub fn new(taps: Vec<Sample>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("FIR filter needs at least one tap"));
        }
        if !all_finite(&taps) {
            return Err(Error::invalid("FIR filter has non-finite taps"));
        }
        Ok(FirFilter { taps })
    }

    /// `phi_0 = 1`, all other taps zero: passes the signal through unchanged.
    pub fn identity(num_taps: usize) -> Self {
        let mut taps = vec![Sample::new(0.0, 0.0); num_taps.max(1)];
        taps[0] = Sample::new(1.0, 0.0);
        FirFilter { taps }
    }

    pub fn taps(&self) -> &[Sample] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_identity(&self) -> bool {
        self.taps[0] == Sample::new(1.0, 0.0) && self.taps[1..].iter().all(|t| *t == Sample::new(0.0, 0.0))
    }

    /// Real parameter vector `[re_0 .. re_{M-1}, im_0 .. im_{M-1}]`.
    pub fn to_reals(&self) -> Vec<f64> {
        self.taps.iter().map(|t| t.re).chain(self.taps.iter().map(|t| t.im)).collect()
    }

    /// Inverse of [`FirFilter::to_reals`].
    pub fn from_reals(params: &[f64]) -> Result<Self> {
        if params.is_empty() || params.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "real tap vector must have even, non-zero length (got {})",
                params.len()
            )));
        }
        let m = params.len() / 2;
        FirFilter::new((0..m).map(|k| Sample::new(params[k], params[m + k])).collect())
    }

    /// Full linear convolution of the two tap sequences (`M + K - 1` taps).
    pub fn convolve(&self, other: &FirFilter) -> FirFilter {
        let mut taps = vec![Sample::new(0.0, 0.0); self.len() + other.len() - 1];
        for (i, a) in self.taps.iter().enumerate() {
            for (j, b) in other.taps.iter().enumerate() {
                taps[i + j] += a * b;
            }
        }
        FirFilter { taps }
    }

    /// `identity + scale * (self - identity)`. Because the frequency response
    /// is linear in the taps, this scales `Phi(w) - 1` by `scale` on every bin.
    pub fn scaled_toward_identity(&self, scale: f64) -> FirFilter {
        let id = FirFilter::identity(self.len());
        let taps = self
            .taps
            .iter()
            .zip(id.taps.iter())
            .map(|(t, i)| i + (t - i) * scale)
            .collect();
        FirFilter { taps }
    }

    /// Pads with zero taps up to `num_taps`. Never truncates.
    pub fn zero_extended(&self, num_taps: usize) -> FirFilter {
        let mut taps = self.taps.clone();
        if num_taps > taps.len() {
            taps.resize(num_taps, Sample::new(0.0, 0.0));
        }
        FirFilter { taps }
    }
}

impl TryFrom<Vec<Sample>> for FirFilter {
    type Error = Error;
    fn try_from(v: Vec<Sample>) -> Result<Self> {
        FirFilter::new(v)
    }
}

impl From<FirFilter> for Vec<Sample> {
    fn from(f: FirFilter) -> Self {
        f.taps
    }
}

/// DFT coefficients, one per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFrame {
    pub bins: Vec<Sample>,
}

impl SpectrumFrame {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

/// Causal zero-padded convolution on raw slices; output length = `x.len()`.
pub fn fir_filter(x: &[Sample], taps: &[Sample]) -> Vec<Sample> {
    let mut out = vec![Sample::new(0.0, 0.0); x.len()];
    for (n, y) in out.iter_mut().enumerate() {
        let kmax = taps.len().min(n + 1);
        let mut acc = taps[0] * x[n];
        for k in 1..kmax {
            acc += taps[k] * x[n - k];
        }
        *y = acc;
    }
    out
}

/// Filters `x` with `phi`; the output has the same length as `x`.
pub fn apply_fir(x: &IqFrame, phi: &FirFilter) -> IqFrame {
    IqFrame(fir_filter(x, &phi.taps))
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, FftPair>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn with_plan<R>(n: usize, f: impl FnOnce(&FftPair) -> R) -> R {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        if !cache.contains_key(&n) {
            let pair = FftPair { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) };
            cache.insert(n, pair);
        }
        f(&cache[&n])
    })
}

/// In-place unnormalized forward DFT: `X[k] = sum_n x[n] e^{-j 2 pi k n / N}`.
pub fn dft_in_place(buf: &mut [Sample]) {
    if buf.is_empty() {
        return;
    }
    with_plan(buf.len(), |p| p.forward.process(buf));
}

/// In-place inverse DFT including the `1/N` factor.
pub fn idft_in_place(buf: &mut [Sample]) {
    if buf.is_empty() {
        return;
    }
    with_plan(buf.len(), |p| p.inverse.process(buf));
    let scale = 1.0 / buf.len() as f64;
    for c in buf.iter_mut() {
        *c *= scale;
    }
}

pub fn dft(x: &IqFrame) -> SpectrumFrame {
    let mut bins = x.to_vec();
    dft_in_place(&mut bins);
    SpectrumFrame { bins }
}

pub fn idft(spec: &SpectrumFrame) -> Result<IqFrame> {
    if spec.bins.is_empty() {
        return Err(Error::invalid("cannot invert an empty spectrum"));
    }
    let mut buf = spec.bins.clone();
    idft_in_place(&mut buf);
    IqFrame::new(buf)
}

/// DFT of the taps zero-padded to `n_bins`.
pub fn frequency_response(phi: &FirFilter, n_bins: usize) -> Result<SpectrumFrame> {
    if n_bins < phi.len() {
        return Err(Error::invalid(format!(
            "frequency response needs at least {} bins for a {}-tap filter (got {n_bins})",
            phi.len(),
            phi.len()
        )));
    }
    let mut bins = phi.taps.clone();
    bins.resize(n_bins, Sample::new(0.0, 0.0));
    dft_in_place(&mut bins);
    Ok(SpectrumFrame { bins })
}

/// `max_k |Phi(2 pi k / n_bins) - 1|`, the worst per-bin deviation from an
/// unfiltered signal. Evaluated by direct summation so any `n_bins >= 1`
/// works, including fewer bins than taps.
pub fn epsilon_of(phi: &FirFilter, n_bins: usize) -> f64 {
    let n_bins = n_bins.max(1);
    (0..n_bins)
        .map(|k| {
            let w = -2.0 * PI * k as f64 / n_bins as f64;
            let resp: Sample = phi
                .taps
                .iter()
                .enumerate()
                .map(|(m, t)| t * Sample::from_polar(1.0, w * m as f64))
                .sum();
            (resp - Sample::new(1.0, 0.0)).norm()
        })
        .fold(0.0, f64::max)
}
