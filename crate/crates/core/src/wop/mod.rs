//! Transmit-filter optimization against a trained classifier.
//!
//! The decision variable is an `M`-tap complex FIR filter, handled as `2M`
//! reals (`[re_0 .. re_{M-1}, im_0 .. im_{M-1}]`). The objective is the
//! classifier's softmax output for a target device, summed over a slice of
//! inputs after each has been filtered. It is maximized by nonlinear
//! conjugate gradient ascent ([`optimize_fir`]) under a bound on the
//! filter's distortion `epsilon_of`.

mod ncg;

pub use ncg::{
    line_search, ncg_step, optimize_fir, project_to_epsilon_ball, FirOptimization, LineSearchOptions, NcgOptions,
    NcgState, StepInfo,
};

use serde::{Deserialize, Serialize};

use crate::cnn::{Model, Tensor};
use crate::error::{Error, Result};
use crate::iqcore::{apply_fir, epsilon_of, FirFilter, IqFrame, Sample};

/// `S` consecutive classifier inputs of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    inputs: Vec<IqFrame>,
}

impl Slice {
    pub fn new(inputs: Vec<IqFrame>) -> Result<Self> {
        let first = inputs.first().ok_or_else(|| Error::invalid("a slice needs at least one input"))?;
        if let Some(bad) = inputs.iter().find(|x| x.len() != first.len()) {
            return Err(Error::ShapeMismatch {
                expected: format!("inputs of {} samples", first.len()),
                found: format!("an input of {} samples", bad.len()),
            });
        }
        Ok(Slice { inputs })
    }

    pub fn inputs(&self) -> &[IqFrame] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_len(&self) -> usize {
        self.inputs[0].len()
    }
}

/// `B` slices with a common `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    slices: Vec<Slice>,
}

impl Batch {
    pub fn new(slices: Vec<Slice>) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::invalid("a batch needs at least one slice"))?;
        if slices.iter().any(|s| s.len() != first.len() || s.input_len() != first.input_len()) {
            return Err(Error::ShapeMismatch {
                expected: format!("slices of {} inputs of {} samples", first.len(), first.input_len()),
                found: "a slice of a different size".into(),
            });
        }
        Ok(Batch { slices })
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Partial derivatives of the objective with respect to the real and
/// imaginary parts of every tap.
#[derive(Debug, Clone, PartialEq)]
pub struct TapGradient {
    pub d_re: Vec<f64>,
    pub d_im: Vec<f64>,
}

impl TapGradient {
    /// Same ordering as [`FirFilter::to_reals`].
    pub fn to_reals(&self) -> Vec<f64> {
        self.d_re.iter().chain(&self.d_im).copied().collect()
    }

    pub fn from_reals(v: &[f64]) -> Self {
        let m = v.len() / 2;
        TapGradient { d_re: v[..m].to_vec(), d_im: v[m..].to_vec() }
    }

    pub fn sqnorm(&self) -> f64 {
        self.d_re.iter().chain(&self.d_im).map(|v| v * v).sum()
    }
}

/// A scalar function of the filter taps that the optimizer maximizes.
pub trait TapObjective {
    fn value(&self, phi: &FirFilter) -> Result<f64>;
    fn value_and_gradient(&self, phi: &FirFilter) -> Result<(f64, TapGradient)>;
}

/// `sum_s f_target(apply_fir(x_s, phi))` for a classifier in eval mode.
pub struct ClassifierObjective<'a> {
    pub model: &'a Model,
    pub slice: &'a Slice,
    pub target: usize,
}

impl ClassifierObjective<'_> {
    fn filtered(&self, phi: &FirFilter) -> Result<Vec<Tensor>> {
        let [_, h, w] = self.model.spec().input;
        if h != 2 || w != self.slice.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("I/Q inputs of {w} samples"),
                found: format!("slice inputs of {} samples", self.slice.input_len()),
            });
        }
        Ok(self.slice.inputs.iter().map(|x| Tensor::from_iq(&apply_fir(x, phi))).collect())
    }
}

impl TapObjective for ClassifierObjective<'_> {
    fn value(&self, phi: &FirFilter) -> Result<f64> {
        if self.target == 0 || self.target > self.model.classes() {
            return Err(Error::InvalidLabel { label: self.target, classes: self.model.classes() });
        }
        let probs = self.model.predict(&self.filtered(phi)?)?;
        Ok(probs.iter().map(|p| p.of(self.target)).sum())
    }

    fn value_and_gradient(&self, phi: &FirFilter) -> Result<(f64, TapGradient)> {
        let (values, grads) = self.model.input_gradients(&self.filtered(phi)?, self.target)?;
        let m = phi.len();
        let mut acc = vec![Sample::new(0.0, 0.0); m];
        for (x, g) in self.slice.inputs.iter().zip(&grads) {
            let g = g.to_iq();
            // d/d re_k + j d/d im_k = sum_n G[n] conj(x[n - k]), G = dI + j dQ
            for (k, a) in acc.iter_mut().enumerate() {
                for n in k..x.len() {
                    *a += g[n] * x[n - k].conj();
                }
            }
        }
        Ok((
            values.iter().sum(),
            TapGradient { d_re: acc.iter().map(|c| c.re).collect(), d_im: acc.iter().map(|c| c.im).collect() },
        ))
    }
}

/// Sum of the target's activation over the filtered slice.
pub fn objective(model: &Model, slice: &Slice, phi: &FirFilter, target: usize) -> Result<f64> {
    ClassifierObjective { model, slice, target }.value(phi)
}

pub fn tap_gradient(model: &Model, slice: &Slice, phi: &FirFilter, target: usize) -> Result<TapGradient> {
    Ok(ClassifierObjective { model, slice, target }.value_and_gradient(phi)?.1)
}

/// Conditions that start a new optimization epoch. Either configured
/// condition firing is enough.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochTrigger {
    /// Fire once this many seconds have elapsed since the last epoch.
    pub timer_period_s: Option<f64>,
    /// Fire when the recent per-slice accuracy drops strictly below this.
    pub accuracy_floor: Option<f64>,
}

impl EpochTrigger {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.accuracy_floor {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("accuracy floor {t} must lie in (0, 1)")));
            }
        }
        if let Some(p) = self.timer_period_s {
            if !(p >= 0.0) {
                return Err(Error::Config(format!("timer period {p} must be non-negative")));
            }
        }
        Ok(())
    }
}

pub fn check_trigger(trigger: &EpochTrigger, elapsed_s: f64, recent_psa: Option<f64>) -> bool {
    let timer = trigger.timer_period_s.is_some_and(|p| elapsed_s >= p);
    let floor = match (trigger.accuracy_floor, recent_psa) {
        (Some(t), Some(psa)) => psa < t,
        _ => false,
    };
    timer || floor
}

/// Filter feedback sent from the receiver to a transmitter after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMessage {
    pub device_id: u32,
    pub epoch_index: u32,
    pub m: usize,
    /// `(re, im)` per tap.
    pub taps: Vec<(f64, f64)>,
    pub epsilon: f64,
    pub objective_before: f64,
    pub objective_after: f64,
}

impl FilterMessage {
    pub fn new(device_id: u32, epoch_index: u32, phi: &FirFilter, n_bins: usize, before: f64, after: f64) -> Self {
        FilterMessage {
            device_id,
            epoch_index,
            m: phi.len(),
            taps: phi.taps().iter().map(|t| (t.re, t.im)).collect(),
            epsilon: epsilon_of(phi, n_bins),
            objective_before: before,
            objective_after: after,
        }
    }

    pub fn filter(&self) -> Result<FirFilter> {
        if self.taps.len() != self.m {
            return Err(Error::Corrupt(format!("message declares {} taps but carries {}", self.m, self.taps.len())));
        }
        FirFilter::new(self.taps.iter().map(|&(re, im)| Sample::new(re, im)).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("FilterMessage serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
