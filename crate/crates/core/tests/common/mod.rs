//! Strategies and property bodies shared by the proptest suite and the
//! acceptance run.

#![allow(dead_code)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radiofp::cnn::{LayerSpec, Mode, Model, ModelSpec, Tensor};
use radiofp::harness::{compute_pba, compute_psa, generate_recordings, CaptureEpoch, DeviceRegistry, ExperimentConfig};
use radiofp::iqcore::{apply_fir, dft, epsilon_of, frequency_response, idft, FirFilter, IqFrame, Sample, SpectrumFrame};
use radiofp::wop::{project_to_epsilon_ball, Batch, Slice};

pub fn sample() -> impl Strategy<Value = Sample> {
    (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(re, im)| Sample::new(re, im))
}

pub fn samples(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<Sample>> {
    prop::collection::vec(sample(), len)
}

pub fn frame(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = IqFrame> {
    samples(len).prop_map(|s| IqFrame::new(s).unwrap())
}

pub fn filter(taps: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = FirFilter> {
    samples(taps).prop_map(|t| FirFilter::new(t).unwrap())
}

pub fn close(a: Sample, b: Sample, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + a.norm().max(b.norm()))
}

/// Small classifier with randomized biases, so no unit sits exactly on a
/// ReLU kink.
pub fn small_model(seed: u64, n: usize, classes: usize) -> Model {
    use LayerSpec::*;
    let spec = ModelSpec {
        input: [1, 2, n],
        classes,
        layers: vec![
            Conv { filters: 4, kh: 1, kw: 3 },
            Relu,
            MaxPool { ph: 2, pw: 2 },
            Conv { filters: 3, kh: 2, kw: 3 },
            Relu,
            Dense { units: 8 },
            Relu,
            Dense { units: classes },
        ],
    };
    let mut model = Model::new(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.params_mut() {
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    model
}

pub fn random_frame(rng: &mut impl Rng, n: usize) -> IqFrame {
    IqFrame::new((0..n).map(|_| Sample::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

pub fn softmax_normalized(seed: u64, x: IqFrame) -> Result<(), TestCaseError> {
    let model = small_model(seed, x.len(), 4);
    let p = model.forward(&Tensor::from_iq(&x), Mode::Eval).unwrap();
    let sum: f64 = p.probs.iter().sum();
    prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
    prop_assert!(p.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    Ok(())
}

pub fn fir_linearity(x: Vec<Sample>, y: Vec<Sample>, phi: FirFilter, a: Sample, b: Sample) -> Result<(), TestCaseError> {
    let n = x.len().min(y.len());
    let (x, y) = (IqFrame::new(x[..n].to_vec()).unwrap(), IqFrame::new(y[..n].to_vec()).unwrap());
    let mix = IqFrame::new(x.iter().zip(y.iter()).map(|(p, q)| a * p + b * q).collect()).unwrap();
    let lhs = apply_fir(&mix, &phi);
    let (fx, fy) = (apply_fir(&x, &phi), apply_fir(&y, &phi));
    for i in 0..n {
        prop_assert!(close(lhs[i], a * fx[i] + b * fy[i], 1e-12));
    }
    Ok(())
}

pub fn fir_identity(x: IqFrame, m: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(apply_fir(&x, &FirFilter::identity(m)), x);
    Ok(())
}

pub fn fir_composition(x: IqFrame, f: FirFilter, g: FirFilter) -> Result<(), TestCaseError> {
    let twice = apply_fir(&apply_fir(&x, &f), &g);
    let once = apply_fir(&x, &f.convolve(&g));
    for (a, b) in twice.iter().zip(once.iter()) {
        prop_assert!(close(*a, *b, 1e-12));
    }
    Ok(())
}

pub fn convolution_theorem(f: FirFilter, g: FirFilter) -> Result<(), TestCaseError> {
    let n = 64;
    let (rf, rg) = (frequency_response(&f, n).unwrap(), frequency_response(&g, n).unwrap());
    let rfg = frequency_response(&f.convolve(&g), n).unwrap();
    for k in 0..n {
        prop_assert!(close(rfg.bins[k], rf.bins[k] * rg.bins[k], 1e-11));
    }
    Ok(())
}

pub fn epsilon_zero_extension(phi: FirFilter, extra: usize) -> Result<(), TestCaseError> {
    let longer = phi.zero_extended(phi.len() + extra);
    prop_assert!((epsilon_of(&phi, 64) - epsilon_of(&longer, 64)).abs() <= 1e-12);
    prop_assert_eq!(apply_fir(&IqFrame::new(phi.taps().to_vec()).unwrap(), &longer), apply_fir(&IqFrame::new(phi.taps().to_vec()).unwrap(), &phi));
    Ok(())
}

pub fn dft_roundtrip(x: IqFrame) -> Result<(), TestCaseError> {
    let back = idft(&dft(&x)).unwrap();
    for (a, b) in back.iter().zip(x.iter()) {
        prop_assert!(close(*a, *b, 1e-12));
    }
    let spec = SpectrumFrame { bins: x.as_slice().to_vec() };
    let again = dft(&idft(&spec).unwrap());
    for (a, b) in again.bins.iter().zip(spec.bins.iter()) {
        prop_assert!(close(*a, *b, 1e-12));
    }
    Ok(())
}

pub fn projection_bound(phi: FirFilter, eps_max: f64) -> Result<(), TestCaseError> {
    let (p, active) = project_to_epsilon_ball(&phi, eps_max, 64);
    prop_assert!(epsilon_of(&p, 64) <= eps_max);
    prop_assert_eq!(p.len(), phi.len());
    if epsilon_of(&phi, 64) <= eps_max {
        prop_assert!(!active);
        prop_assert_eq!(p, phi);
    }
    Ok(())
}

pub fn pba_is_mean_psa(seed: u64, slices: usize, per_slice: usize, phi: FirFilter) -> Result<(), TestCaseError> {
    let n = 24;
    let model = small_model(seed, n, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = Batch::new(
        (0..slices).map(|_| Slice::new((0..per_slice).map(|_| random_frame(&mut rng, n)).collect()).unwrap()).collect(),
    )
    .unwrap();
    for device in 1..=3 {
        let psas: Vec<f64> = batch.slices().iter().map(|s| compute_psa(&model, s, &phi, device).unwrap()).collect();
        let mean = psas.iter().sum::<f64>() / psas.len() as f64;
        prop_assert!((compute_pba(&model, &batch, &phi, device).unwrap() - mean).abs() <= 1e-12);
    }
    Ok(())
}

pub fn determinism(seed: u64) -> Result<(), TestCaseError> {
    let cfg = ExperimentConfig { seed, devices: 2, ..Default::default() };
    let reg = DeviceRegistry::from_config(&cfg);
    for epoch in [CaptureEpoch::Train, CaptureEpoch::Eval] {
        let a = generate_recordings(&cfg, &reg, 2, epoch, seed, 3).unwrap();
        let b = generate_recordings(&cfg, &reg, 2, epoch, seed, 3).unwrap();
        prop_assert_eq!(a, b);
    }
    let m1 = small_model(seed, 16, 2);
    let m2 = small_model(seed, 16, 2);
    prop_assert_eq!(m1.to_bytes(), m2.to_bytes());
    Ok(())
}
