use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cnn::{accuracy, LayerParams, LayerSpec, Model, Tensor};
use crate::iqcore::{apply_fir, epsilon_of, FirFilter, IqFrame, Sample};
use crate::wop::Slice;

fn small_spec(classes: usize, n: usize) -> ModelSpec {
    use LayerSpec::*;
    ModelSpec {
        input: [1, 2, n],
        classes,
        layers: vec![
            Conv { filters: 8, kh: 1, kw: 7 },
            Relu,
            MaxPool { ph: 2, pw: 2 },
            Dense { units: 32 },
            Relu,
            Dense { units: classes },
        ],
    }
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "unit".into(),
        seed: 11,
        devices: 4,
        slice_size: 5,
        batch_slices: 4,
        train_examples_per_device: 150,
        eval_examples_per_device: 20,
        pipeline_link_frames: 20,
        ..Default::default()
    };
    cfg.model = Some(small_spec(cfg.devices, cfg.example_len()));
    cfg.training.learning_rate = 3e-4;
    cfg.training.epochs = 8;
    cfg.ncg.t_max = 4;
    cfg
}

struct Fixture {
    cfg: ExperimentConfig,
    model: Model,
    eval: Vec<Recording>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let train = generate_dataset(&cfg, CaptureEpoch::Train, 0).unwrap();
        let (model, _) = train_model(&cfg, &train).unwrap();
        let eval = generate_dataset(&cfg, CaptureEpoch::Eval, 0).unwrap();
        Fixture { cfg, model, eval }
    })
}

/// Two-class dense model whose prediction is class 1 iff the first I
/// sample is positive.
fn sign_model(n: usize) -> Model {
    let spec = ModelSpec { input: [1, 2, n], classes: 2, layers: vec![LayerSpec::Dense { units: 2 }] };
    let mut w = vec![0.0; 2 * 2 * n];
    w[0] = 1.0;
    w[2 * n] = -1.0;
    Model::from_params(spec, vec![LayerParams { weights: w, bias: vec![0.0; 2] }]).unwrap()
}

fn frame_starting_with(first: f64, n: usize) -> IqFrame {
    let mut s = vec![Sample::new(0.0, 0.0); n];
    s[0] = Sample::new(first, 0.0);
    IqFrame::new(s).unwrap()
}

#[test]
fn config_toml_roundtrip() {
    let cfg = small_config();
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let partial = ExperimentConfig::from_toml("seed = 9\ndevices = 3\n").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.model_spec().classes, 3);
    // a partial table keeps the experiment defaults for the fields it omits
    let partial = ExperimentConfig::from_toml("[ncg]\nt_max = 3\n").unwrap();
    assert_eq!(partial.ncg.t_max, 3);
    assert_eq!(partial.ncg.eps_max, ExperimentConfig::default().ncg.eps_max);
}

#[test]
fn config_validation_rejects_bad_values() {
    for bad in [
        ExperimentConfig { devices: 1, ..Default::default() },
        ExperimentConfig { slice_size: 0, ..Default::default() },
        ExperimentConfig { eval_examples_per_device: 10, ..Default::default() },
        ExperimentConfig { cfo_shift: -1.0, ..Default::default() },
        ExperimentConfig { model: Some(small_spec(3, 288)), ..Default::default() },
    ] {
        let err = bad.validate().unwrap_err();
        assert!(err.is_validation(), "{err}");
    }
    assert!(ExperimentConfig::from_toml("devices = \"five\"").is_err());
}

#[test]
fn datasets_are_reproducible_and_streams_differ() {
    let cfg = ExperimentConfig { eval_examples_per_device: 60, ..small_config() };
    let a = generate_dataset(&cfg, CaptureEpoch::Eval, 3).unwrap();
    let b = generate_dataset(&cfg, CaptureEpoch::Eval, 3).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&cfg, CaptureEpoch::Eval, 4).unwrap();
    assert_ne!(a[0].examples, c[0].examples);
    assert_ne!(a[0].channel, c[0].channel);
    assert_eq!(a.len(), cfg.devices);
    assert!(a.iter().all(|r| r.examples.len() == 60 && r.examples[0].len() == cfg.example_len()));
}

#[test]
fn train_capture_does_not_depend_on_stream() {
    let cfg = ExperimentConfig { train_examples_per_device: 5, ..small_config() };
    let reg = DeviceRegistry::from_config(&cfg);
    let a = generate_recordings(&cfg, &reg, 2, CaptureEpoch::Train, 0, 5).unwrap();
    let b = generate_recordings(&cfg, &reg, 2, CaptureEpoch::Train, 7, 5).unwrap();
    assert_eq!(a.channel, b.channel);
    assert_eq!(a.profile, b.profile);
}

#[test]
fn eval_capture_shifts_cfo_within_bounds() {
    let cfg = small_config();
    let reg = DeviceRegistry::from_config(&cfg);
    for d in 1..=cfg.devices as u32 {
        let r = generate_recordings(&cfg, &reg, d, CaptureEpoch::Eval, 2, 1).unwrap();
        let shift = (r.profile.cfo - reg.get(d).unwrap().cfo).abs();
        assert!(shift >= 0.5 * cfg.cfo_shift - 1e-15 && shift <= cfg.cfo_shift + 1e-15, "{shift}");
    }
}

#[test]
fn payloads_are_shared_across_devices() {
    let cfg = small_config();
    assert_eq!(payload_bits(&cfg, 3), payload_bits(&cfg, 3));
    assert_ne!(payload_bits(&cfg, 3), payload_bits(&cfg, 4));
    assert_eq!(payload_bits(&cfg, 3).len(), cfg.ofdm.bits_per_example());
}

#[test]
fn psa_counts_correct_predictions() {
    let n = 8;
    let model = sign_model(n);
    let slice = Slice::new(vec![
        frame_starting_with(1.0, n),
        frame_starting_with(2.0, n),
        frame_starting_with(-1.0, n),
        frame_starting_with(0.5, n),
    ])
    .unwrap();
    let id = FirFilter::identity(3);
    assert_eq!(compute_psa(&model, &slice, &id, 1).unwrap(), 0.75);
    assert_eq!(compute_psa(&model, &slice, &id, 2).unwrap(), 0.25);
    // a sign flip at the transmitter swaps the outcome
    let flip = FirFilter::new(vec![Sample::new(-1.0, 0.0)]).unwrap();
    assert_eq!(compute_psa(&model, &slice, &flip, 1).unwrap(), 0.25);
    assert!(compute_psa(&model, &slice, &id, 3).unwrap_err().is_validation());
}

#[test]
fn pba_is_mean_of_psa_and_confusion_sums_to_batch() {
    let n = 8;
    let model = sign_model(n);
    let firsts = [1.0, 1.0, -1.0, 1.0, -1.0, -1.0];
    let slices: Vec<Slice> = firsts
        .chunks(2)
        .map(|c| Slice::new(c.iter().map(|&v| frame_starting_with(v, n)).collect()).unwrap())
        .collect();
    let batch = crate::wop::Batch::new(slices).unwrap();
    let id = FirFilter::identity(1);
    let pba = compute_pba(&model, &batch, &id, 1).unwrap();
    assert!((pba - (1.0 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
    let counts = confusion_counts(&model, &batch, &id, 1).unwrap();
    assert_eq!(counts, vec![vec![3, 3], vec![0, 0]]);
}

#[test]
fn slice_batch_takes_leading_runs() {
    let f = fixture();
    let batch = slice_batch(&f.eval[0], 5, 4).unwrap();
    assert_eq!(batch.len(), 4);
    assert_eq!(batch.slices()[1].inputs()[0], f.eval[0].examples[5]);
    assert!(slice_batch(&f.eval[0], 7, 4).unwrap_err().is_validation());
}

#[test]
fn neutral_devices_are_indistinguishable() {
    let cfg = ExperimentConfig { neutral_devices: true, ..small_config() };
    let train = generate_dataset(&cfg, CaptureEpoch::Train, 0).unwrap();
    let (model, _) = train_model(&cfg, &train).unwrap();
    let eval = generate_dataset(&cfg, CaptureEpoch::Eval, 5).unwrap();
    let acc = accuracy(&model, &to_dataset(&eval)).unwrap();
    let chance = 1.0 / cfg.devices as f64;
    assert!(acc < chance + 0.2, "accuracy {acc} vs chance {chance}");
}

#[test]
fn classifier_sees_filtered_uncompensated_input() {
    let f = fixture();
    let slice = slice_batch(&f.eval[1], 5, 1).unwrap().slices()[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let phi = random_filter_with_epsilon(10, 0.2, 64, &mut rng);
    let direct: Vec<Tensor> = slice.inputs().iter().map(|x| Tensor::from_iq(&apply_fir(x, &phi))).collect();
    let preds = f.model.predict(&direct).unwrap();
    let expected = preds.iter().filter(|p| p.argmax() == 2).count() as f64 / 5.0;
    assert_eq!(compute_psa(&f.model, &slice, &phi, 2).unwrap(), expected);
}

#[test]
fn random_filter_hits_requested_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for eps in [0.05, 0.2, 0.5] {
        let phi = random_filter_with_epsilon(10, eps, 64, &mut rng);
        assert!((epsilon_of(&phi, 64) - eps).abs() < 1e-12);
    }
}

#[test]
fn identity_pipeline_with_no_steps_keeps_accuracy() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.ncg.t_max = 0;
    let r = run_fingerprint_pipeline(&cfg, &f.eval[0], &f.model, None, 0, 0).unwrap();
    assert_eq!(r.psa_before, r.psa_after);
    assert!(r.filter().unwrap().is_identity());
    assert_eq!(r.link_unfiltered, r.link_compensated);
}

#[test]
fn pipeline_does_not_lower_objective_and_respects_bound() {
    let f = fixture();
    let r = run_fingerprint_pipeline(&f.cfg, &f.eval[2], &f.model, None, 0, 0).unwrap();
    assert!(r.message.objective_after >= r.message.objective_before);
    assert!(r.message.epsilon <= f.cfg.ncg.eps_max.unwrap() + 1e-9);
    assert_eq!(r.psa_before.len(), f.cfg.batch_slices);
    let c: u64 = r.confusion_after.iter().flatten().sum();
    assert_eq!(c as usize, f.cfg.slice_size * f.cfg.batch_slices);
    let link = r.link_compensated.unwrap();
    assert_eq!(link.frames, f.cfg.pipeline_link_frames);
}

#[test]
fn adversary_equal_to_victim_reproduces_pipeline() {
    let f = fixture();
    let r = run_fingerprint_pipeline(&f.cfg, &f.eval[3], &f.model, None, 0, 0).unwrap();
    let phi = r.filter().unwrap();
    let adv = run_adversary(&f.cfg, &f.eval[3], 4, &phi, &f.model, 0).unwrap();
    assert_eq!(adv.as_victim_before, r.psa_before);
    assert_eq!(adv.as_victim_after, r.psa_after);
    assert_eq!(adv.as_self_after, r.psa_after);
    let other = run_adversary(&f.cfg, &f.eval[0], 4, &phi, &f.model, 0).unwrap();
    assert_eq!(other.as_victim_before.len(), f.cfg.batch_slices);
    assert!(run_adversary(&f.cfg, &f.eval[0], 9, &phi, &f.model, 0).is_err());
}

#[test]
fn report_csv_roundtrip_and_empty_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    emit_report(&path, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), "experiment,device,seed,metric,value");
    assert!(read_report_csv(&path).unwrap().is_empty());
    let rows = vec![
        ReportRow::new("e", 1, 2, "psa_before_0", 0.25),
        ReportRow::new("e", 3, 4, "pba_after", 1.0 / 3.0),
    ];
    emit_report(&path, &rows).unwrap();
    assert_eq!(read_report_csv(&path).unwrap(), rows);
}

#[test]
fn confusion_csv_is_dense() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    emit_confusion_csv(&path, &[vec![3, 1], vec![0, 4]]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "true,pred_1,pred_2\n1,3,1\n2,0,4\n");
    assert!(emit_confusion_csv(&path, &[vec![1], vec![1, 2]]).is_err());
}

#[test]
fn experiment_dir_persists_everything() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let exp = ExperimentDir::create(dir.path().join("x")).unwrap();
    exp.save_config(&f.cfg).unwrap();
    assert_eq!(exp.load_config().unwrap(), f.cfg);
    assert!(exp.load_model().unwrap_err().is_validation());
    exp.save_model(&f.model).unwrap();
    assert_eq!(exp.load_model().unwrap().params(), f.model.params());
    exp.save_recordings(&f.cfg, 0, &f.eval).unwrap();
    let loaded = exp.load_recordings(&f.cfg, CaptureEpoch::Eval, 0).unwrap();
    for (a, b) in loaded.iter().zip(&f.eval) {
        assert_eq!((a.device_id, a.channel_seed, &a.channel, &a.profile), (b.device_id, b.channel_seed, &b.channel, &b.profile));
        assert_eq!(a.examples.len(), b.examples.len());
        // samples are stored as f32
        for (x, y) in a.examples.iter().zip(&b.examples) {
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((p - q).norm() <= 1e-6 * (1.0 + q.norm()));
            }
        }
    }
    let other = ExperimentConfig { seed: 12, ..f.cfg.clone() };
    assert!(exp.load_recordings(&other, CaptureEpoch::Eval, 0).is_err());

    assert!(exp.latest_filter(1).unwrap().is_none());
    let phi = FirFilter::new(vec![Sample::new(0.9, 0.1), Sample::new(0.05, 0.0)]).unwrap();
    for e in [0, 2, 1] {
        exp.save_filter(&crate::wop::FilterMessage::new(1, e, &phi, 64, 0.0, 1.0)).unwrap();
    }
    let (e, got) = exp.latest_filter(1).unwrap().unwrap();
    assert_eq!(e, 2);
    assert_eq!(got, phi);
}
