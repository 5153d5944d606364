//! `radiofp` command-line driver.
//!
//! Every command works inside one experiment directory (see
//! [`radiofp::harness::ExperimentDir`]). Parameters come from a TOML config
//! (`--config`, else `<dir>/config.toml`, else built-in defaults) and can be
//! overridden with flags or `--set key=value`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 failure while
//! running an experiment.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use radiofp::harness::{
    calibrate_noise_std, compute_pba, confusion_counts, emit_adversary_csv, emit_confusion_csv, emit_link_csv,
    emit_report, generate_dataset, link_epsilon_sweep, metrics_rows, one_sided_paired_t, read_report_csv,
    run_adversary, run_fingerprint_pipeline, slice_batch, train_model, Alternative, CaptureEpoch, ExperimentConfig,
    ExperimentDir, ReportRow,
};
use radiofp::iqcore::FirFilter;

#[derive(Parser)]
#[command(name = "radiofp", version, about = "Radio fingerprinting simulator with transmitter FIR optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and evaluation captures for every device.
    Simulate {
        #[command(flatten)]
        run: Seeded,
        /// Number of evaluation captures (streams 0..N).
        #[arg(long, default_value_t = 1)]
        streams: u64,
    },
    /// Train the classifier on the training captures.
    Train {
        #[command(flatten)]
        run: Seeded,
    },
    /// Run one filter epoch per device on an evaluation capture.
    Optimize {
        #[command(flatten)]
        run: Seeded,
        #[arg(long, default_value_t = 0)]
        stream: u64,
        /// Only this device (1-based); all devices by default.
        #[arg(long)]
        device: Option<u32>,
        /// Start from the identity instead of the device's latest filter.
        #[arg(long)]
        fresh: bool,
    },
    /// Batch accuracy with and without each device's latest filter.
    Evaluate {
        #[command(flatten)]
        run: Seeded,
        #[arg(long, default_value_t = 0)]
        stream: u64,
    },
    /// Classify an adversary transmitting with a victim's latest filter.
    Adversary {
        #[command(flatten)]
        run: Seeded,
        #[arg(long, default_value_t = 0)]
        stream: u64,
        #[arg(long)]
        adversary: u32,
        /// Victim device; every other device by default.
        #[arg(long)]
        victim: Option<u32>,
    },
    /// Summarize optimize runs and optionally run the link-level sweep.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Calibrate the noise level and sweep the filter size on the link.
        #[arg(long)]
        link_sweep: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment directory.
    #[arg(long, short)]
    dir: PathBuf,
    /// Config file; defaults to `<dir>/config.toml` when it exists.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set ncg.t_max=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    devices: Option<usize>,
    /// FIR taps M.
    #[arg(long)]
    taps: Option<usize>,
    /// Optimizer iterations per epoch.
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    eps_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct Seeded {
    #[command(flatten)]
    common: Common,
    /// Base seed for every random draw.
    #[arg(long)]
    seed: u64,
}

/// Bad flags or config values; maps to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| usage(format!("empty key in `{key}`")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| usage(format!("`{p}` in `{key}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Common {
    fn load(&self, seed: Option<u64>) -> Result<(ExperimentDir, ExperimentConfig)> {
        let dir = ExperimentDir::create(&self.dir).with_context(|| format!("opening {}", self.dir.display()))?;
        let path = self.config.clone().or_else(|| Some(dir.config_path()).filter(|p| p.exists()));
        let text = match &path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("reading {}: {e}", p.display())))?,
            None => ExperimentConfig::default().to_toml(),
        };
        let mut table: toml::Table = text.parse().map_err(|e| usage(format!("config is not valid TOML: {e}")))?;

        let mut overrides: Vec<(String, toml::Value)> = Vec::new();
        if let Some(s) = seed {
            overrides.push(("seed".into(), toml::Value::Integer(as_toml_int(s)?)));
        }
        let named = [
            ("devices", self.devices),
            ("ncg.num_taps", self.taps),
            ("ncg.t_max", self.t_max),
            ("training.epochs", self.epochs),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                overrides.push((k.into(), toml::Value::Integer(as_toml_int(v as u64)?)));
            }
        }
        if let Some(e) = self.eps_max {
            overrides.push(("ncg.eps_max".into(), toml::Value::Float(e)));
        }
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            overrides.push((k.trim().into(), parse_value(v.trim())));
        }
        for (k, v) in overrides {
            set_path(&mut table, &k, v)?;
        }
        let cfg = ExperimentConfig::from_toml(&toml::to_string(&table)?)?;
        Ok((dir, cfg))
    }
}

fn as_toml_int(v: u64) -> Result<i64> {
    i64::try_from(v).map_err(|_| usage(format!("{v} does not fit a TOML integer")))
}

fn check_device(cfg: &ExperimentConfig, d: u32) -> Result<()> {
    if d == 0 || d as usize > cfg.devices {
        return Err(usage(format!("device {d} is outside 1..={}", cfg.devices)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { run, streams } => {
            let (dir, cfg) = run.common.load(Some(run.seed))?;
            dir.save_config(&cfg)?;
            let train = generate_dataset(&cfg, CaptureEpoch::Train, 0)?;
            dir.save_recordings(&cfg, 0, &train)?;
            for s in 0..streams {
                dir.save_recordings(&cfg, s, &generate_dataset(&cfg, CaptureEpoch::Eval, s)?)?;
            }
            println!("wrote {} devices, 1 training and {streams} evaluation captures to {}", cfg.devices, dir.root().display());
        }
        Command::Train { run } => {
            let (dir, cfg) = run.common.load(Some(run.seed))?;
            let train = dir.load_recordings(&cfg, CaptureEpoch::Train, 0).context("loading training captures")?;
            let (model, report) = train_model(&cfg, &train)?;
            dir.save_model(&model)?;
            dir.save_config(&cfg)?;
            let rows: Vec<ReportRow> = report
                .loss_curve
                .iter()
                .enumerate()
                .map(|(i, l)| ReportRow::new(&cfg.name, 0, cfg.seed, format!("loss_epoch_{i}"), *l))
                .collect();
            emit_report(&dir.path("train.csv"), &rows)?;
            println!("trained {} parameters, final loss {:.4}", model.num_params(), report.loss_curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Optimize { run, stream, device, fresh } => {
            let (dir, cfg) = run.common.load(Some(run.seed))?;
            if let Some(d) = device {
                check_device(&cfg, d)?;
            }
            let model = dir.load_model()?;
            let recordings = dir.load_recordings(&cfg, CaptureEpoch::Eval, stream)?;
            let mut reports = Vec::new();
            for r in recordings.iter().filter(|r| device.map_or(true, |d| d == r.device_id)) {
                let latest = if fresh { None } else { dir.latest_filter(r.device_id)? };
                let epoch = latest.as_ref().map_or(0, |(e, _)| e + 1);
                let warm = latest.as_ref().map(|(_, f)| f);
                let m = run_fingerprint_pipeline(&cfg, r, &model, warm, epoch, stream)?;
                dir.save_filter(&m.message)?;
                emit_confusion_csv(&dir.path(&format!("confusion-s{stream}-d{}.csv", r.device_id)), &m.confusion_after)?;
                println!(
                    "device {} epoch {epoch}: PSA {:.2} -> {:.2}, PBA {:.2} -> {:.2}, eps {:.3}",
                    r.device_id, m.psa_before[0], m.psa_after[0], m.pba_before, m.pba_after, m.message.epsilon
                );
                reports.push(m);
            }
            emit_report(&dir.next_numbered(&format!("optimize-s{stream}")), &metrics_rows(&cfg.name, &reports))?;
        }
        Command::Evaluate { run, stream } => {
            let (dir, cfg) = run.common.load(Some(run.seed))?;
            let model = dir.load_model()?;
            let recordings = dir.load_recordings(&cfg, CaptureEpoch::Eval, stream)?;
            let mut rows = Vec::new();
            let mut confusion = vec![vec![0u64; cfg.devices]; cfg.devices];
            for r in &recordings {
                let batch = slice_batch(r, cfg.slice_size, cfg.batch_slices)?;
                let d = r.device_id;
                let phi = dir.latest_filter(d)?.map(|(_, f)| f).unwrap_or_else(|| FirFilter::identity(cfg.ncg.num_taps));
                let plain = compute_pba(&model, &batch, &FirFilter::identity(cfg.ncg.num_taps), d as usize)?;
                let filtered = compute_pba(&model, &batch, &phi, d as usize)?;
                for (row, add) in confusion.iter_mut().zip(confusion_counts(&model, &batch, &phi, d as usize)?) {
                    row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
                }
                rows.push(ReportRow::new(&cfg.name, d, stream, "pba_unfiltered", plain));
                rows.push(ReportRow::new(&cfg.name, d, stream, "pba_filtered", filtered));
                println!("device {d}: PBA {plain:.2} unfiltered, {filtered:.2} with latest filter");
            }
            emit_report(&dir.path(&format!("evaluate-s{stream}.csv")), &rows)?;
            emit_confusion_csv(&dir.path(&format!("confusion-s{stream}.csv")), &confusion)?;
        }
        Command::Adversary { run, stream, adversary, victim } => {
            let (dir, cfg) = run.common.load(Some(run.seed))?;
            check_device(&cfg, adversary)?;
            let victims: Vec<u32> = match victim {
                Some(v) => {
                    check_device(&cfg, v)?;
                    vec![v]
                }
                None => (1..=cfg.devices as u32).filter(|&v| v != adversary).collect(),
            };
            let model = dir.load_model()?;
            let recordings = dir.load_recordings(&cfg, CaptureEpoch::Eval, stream)?;
            let adv = &recordings[adversary as usize - 1];
            let mut reports = Vec::new();
            for v in victims {
                let Some((_, phi)) = dir.latest_filter(v)? else {
                    return Err(usage(format!("device {v} has no filter yet; run `optimize` first")));
                };
                let r = run_adversary(&cfg, adv, v, &phi, &model, stream)?;
                println!(
                    "adversary {adversary} as victim {v}: {:.2} -> {:.2}",
                    r.pba_victim_before(),
                    r.pba_victim_after()
                );
                reports.push(r);
            }
            emit_adversary_csv(&dir.path(&format!("adversary-s{stream}-a{adversary}.csv")), &reports)?;
        }
        Command::Report { common, seed, link_sweep } => {
            let (dir, cfg) = common.load(seed)?;
            let mut before = Vec::new();
            let mut after = Vec::new();
            for entry in std::fs::read_dir(dir.root())? {
                let path = entry?.path();
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if !(name.starts_with("optimize-") && name.ends_with(".csv")) {
                    continue;
                }
                for row in read_report_csv(&path)? {
                    match row.metric.as_str() {
                        "psa_before_0" => before.push(row.value),
                        "psa_after_0" => after.push(row.value),
                        _ => {}
                    }
                }
            }
            let mut rows = Vec::new();
            if !before.is_empty() && before.len() == after.len() {
                let n = before.len() as f64;
                rows.push(ReportRow::new(&cfg.name, 0, cfg.seed, "psa_before_mean", before.iter().sum::<f64>() / n));
                rows.push(ReportRow::new(&cfg.name, 0, cfg.seed, "psa_after_mean", after.iter().sum::<f64>() / n));
                if before.len() > 1 {
                    let t = one_sided_paired_t(&before, &after, 0.0, Alternative::Greater)?;
                    rows.push(ReportRow::new(&cfg.name, 0, cfg.seed, "psa_gain_p_value", t.p_value));
                    println!("{} epochs: mean PSA gain {:.3}, one-sided p = {:.3e}", before.len(), t.mean, t.p_value);
                }
            } else {
                println!("no optimize results in {}", dir.root().display());
            }
            emit_report(&dir.path("summary.csv"), &rows)?;
            if link_sweep {
                let noise = calibrate_noise_std(&cfg.ofdm, &cfg.link, cfg.seed)?;
                let points = link_epsilon_sweep(&cfg.ofdm, &cfg.link, noise, cfg.seed)?;
                for p in &points {
                    println!("eps {:.2}: PER {:.4}, throughput {:.2} kbit/s", p.epsilon, p.report.per, p.report.throughput_kbps);
                }
                emit_link_csv(&dir.path("link.csv"), &points)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<radiofp::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
