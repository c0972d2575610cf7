mod config;
mod report;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use log::{info, warn};
use tilrma_core::harness::{run_trial, TrialConfig, TrialReport};
use tilrma_core::oracle;
use tilrma_core::pipeline::{self, SignalSeparation};
use tilrma_core::wav;

use config::{Check, Cli, Command, OracleArgs, SeparateArgs, SeparateConfig, SyntheticArgs};
use report::{Evaluation, InitSummary, InputInfo, RunResult, RESULT_SCHEMA, RESULT_VERSION};

enum Failure {
    /// Bad arguments or inputs that do not fit together; exit code 2.
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<tilrma_core::Error> for Failure {
    fn from(e: tilrma_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let outcome = match cli.command {
        Command::Separate(args) => separate(args),
        Command::Synthetic(args) => synthetic(args),
        Command::Oracle(args) => oracle_suite(args),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read_reference(path: &Path, channels: usize, ref_channel: usize) -> Result<Vec<f64>, Failure> {
    let mut data = wav::read_wav(path).with_context(|| format!("reading reference {}", path.display()))?;
    match data.num_channels() {
        1 => Ok(data.channels.swap_remove(0)),
        n if n == channels => Ok(data.channels.swap_remove(ref_channel)),
        n => Err(Failure::Usage(format!(
            "reference {} has {n} channels; expected 1 or {channels}",
            path.display()
        ))),
    }
}

fn separate(args: SeparateArgs) -> Result<ExitCode, Failure> {
    let cfg: SeparateConfig = args.validate().map_err(Failure::Usage)?;
    let input = wav::read_wav(&cfg.input).with_context(|| format!("reading {}", cfg.input.display()))?;
    let channels = input.num_channels();
    if cfg.ref_channel >= channels {
        return Err(Failure::Usage(format!("--ref-channel {} but the input has {channels} channels", cfg.ref_channel + 1)));
    }
    if !cfg.refs.is_empty() && cfg.refs.len() != channels {
        return Err(Failure::Usage(format!(
            "{} references given for a {channels}-channel input (one per source)",
            cfg.refs.len()
        )));
    }
    let refs = cfg.refs.iter().map(|p| read_reference(p, channels, cfg.ref_channel)).collect::<Result<Vec<_>, _>>()?;

    let stft = cfg.stft(f64::from(input.sample_rate));
    let (window_samples, shift_samples) = stft.frame_geometry().map_err(|e| Failure::Usage(e.to_string()))?;
    info!("{channels} channels at {} Hz, window {window_samples}, shift {shift_samples}", input.sample_rate);

    let mut first: Option<(SignalSeparation, Option<Evaluation>)> = None;
    let mut inits = Vec::new();
    for k in 0..cfg.inits {
        let hp = tilrma_core::engine::HyperParams { seed: cfg.hyperparams.seed + k, ..cfg.hyperparams.clone() };
        let sep = pipeline::separate_signals(&input.channels, &stft, &hp)
            .with_context(|| format!("separating {} (seed {})", cfg.input.display(), hp.seed))?;
        let evaluation = if refs.is_empty() {
            None
        } else {
            let report = pipeline::evaluate_separation(&refs, &sep, &input.channels, cfg.ref_channel, cfg.taps)
                .context("scoring against the references")?;
            Some(Evaluation {
                taps: cfg.taps,
                ref_channel: cfg.ref_channel + 1,
                references: cfg.refs.clone(),
                mean_sdr_db: report.mean_sdr_db(),
                report,
            })
        };
        inits.push(InitSummary {
            seed: hp.seed,
            final_cost: *sep.result.cost_trace.last().expect("trace holds the initial cost"),
            mean_sdr_db: evaluation.as_ref().map(|e| e.mean_sdr_db),
        });
        if first.is_none() {
            first = Some((sep, evaluation));
        }
    }
    let (sep, evaluation) = first.expect("at least one init");

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut outputs = Vec::new();
    for (n, image) in sep.images.iter().enumerate() {
        let path = cfg.out.join(format!("source_{}.wav", n + 1));
        let clipped = wav::write_wav(&path, image, input.sample_rate, input.format)?;
        if clipped > 0 {
            warn!("{} samples clipped in {}", clipped, path.display());
        }
        outputs.push(path);
    }

    let result = RunResult {
        schema: RESULT_SCHEMA.into(),
        version: RESULT_VERSION,
        input: InputInfo {
            path: cfg.input.clone(),
            sample_rate: input.sample_rate,
            channels,
            samples: input.len(),
        },
        stft,
        window_samples,
        shift_samples,
        seed: cfg.hyperparams.seed,
        hyperparams: cfg.hyperparams.clone(),
        outputs,
        cost_trace: sep.result.cost_trace.clone(),
        stages: sep.result.stages.clone(),
        events: sep.result.events.clone(),
        timings: sep.timings,
        evaluation,
        inits: (cfg.inits > 1).then_some(inits.clone()),
    };
    let path = cfg.out.join("result.json");
    let text = serde_json::to_string_pretty(&result).context("serializing the result")?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;

    let trace = &result.cost_trace;
    println!(
        "separated {channels} sources into {} (cost {:.6e} -> {:.6e})",
        cfg.out.display(),
        trace[0],
        trace[trace.len() - 1]
    );
    if let Some(ev) = &result.evaluation {
        println!("SDR at channel {}: {:?} dB (mean {:.2} dB)", ev.ref_channel, ev.report.sdr_db, ev.mean_sdr_db);
    }
    if cfg.inits > 1 {
        let sdrs: Vec<f64> = inits.iter().filter_map(|i| i.mean_sdr_db).collect();
        if !sdrs.is_empty() {
            println!("mean SDR over {} inits: {:.2} dB", sdrs.len(), sdrs.iter().sum::<f64>() / sdrs.len() as f64);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn check_passes(check: Check, report: &TrialReport) -> bool {
    match check {
        Check::Monotonic => report.monotone(),
        Check::Ip => report.max_ip_residual <= 1e-10,
        Check::Separation => report.sdr_improvement_db.is_some_and(|d| d > 0.0),
        Check::None => true,
    }
}

fn synthetic(args: SyntheticArgs) -> Result<ExitCode, Failure> {
    let mut hp = args.model.hyperparams().map_err(Failure::Usage)?;
    if args.model.bases.is_none() {
        hp.rank = args.true_rank;
    }
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let cfg = TrialConfig {
        sources: args.sources,
        bins: args.bins,
        frames: args.frames,
        true_rank: args.true_rank,
        mixing: args.mixing.into(),
        hyperparams: hp.clone(),
        evaluate_channel: (args.check == Check::Separation).then_some(0),
        head_residual: false,
    };
    let mut reports = Vec::new();
    let mut passed = 0;
    for seed in hp.seed..hp.seed + args.seeds {
        let r = run_trial(&cfg, seed).with_context(|| format!("synthetic scene {seed}"))?;
        let ok = check_passes(args.check, &r);
        passed += usize::from(ok);
        let trace = &r.cost_trace;
        print!(
            "seed {seed}: cost {:.6e} -> {:.6e}, monotone {}, max IP residual {:.1e}",
            trace[0],
            trace[trace.len() - 1],
            if r.monotone() { "yes" } else { "no" },
            r.max_ip_residual
        );
        if let Some(d) = r.sdr_improvement_db {
            print!(", SI-SDR improvement {d:.2} dB");
        }
        println!(" [{}]", if ok { "pass" } else { "FAIL" });
        reports.push(r);
    }
    let label = format!("{:?}", args.check).to_lowercase();
    println!("{label}: {passed}/{} passed", args.seeds);
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&reports).context("serializing reports")?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if passed as u64 == args.seeds { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn oracle_suite(args: OracleArgs) -> Result<ExitCode, Failure> {
    if args.samples == 0 || args.states == 0 {
        return Err(Failure::Usage("--samples and --states must be at least 1".into()));
    }
    let tangent = oracle::fuzz_tangent(args.samples, args.seed);
    let jensen = oracle::fuzz_jensen(args.samples, args.seed.wrapping_add(1));
    let suite = oracle::run_majorizer_suite(args.states, args.seed.wrapping_add(2))?;
    let status = |ok: bool| if ok { "pass" } else { "FAIL" };
    println!(
        "tangent: {} samples, {} violations, {} equality failures, max excess {:.1e} [{}]",
        tangent.samples,
        tangent.violations,
        tangent.equality_failures,
        tangent.max_excess,
        status(tangent.passed())
    );
    println!(
        "jensen: {} samples, {} violations, {} equality failures, max excess {:.1e} [{}]",
        jensen.samples,
        jensen.violations,
        jensen.equality_failures,
        jensen.max_excess,
        status(jensen.passed())
    );
    println!(
        "majorizer: {} states, {} failures, max touch gap {:.1e} [{}]",
        suite.states,
        suite.failures,
        suite.max_touch,
        status(suite.passed())
    );
    let ok = tangent.passed() && jensen.passed() && suite.passed();
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
