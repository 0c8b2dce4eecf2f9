//! `trajdiff`: preprocess AIS data, train, sample, evaluate and plot.
//!
//! Exit codes: 0 on success, 1 on an internal failure, 2 on a usage or
//! input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajdiff::ais::Split;
use trajdiff::archive::{preprocess, WindowArchive};
use trajdiff::evaluation::{comparison_csv, horizons_from_hours, report, MetricReport};
use trajdiff::model::Batcher;
use trajdiff::plot::{error_curve, report_curve, step_panels, Style};
use trajdiff::trace::SampleTrace;
use trajdiff::training::{probe_rows, sample_trace, Checkpoint, Trainer};
use trajdiff::{Error, RunConfig};

const ARCHIVE_FILE: &str = "windows.archive";

#[derive(Parser, Debug)]
#[command(name = "trajdiff", version, about = "Diffusion-based vessel trajectory prediction")]
struct Cli {
    /// Run configuration (TOML). Required by every command except `plot`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean, resample and window the configured input into an archive.
    Preprocess,
    /// Train on the archive's training split.
    Train(TrainArgs),
    /// Draw futures for windows of one split.
    Sample(SampleArgs),
    /// Best-of-N metrics for one or more checkpoints, or for a trace.
    Evaluate(EvaluateArgs),
    /// Render step panels and error curves from a trace, or report curves.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct ArchiveArg {
    /// Window archive; defaults to `<out>/windows.archive`.
    #[arg(long, value_name = "PATH")]
    archive: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    archive: ArchiveArg,
    /// Resume from this checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    archive: ArchiveArg,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Samples per window; defaults to `eval.n_samples`.
    #[arg(long)]
    n: Option<usize>,
    /// Window indices within the split, comma separated; all by default.
    #[arg(long, value_delimiter = ',')]
    windows: Vec<usize>,
    /// Keep every retained reverse step, not only the final samples.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    archive: ArchiveArg,
    /// Checkpoints to compare; ablation variants of the config are accepted.
    #[arg(long, value_name = "PATH")]
    checkpoint: Vec<PathBuf>,
    /// Evaluate the final samples of a trace instead of a checkpoint.
    #[arg(long, value_name = "PATH", conflicts_with = "checkpoint")]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    n: Option<usize>,
    /// Lead times in hours: `0.5..4` (half-hour steps) or `0.5,1,2`.
    #[arg(long)]
    horizons: Option<String>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Metric reports (JSON) to draw against lead time.
    #[arg(long, value_name = "PATH")]
    report: Vec<PathBuf>,
    /// Trace window to draw step panels for.
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long)]
    horizons: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::IoPath { .. }
        | Error::Header(_)
        | Error::Config(_)
        | Error::Geometry { .. }
        | Error::Corrupt { .. }
        | Error::Incompatible(_)
        | Error::Empty(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::Plot(args) = &cli.command {
        let config = cli.config.as_deref().map(|p| load_config(p, cli.seed)).transpose()?;
        return cmd_plot(config.as_ref(), args, &cli.out);
    }
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let config = load_config(path, cli.seed)?;
    create_dir(&cli.out)?;
    match &cli.command {
        Command::Preprocess => cmd_preprocess(&config, &cli.out),
        Command::Train(args) => cmd_train(&config, args, &cli.out),
        Command::Sample(args) => cmd_sample(&config, args, &cli.out),
        Command::Evaluate(args) => cmd_evaluate(&config, args, &cli.out),
        Command::Plot(_) => unreachable!("handled above"),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::IoPath {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::IoPath {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open_archive(config: &RunConfig, arg: &ArchiveArg, out: &Path) -> Result<WindowArchive, Error> {
    let path = arg.archive.clone().unwrap_or_else(|| out.join(ARCHIVE_FILE));
    let archive = WindowArchive::read(&path)?;
    archive.ensure_matches(config)?;
    Ok(archive)
}

/// `a..b` expands to half-hour steps from `a` to `b`; otherwise a comma list.
fn parse_horizons(text: &str) -> Result<Vec<f64>, Error> {
    let bad = || Error::Config(format!("cannot parse horizons `{text}`"));
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Config("horizon list is empty".into()));
    }
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if !(a > 0.0 && b >= a) {
            return Err(bad());
        }
        let n = ((b - a) / 0.5).round() as usize;
        return Ok((0..=n).map(|i| a + 0.5 * i as f64).collect());
    }
    text.split(',').map(|h| h.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_preprocess(config: &RunConfig, out: &Path) -> Result<(), Error> {
    let archive = preprocess(config)?;
    archive.write(&out.join(ARCHIVE_FILE))?;
    let report = &archive.meta.report;
    write(&out.join("preprocess_report.json"), &report.to_json())?;
    println!(
        "{} journeys, {} windows (train {}, val {}, test {}) -> {}",
        report.journeys,
        report.windows,
        report.split_windows.train,
        report.split_windows.val,
        report.split_windows.test,
        out.join(ARCHIVE_FILE).display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig, args: &TrainArgs, out: &Path) -> Result<(), Error> {
    let archive = open_archive(config, &args.archive, out)?;
    let train = archive.dataset(Split::Train)?;
    let val = archive.dataset(Split::Val)?;
    let val = (config.train.eval_every > 0 && !val.is_empty()).then_some(val);
    let batcher = Batcher::from_config(config)?;
    let mut trainer = match &args.checkpoint {
        Some(path) => Trainer::resume(&Checkpoint::read(path)?, config, batcher, train, val)?,
        None => Trainer::new(config, batcher, train, val)?,
    };
    let start = trainer.step_count();
    let summary = trainer.run(Some(out))?;

    let rows = probe_rows(trainer.model(), &archive.dataset(Split::Train)?, trainer.batcher(), config)?;
    let probe = serde_json::json!({
        "config_hash": config.hash(),
        "ablation": config.train.ablation.label(),
        "row_max_abs": {"history": rows[0], "neighbors": rows[1], "map": rows[2]},
    });
    write(&out.join("probe.json"), &serde_json::to_string_pretty(&probe)?)?;
    println!(
        "trained steps {start}..{} final loss {:.6}{} -> {}",
        summary.steps,
        summary.final_loss,
        if summary.stopped_early { " (early stop)" } else { "" },
        summary.checkpoint.as_deref().unwrap_or(out).display()
    );
    Ok(())
}

fn cmd_sample(config: &RunConfig, args: &SampleArgs, out: &Path) -> Result<(), Error> {
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    ckpt.ensure_matches(config)?;
    let archive = open_archive(config, &args.archive, out)?;
    let data = archive.dataset(args.split)?;
    let idx: Vec<usize> = if args.windows.is_empty() {
        (0..data.len()).collect()
    } else {
        args.windows.clone()
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Config(format!("window {bad} is out of range for {} windows", data.len())));
    }
    let n = args.n.unwrap_or(config.eval.n_samples);
    let model = ckpt.model()?;
    let batcher = Batcher::from_config(config)?;
    let trace = sample_trace(&model, &data, &idx, &batcher, config, n, config.seed, args.trace, &ckpt.checkpoint_id)?;
    trace.write(&out.join("samples.trace"))?;
    write(&out.join("samples.csv"), &trace.samples_csv())?;
    println!(
        "{} windows x {n} samples, {} retained steps -> {}",
        idx.len(),
        trace.meta.steps.len(),
        out.join("samples.trace").display()
    );
    Ok(())
}

fn cmd_evaluate(config: &RunConfig, args: &EvaluateArgs, out: &Path) -> Result<(), Error> {
    let hours = match &args.horizons {
        Some(text) => parse_horizons(text)?,
        None => config.eval.horizons_hours.clone(),
    };
    let horizons = horizons_from_hours(&hours, config.data.delta_minutes, config.data.horizon)?;
    let distance = config.eval.distance;

    if let Some(path) = &args.trace {
        let trace = SampleTrace::read(path)?;
        if trace.meta.config_hash != config.hash() {
            return Err(Error::Incompatible(format!(
                "trace config hash {} does not match config hash {}",
                trace.meta.config_hash,
                config.hash()
            )));
        }
        let r = report(
            &trace.final_predictions(),
            &horizons,
            &trace.meta.roi,
            distance,
            &trace.meta.config_hash,
            &trace.meta.checkpoint_id,
        )?;
        r.write(out, "report")?;
        print!("{}", r.to_table());
        return Ok(());
    }

    if args.checkpoint.is_empty() {
        return Err(Error::Config("evaluate needs --checkpoint or --trace".into()));
    }
    let archive = open_archive(config, &args.archive, out)?;
    let data = archive.dataset(args.split)?;
    if data.is_empty() {
        return Err(Error::Empty(format!("no windows in the {:?} split", args.split)));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let n = args.n.unwrap_or(config.eval.n_samples);
    let mut labels = Vec::new();
    let mut reports: Vec<MetricReport> = Vec::new();
    for path in &args.checkpoint {
        let ckpt = Checkpoint::read(path)?;
        if args.checkpoint.len() == 1 {
            ckpt.ensure_matches(config)?;
        } else {
            ckpt.ensure_family(config)?;
        }
        // Each variant samples under its own mask.
        let own = &ckpt.config;
        let model = ckpt.model()?;
        let batcher = Batcher::from_config(own)?;
        let trace = sample_trace(&model, &data, &idx, &batcher, own, n, own.seed, false, &ckpt.checkpoint_id)?;
        reports.push(report(
            &trace.final_predictions(),
            &horizons,
            &config.data.roi,
            distance,
            &ckpt.config_hash,
            &ckpt.checkpoint_id,
        )?);
        labels.push(own.train.ablation.label());
    }
    if reports.len() == 1 {
        reports[0].write(out, "report")?;
        print!("{}", reports[0].to_table());
        return Ok(());
    }
    let mut seen = std::collections::BTreeMap::<String, usize>::new();
    for label in labels.iter_mut() {
        let count = seen.entry(label.clone()).or_default();
        *count += 1;
        if *count > 1 {
            label.push_str(&format!("-{count}"));
        }
    }
    for (label, r) in labels.iter().zip(&reports) {
        r.write(out, &format!("report_{label}"))?;
    }
    let table = comparison_csv(&labels, &reports)?;
    write(&out.join("comparison.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_plot(config: Option<&RunConfig>, args: &PlotArgs, out: &Path) -> Result<(), Error> {
    if args.trace.is_none() && args.report.is_empty() {
        return Err(Error::Config("plot needs --trace or --report".into()));
    }
    create_dir(out)?;
    let style = Style::default();
    if let Some(path) = &args.trace {
        let trace = SampleTrace::read(path)?;
        let hours = match (&args.horizons, config) {
            (Some(text), _) => parse_horizons(text)?,
            (None, Some(c)) => c.eval.horizons_hours.clone(),
            (None, None) => vec![trace.meta.horizon as f64 * trace.meta.delta_minutes as f64 / 60.0],
        };
        let horizons = horizons_from_hours(&hours, trace.meta.delta_minutes, trace.meta.horizon)?;
        let distance = config.map(|c| c.eval.distance).unwrap_or_default();
        let panels = out.join("panels");
        create_dir(&panels)?;
        let written = step_panels(&trace, args.window, &panels, style)?;
        error_curve(&trace, &horizons, distance, &out.join("error_vs_step.png"), style)?;
        println!("{} step panels -> {}", written.len(), panels.display());
    } else if let Some(text) = &args.horizons {
        parse_horizons(text)?;
    }
    if !args.report.is_empty() {
        let reports = args
            .report
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| Error::IoPath {
                    path: p.clone(),
                    source: e,
                })?;
                MetricReport::from_json(&text)
            })
            .collect::<Result<Vec<_>, Error>>()?;
        report_curve(&reports, &out.join("report_curve.png"), style)?;
        println!("report curve -> {}", out.join("report_curve.png").display());
    }
    Ok(())
}
