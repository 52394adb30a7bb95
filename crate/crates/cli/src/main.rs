//! Command-line front end: generate data, train single models, run the full
//! cross-magnification matrix, and re-emit reports. Machine-readable results
//! go to files, logs to stderr, and exit codes follow a fixed contract:
//! 0 success, 2 usage or validation, 3 I/O, 4 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use magmix::checkpoint::save_model;
use magmix::data::{
    generate_with, load_image_folder, resize_dataset, split, GenConfig, Mag, MagDataset, SplitSpec,
};
use magmix::defaults;
use magmix::error::{Error, Result};
use magmix::models::{Family, ModelConfig};
use magmix::protocol::{run_matrix, summarize, ArchSpec, CrossMagMatrix, MatrixConfig};
use magmix::report::{emit_report, load_matrices_dir, ReportFormat};
use magmix::train::{
    best_of_runs, save_run_record, write_history_csv, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "magmix",
    version,
    about = "Train token-mixing image classifiers on one magnification and test them across all four"
)]
struct Cli {
    /// Base seed: data generation, splits, and run seeds derive from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for data decoding (0 picks the core count).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Single-threaded, byte-reproducible outputs; zeroes recorded wall times.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output root; results and reports land under it.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic two-class dataset at all four magnifications.
    GenData {
        /// Images per class per magnification.
        #[arg(long, default_value_t = defaults::PER_CLASS_PER_MAG)]
        per_class: usize,
        /// Square image side in pixels; must be divisible by 4.
        #[arg(long, default_value_t = defaults::INPUT_SIZE)]
        size: usize,
        /// Class-frequency ratio; 1.0 is balanced.
        #[arg(long, default_value_t = 1.0)]
        imbalance: f64,
    },
    /// Train one architecture on one magnification, keeping the best of K runs.
    Train {
        #[arg(long)]
        arch: String,
        /// Dataset directory produced by gen-data (or the same PNG layout).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train_mag: String,
        #[arg(long, default_value_t = defaults::EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = defaults::RUNS)]
        runs: usize,
        #[arg(long, default_value_t = defaults::BATCH_SIZE)]
        batch_size: usize,
    },
    /// Fill the 4x4 train-by-test magnification matrix for each architecture.
    Matrix {
        /// Comma-separated architecture names, or "all". "oracle" runs a
        /// label-reading stub that checks the pipeline end to end.
        #[arg(long, default_value = "all")]
        archs: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = defaults::RUNS)]
        runs: usize,
        /// Concurrent training rows; forced to 1 by --deterministic.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = defaults::EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = defaults::BATCH_SIZE)]
        batch_size: usize,
    },
    /// Re-emit report files from matrix.json files already on disk.
    Report {
        /// Directory holding <arch>/matrix.json entries; defaults to --out.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// csv, md, svg, all, or a comma-separated mix.
        #[arg(long, default_value = "all")]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = std::env::var("RUST_LOG").unwrap_or_else(|_| "info".to_string());
    env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let threads = if cli.deterministic { 1 } else { cli.threads };
    if threads != 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    match &cli.cmd {
        Cmd::GenData { per_class, size, imbalance } => gen_data(cli, *per_class, *size, *imbalance),
        Cmd::Train { arch, data, train_mag, epochs, runs, batch_size } => {
            train_cmd(cli, arch, data, train_mag, *epochs, *runs, *batch_size)
        }
        Cmd::Matrix { archs, data, runs, jobs, epochs, batch_size } => {
            matrix_cmd(cli, archs, data, *runs, *jobs, *epochs, *batch_size)
        }
        Cmd::Report { input, format } => report_cmd(cli, input.as_deref(), format),
    }
}

fn gen_data(cli: &Cli, per_class: usize, size: usize, imbalance: f64) -> Result<()> {
    let gen = GenConfig { seed: cli.seed, per_class_per_mag: per_class, out_size: size, imbalance };
    let ds = generate_with(&gen)?;
    magmix::data::save_dataset(&cli.out, &ds, Some(&gen))?;
    record_effective_config(
        &cli.out,
        "gen-data",
        json!({
            "seed": cli.seed,
            "per_class": per_class,
            "size": size,
            "imbalance": imbalance,
            "out": cli.out.display().to_string(),
        }),
    )?;
    println!(
        "wrote {} items ({} classes x {} magnifications) to {}",
        ds.len(),
        ds.class_names.len(),
        Mag::ALL.len(),
        cli.out.display()
    );
    println!("dataset fingerprint {}", ds.fingerprint());
    Ok(())
}

/// Fixed-resolution families get data resized to their trained size; the
/// rest adopt the data's native size so profiles match real compute.
fn fit_config(mut mc: ModelConfig, ds: &MagDataset) -> (ModelConfig, bool) {
    if mc.family.fixed_resolution() {
        let resize = ds.image_size != mc.input_size;
        (mc, resize)
    } else {
        mc.input_size = ds.image_size;
        (mc, false)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    cli: &Cli,
    arch: &str,
    data: &Path,
    train_mag: &str,
    epochs: usize,
    runs: usize,
    batch_size: usize,
) -> Result<()> {
    let family: Family = arch.parse()?;
    let mag = Mag::parse(train_mag)?;
    if runs == 0 {
        return Err(Error::config("runs", "must be >= 1"));
    }
    let tcfg = TrainConfig { epochs, batch_size, deterministic: cli.deterministic, ..TrainConfig::default() };
    tcfg.validate()?;

    let loaded = load_image_folder(data)?;
    let (mc, resize) = fit_config(ModelConfig::desk(family), &loaded);
    let ds = if resize { resize_dataset(&loaded, mc.input_size.0, mc.input_size.1)? } else { loaded };
    let fingerprint = ds.fingerprint();
    let (tr_all, va_all, te_all) = split(&ds, SplitSpec { seed: cli.seed })?;
    let (tr, va, te) = (tr_all.filter_mag(mag), va_all.filter_mag(mag), te_all.filter_mag(mag));

    let seeds: Vec<u64> = (1..=runs as u64).map(|k| cli.seed + k).collect();
    log::info!("{family} on {}: {} train / {} val / {} test items, {runs} runs", mag.label(), tr.len(), va.len(), te.len());
    let (model, mut record) = best_of_runs(&mc, &tr, &va, &te, &tcfg, &seeds)?;

    let rel = format!("{}/{}/run_{}", family.name(), mag.label(), record.seed);
    let dir = cli.out.join(&rel);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    save_model(dir.join("model.ckpt"), &model)?;
    record.checkpoint_path = Some(format!("{rel}/model.ckpt"));
    record.dataset_fingerprint = Some(fingerprint);
    save_run_record(dir.join("record.json"), &record)?;
    write_history_csv(dir.join("history.csv"), &record.history)?;
    record_effective_config(
        &cli.out,
        "train",
        json!({
            "arch": family.name(),
            "data": data.display().to_string(),
            "train_mag": mag.label(),
            "epochs": epochs,
            "runs": runs,
            "batch_size": batch_size,
            "seed": cli.seed,
            "deterministic": cli.deterministic,
        }),
    )?;

    let val = record.best_val_acc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let test = record.final_test.as_ref().map_or("n/a".to_string(), |t| format!("{:.4}", t.top1));
    println!("best run seed {} val {val} test {test}", record.seed);
    println!("checkpoint {}", dir.join("model.ckpt").display());
    Ok(())
}

fn parse_archs(s: &str) -> Result<Vec<ArchSpec>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Family::ALL.iter().map(|&f| ArchSpec::Real(ModelConfig::desk(f))).collect());
    }
    let mut specs: Vec<ArchSpec> = Vec::new();
    for tok in s.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let spec = ArchSpec::from_name(tok)?;
        if !specs.contains(&spec) {
            specs.push(spec);
        }
    }
    if specs.is_empty() {
        return Err(Error::Empty { what: "architecture list".into() });
    }
    Ok(specs)
}

#[allow(clippy::too_many_arguments)]
fn matrix_cmd(
    cli: &Cli,
    archs: &str,
    data: &Path,
    runs: usize,
    jobs: usize,
    epochs: usize,
    batch_size: usize,
) -> Result<()> {
    let specs = parse_archs(archs)?;
    if runs == 0 {
        return Err(Error::config("runs", "must be >= 1"));
    }
    let train =
        TrainConfig { epochs, batch_size, deterministic: cli.deterministic, ..TrainConfig::default() };
    train.validate()?;
    let ds = load_image_folder(data)?;
    let mcfg = MatrixConfig {
        train,
        run_seeds: (1..=runs as u64).map(|k| cli.seed + k).collect(),
        split_seed: cli.seed,
        out_dir: Some(cli.out.clone()),
        jobs: if cli.deterministic { 1 } else { jobs },
    };

    let mut matrices: Vec<CrossMagMatrix> = Vec::new();
    let mut first_failure: Option<Error> = None;
    for spec in &specs {
        let spec = match spec {
            ArchSpec::Real(mc) => ArchSpec::Real(fit_config(mc.clone(), &ds).0),
            ArchSpec::Oracle => ArchSpec::Oracle,
        };
        log::info!("running matrix for {}", spec.name());
        let outcome = run_matrix(&spec, &ds, &mcfg)?;
        for (ctx, err) in outcome.failures {
            log::warn!("{ctx}: {err}");
            if first_failure.is_none() {
                first_failure = Some(err);
            }
        }
        matrices.push(outcome.matrix);
    }
    matrices.sort_by(|a, b| a.arch.cmp(&b.arch));

    let mut summaries = Vec::new();
    for m in &matrices {
        match summarize(m) {
            Ok(s) => summaries.push(s),
            Err(e) => log::warn!("{e}; excluded from rankings"),
        }
    }
    emit_report(&cli.out, &matrices, &summaries, &ReportFormat::ALL)?;
    record_effective_config(
        &cli.out,
        "matrix",
        json!({
            "archs": specs.iter().map(|s| s.name()).collect::<Vec<_>>(),
            "data": data.display().to_string(),
            "runs": runs,
            "jobs": jobs,
            "epochs": epochs,
            "batch_size": batch_size,
            "seed": cli.seed,
            "deterministic": cli.deterministic,
        }),
    )?;

    for s in &summaries {
        println!(
            "{}: overall {:.4} diagonal {:.4} min cell {:.4}",
            s.arch, s.overall_mean, s.diagonal_mean, s.min_cell
        );
    }
    println!("matrices and report files under {}", cli.out.display());
    match first_failure {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn report_cmd(cli: &Cli, input: Option<&Path>, format: &str) -> Result<()> {
    let formats = ReportFormat::parse_list(format)?;
    let dir = input.unwrap_or(&cli.out);
    let mut matrices = load_matrices_dir(dir)?;
    matrices.sort_by(|a, b| a.arch.cmp(&b.arch));
    let mut summaries = Vec::new();
    for m in &matrices {
        match summarize(m) {
            Ok(s) => summaries.push(s),
            Err(e) => log::warn!("{e}; excluded from rankings"),
        }
    }
    let written = emit_report(&cli.out, &matrices, &summaries, &formats)?;
    record_effective_config(
        &cli.out,
        "report",
        json!({
            "in": dir.display().to_string(),
            "format": format,
        }),
    )?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Every command appends its resolved flags next to the full defaults
/// snapshot, so no hyper-parameter is ever implicit in the artifacts.
fn record_effective_config(dir: &Path, command: &str, flags: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("effective_config.json");
    let mut root: serde_json::Value = match std::fs::read_to_string(&path) {
        Ok(raw) => serde_json::from_str(&raw).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    root["defaults_version"] = json!(defaults::DEFAULTS_VERSION);
    root["defaults"] = defaults::snapshot();
    root["commands"][command] = flags;
    let body = serde_json::to_string_pretty(&root)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })?;
    std::fs::write(&path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}
