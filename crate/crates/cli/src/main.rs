mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ccdet::data::{gen_synthetic, load_dataset, write_vedai, Sample, SynthConfig};
use ccdet::experiment::{
    ablate_convffn, ablate_fusion, conv_ffn_rows, evaluate, holdout_split, AblationTable,
};
use ccdet::fusion::FusionVariant;
use ccdet::gradsuite::run_gradsuite;
use ccdet::head::PostProcess;
use ccdet::train::{train_loop, Checkpoint, TrainOptions};
use clap::{Parser, Subcommand};
use thiserror::Error;

use config::{RunConfig, TrainOverrides};
use manifest::RunManifest;

#[derive(Debug, Error)]
pub enum UsageError {
    #[error("{0}")]
    MissingFile(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Parser)]
#[command(
    name = "ccdet",
    version,
    about = "RGB+IR cross-channel fusion detector"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON config; only the `synth` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model on every sample of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory for eval.json, eval.csv and the manifest; defaults to
        /// the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every fusion variant and tabulate mAP50.
    AblateFusion {
        #[command(flatten)]
        ab: AblationArgs,
        /// Comma-separated subset of variants; all six by default.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<FusionVariant>>,
    },
    /// Train conv FFN stage sets {}, {1} and {1,2} and tabulate mAP50.
    AblateConvffn {
        #[command(flatten)]
        ab: AblationArgs,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct AblationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out evaluation set; otherwise the last 20% of `--data`.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Comma-separated training seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn require_dir(path: &Path) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(
            UsageError::MissingFile(format!("{} is not a directory", path.display())).into(),
        );
    }
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<Vec<Sample>> {
    require_dir(path)?;
    Ok(load_dataset(path)?)
}

fn gen_data(out: &Path, n: usize, seed: Option<u64>, config: Option<&Path>) -> anyhow::Result<()> {
    let run = RunConfig::load(config)?;
    let synth = SynthConfig {
        seed: seed.unwrap_or(run.synth.seed),
        ..run.synth
    };
    synth
        .validate()
        .map_err(|e| UsageError::Config(e.to_string()))?;
    let start = Instant::now();
    let samples = gen_synthetic(n, &synth)?;
    write_vedai(out, &samples)?;
    let mut m = RunManifest::new("gen-data", serde_json::json!({ "n": n, "synth": synth }));
    m.dataset(out)?;
    m.wall_seconds = start.elapsed().as_secs_f64();
    fs::write(out.join("manifest.json"), m.to_json())?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train(data: &Path, out: &Path, o: &TrainOverrides) -> anyhow::Result<()> {
    let cfg = o.resolve()?;
    let samples = load(data)?;
    let start = Instant::now();
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
    };
    let res = train_loop(&cfg.train, &cfg.model, &samples, &opts)?;
    let mut m = RunManifest::new("train", cfg.to_value());
    m.dataset(data)?;
    for f in ["train_log.csv", "final.ckpt", "best.ckpt"] {
        m.record(out, f)?;
    }
    m.wall_seconds = start.elapsed().as_secs_f64();
    fs::write(out.join("manifest.json"), m.to_json())?;
    if let Some(last) = res.log.last() {
        println!(
            "epoch {} loss {:.6} best {:.6}",
            last.epoch, last.total, res.best_total
        );
    }
    Ok(())
}

fn eval(data: &Path, ckpt: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    if !ckpt.is_file() {
        return Err(UsageError::MissingFile(format!("{} not found", ckpt.display())).into());
    }
    let samples = load(data)?;
    let start = Instant::now();
    let ck = Checkpoint::load(ckpt)?;
    let (det, params) = ck.restore()?;
    let report = evaluate(&det, &params, &samples, &PostProcess::default())?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| ckpt.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    fs::create_dir_all(&dir)?;
    let mut m = RunManifest::new(
        "eval",
        serde_json::json!({ "train": ck.meta.train, "model": ck.meta.model, "epoch": ck.meta.epoch }),
    );
    m.dataset(data)?;
    m.write(&dir, "eval.json", report.to_json().as_bytes())?;
    m.write(&dir, "eval.csv", report.to_csv().as_bytes())?;
    m.wall_seconds = start.elapsed().as_secs_f64();
    fs::write(dir.join("manifest_eval.json"), m.to_json())?;
    print!("{}", report.to_csv());
    println!("mAP50 {:.4}", report.map50);
    Ok(())
}

fn ablate(
    ab: &AblationArgs,
    name: &str,
    run: impl FnOnce(&RunConfig, &[u64], &[Sample], &[Sample]) -> anyhow::Result<AblationTable>,
) -> anyhow::Result<()> {
    let cfg = ab.overrides.resolve()?;
    let samples = load(&ab.data)?;
    let held;
    let (train_set, eval_set) = match &ab.eval_data {
        Some(p) => {
            held = load(p)?;
            (&samples[..], &held[..])
        }
        None => holdout_split(&samples, 0.2),
    };
    let seeds = ab.seeds.clone().unwrap_or_else(|| vec![cfg.train.seed]);
    let start = Instant::now();
    let table = run(&cfg, &seeds, train_set, eval_set)?;
    fs::create_dir_all(&ab.out)?;
    let mut m = RunManifest::new(
        name,
        serde_json::json!({
            "config": cfg,
            "seeds": seeds,
            "n_train": train_set.len(),
            "n_eval": eval_set.len(),
        }),
    );
    for row in &table.rows {
        for r in &row.runs {
            m.run_seconds
                .insert(format!("{}/seed{}", row.label, r.seed), r.seconds);
        }
    }
    m.dataset(&ab.data)?;
    if let Some(p) = &ab.eval_data {
        m.dataset(p)?;
    }
    let stem = name.replace('-', "_");
    m.write(&ab.out, &format!("{stem}.csv"), table.to_csv().as_bytes())?;
    m.write(
        &ab.out,
        &format!("{stem}.md"),
        table.to_markdown().as_bytes(),
    )?;
    m.write(
        &ab.out,
        &format!("{stem}.json"),
        serde_json::to_string_pretty(&table)?.as_bytes(),
    )?;
    m.wall_seconds = start.elapsed().as_secs_f64();
    fs::write(ab.out.join("manifest.json"), m.to_json())?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn gradcheck(seeds: u64, tol: f64, out: Option<&Path>) -> anyhow::Result<bool> {
    let start = Instant::now();
    let seed_list: Vec<u64> = (0..seeds).collect();
    let reports = run_gradsuite(&seed_list)?;
    let mut ok = true;
    println!(
        "{:<16}{:>8}{:>10}{:>16}",
        "op", "seeds", "probed", "max_rel_error"
    );
    for r in &reports {
        let pass = r.max_rel_error < tol;
        ok &= pass;
        println!(
            "{:<16}{:>8}{:>10}{:>16.3e}  {}",
            r.op,
            r.seeds,
            r.probed,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let mut m = RunManifest::new(
        "gradcheck",
        serde_json::json!({ "seeds": seeds, "tol": tol }),
    );
    let json = serde_json::to_string_pretty(&reports)?;
    m.wall_seconds = start.elapsed().as_secs_f64();
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            m.write(dir, "gradcheck.json", json.as_bytes())?;
            fs::write(dir.join("manifest.json"), m.to_json())?;
        }
        None => {
            m.artifacts.insert(
                "gradcheck.json".into(),
                manifest::artifact_id(json.as_bytes()),
            );
            eprintln!("{}", serde_json::to_string(&m)?);
        }
    }
    println!("total {:.1}s", m.wall_seconds);
    Ok(ok)
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            config,
        } => gen_data(&out, n, seed, config.as_deref())?,
        Command::Train {
            data,
            out,
            overrides,
        } => train(&data, &out, &overrides)?,
        Command::Eval { data, ckpt, out } => eval(&data, &ckpt, out.as_deref())?,
        Command::AblateFusion { ab, variants } => {
            let variants = variants.unwrap_or_else(|| FusionVariant::ALL.to_vec());
            ablate(&ab, "ablate-fusion", |cfg, seeds, tr, ev| {
                Ok(ablate_fusion(
                    &cfg.train, &cfg.model, &variants, seeds, tr, ev,
                )?)
            })?
        }
        Command::AblateConvffn { ab } => ablate(&ab, "ablate-convffn", |cfg, seeds, tr, ev| {
            Ok(ablate_convffn(
                &cfg.train,
                &cfg.model,
                &conv_ffn_rows(),
                seeds,
                tr,
                ev,
            )?)
        })?,
        Command::Gradcheck { seeds, tol, out } => return gradcheck(seeds, tol, out.as_deref()),
    }
    Ok(true)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exit code and kind tag of a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    if let Some(u) = err.downcast_ref::<UsageError>() {
        return match u {
            UsageError::MissingFile(_) => (2, "missing_file"),
            UsageError::Config(_) => (2, "config"),
        };
    }
    if let Some(e) = err.downcast_ref::<ccdet::Error>() {
        return match e {
            ccdet::Error::Config(_) => (2, "config"),
            ccdet::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                (2, "missing_file")
            }
            other => (1, other.kind()),
        };
    }
    (1, "internal")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: kind=gradcheck msg=finite-difference error above tolerance");
            ExitCode::from(1)
        }
        Err(err) => {
            let (code, kind) = classify(&err);
            eprintln!("error: kind={kind} msg={}", one_line(&format!("{err:#}")));
            ExitCode::from(code)
        }
    }
}
