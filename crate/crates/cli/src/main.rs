use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use calm_core::ablation::run_ablation;
use calm_core::anchors::anchor_distribution_var;
use calm_core::checkpoint::load_checkpoint;
use calm_core::config::RunConfig;
use calm_core::corpus::{Corpus, Split};
use calm_core::error::{CalmError, Result};
use calm_core::gradcheck::check_head_loss;
use calm_core::retrieval::top_k;
use calm_core::synth::{dir_is_empty, generate_synthetic};
use calm_core::tape::Tape;
use calm_core::trainer::{evaluate, prepare_corpus, train};

/// Exit status when a gradient check exceeds its tolerance.
const GRADCHECK_FAILED: u8 = 5;

#[derive(Parser)]
#[command(name = "calm", version, about = "Class-anchor alignment head: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (stores and manifest) and print checksums.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train and write checkpoints plus a JSON-lines log to the output dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print retrieval metrics of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Corpus to score instead of the one the checkpoint was trained on.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also print the K most probable anchors for the first few queries.
        #[arg(long, value_name = "K")]
        top_anchors: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every loss mode from one seed and print a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = RunConfig::load(path)?;
    let notes: Vec<String> = cfg.apply_env_seed()?.into_iter().collect();
    for n in &notes {
        eprintln!("note: {n}");
    }
    Ok((cfg, notes))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CalmError::io(dir, e))
}

fn gen_data(config: &Path, out: &Path, force: bool) -> Result<u8> {
    let (cfg, _) = load_config(config)?;
    if !force && !dir_is_empty(out)? {
        return Err(CalmError::io(
            out,
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "output directory is not empty (pass --force to overwrite)",
            ),
        ));
    }
    ensure_dir(out)?;
    let written = generate_synthetic(&cfg.synthetic, cfg.seed, out)?;
    for (name, digest) in &written.checksums {
        println!("{digest}  {name}");
    }
    Ok(0)
}

fn train_cmd(config: &Path) -> Result<u8> {
    let (cfg, notes) = load_config(config)?;
    ensure_dir(&cfg.output_dir)?;
    let corpus = prepare_corpus(&cfg)?;
    let out = train(&cfg, &corpus, Some(&cfg.output_dir), &notes)?;
    let summary = json!({
        "output_dir": cfg.output_dir,
        "steps": out.steps,
        "epochs": out.epochs,
        "initial_loss": out.initial_loss,
        "final_loss": out.final_loss,
        "best": out.best,
    });
    println!("{summary:#}");
    Ok(0)
}

/// The corpus a checkpoint was trained on. Synthetic corpora are rebuilt in
/// a scratch directory so nothing next to the checkpoint is touched.
fn checkpoint_corpus(cfg: &RunConfig, manifest: Option<&Path>) -> Result<(Corpus, Option<tempfile::TempDir>)> {
    if let Some(m) = manifest.or(cfg.data.manifest.as_deref()) {
        return Ok((Corpus::load(m, cfg.data.anchors.as_deref())?, None));
    }
    let scratch = tempfile::tempdir().map_err(|e| CalmError::io(std::env::temp_dir(), e))?;
    let written = generate_synthetic(&cfg.synthetic, cfg.seed, scratch.path())?;
    Ok((Corpus::load(&written.manifest, cfg.data.anchors.as_deref())?, Some(scratch)))
}

fn eval_cmd(checkpoint: &Path, split: &str, manifest: Option<&Path>, top_anchors: Option<usize>) -> Result<u8> {
    let split: Split = split.parse()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let (store, head) = ckpt.restore()?;
    let (corpus, _scratch) = checkpoint_corpus(&ckpt.meta.config, manifest)?;
    if manifest.is_none() && corpus.checksum != ckpt.meta.data_checksum {
        eprintln!("warning: corpus checksum differs from the one recorded in the checkpoint");
    }
    let metrics = evaluate(&head, &store, &corpus, split)?;
    println!("{}", metrics.to_json());

    if let Some(k) = top_anchors {
        let idx: Vec<usize> = corpus.split(split).iter().copied().take(5).collect();
        let batch = corpus.batch(&idx)?;
        let tape = Tape::new();
        let (video, text) = head.embed(
            &tape,
            &store,
            tape.constant(batch.frames),
            tape.constant(batch.text),
            batch.frames_per_video,
        )?;
        let anchors = head.anchors_var(&tape, &store)?;
        let tau = tape.param(&store, head.tau);
        let vp = anchor_distribution_var(&video, &anchors, &tau)?.value();
        let sp = anchor_distribution_var(&text, &anchors, &tau)?.value();
        for (row, &i) in idx.iter().enumerate() {
            let line = json!({
                "id": corpus.ids[i],
                "video": top_k(vp.row(row), &head.labels, k)?,
                "text": top_k(sp.row(row), &head.labels, k)?,
            });
            println!("{line}");
        }
    }
    Ok(0)
}

fn gradcheck_cmd(config: &Path) -> Result<u8> {
    let (cfg, _) = load_config(config)?;
    let gc = &cfg.gradcheck;
    let report = check_head_loss(gc, &cfg.loss, cfg.seed)?;
    for p in &report.params {
        println!("{:<28} {:>6} {:.3e}", p.name, p.numel, p.max_rel_error);
    }
    let ok = report.passes(gc.tolerance);
    println!(
        "max relative error {:.3e} (tolerance {:.1e}, step {:.1e}): {}",
        report.max_rel_error,
        gc.tolerance,
        gc.step,
        if ok { "ok" } else { "FAILED" }
    );
    Ok(if ok { 0 } else { GRADCHECK_FAILED })
}

fn ablate_cmd(config: &Path) -> Result<u8> {
    let (cfg, _) = load_config(config)?;
    ensure_dir(&cfg.output_dir)?;
    let corpus = prepare_corpus(&cfg)?;
    let table = run_ablation(&cfg, &corpus)?;
    let text = table.to_text();
    let json = table.to_json();
    calm_core::store::write_atomic(&cfg.output_dir.join("ablation.txt"), text.as_bytes())?;
    calm_core::store::write_atomic(&cfg.output_dir.join("ablation.json"), format!("{json}\n").as_bytes())?;
    print!("{text}");
    println!("{json}");
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { config, out, force } => gen_data(&config, &out, force),
        Command::Train { config } => train_cmd(&config),
        Command::Eval {
            checkpoint,
            split,
            manifest,
            top_anchors,
        } => eval_cmd(&checkpoint, &split, manifest.as_deref(), top_anchors),
        Command::Gradcheck { config } => gradcheck_cmd(&config),
        Command::Ablate { config } => ablate_cmd(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
