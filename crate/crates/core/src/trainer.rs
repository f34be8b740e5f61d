//! Seeded training loop, evaluation, and the corpus resolution shared by the
//! commands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{save_checkpoint, CheckpointState, EvalRecord};
use crate::config::RunConfig;
use crate::corpus::{Corpus, Split};
use crate::cvae::CvaeNoise;
use crate::error::{CalmError, Result};
use crate::model::CalmHead;
use crate::objective::LossConfig;
use crate::optim::{adamw_step, AdamWState};
use crate::retrieval::{RetrievalMetrics, SimilarityMatrix};
use crate::rng::{self, Stream};
use crate::synth;
use crate::tape::Tape;
use crate::tensor::ParamStore;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.json";

/// Loads the configured corpus, generating the synthetic one under
/// `<output_dir>/data` when no manifest is given.
pub fn prepare_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = match &cfg.data.manifest {
        Some(m) => Corpus::load(m, cfg.data.anchors.as_deref())?,
        None => {
            let dir = cfg.output_dir.join("data");
            fs::create_dir_all(&dir).map_err(|e| CalmError::io(&dir, e))?;
            let out = synth::generate_synthetic(&cfg.synthetic, cfg.seed, &dir)?;
            Corpus::load(&out.manifest, cfg.data.anchors.as_deref())?
        }
    };
    if let Some(k) = cfg.data.k {
        let found = corpus.anchors.as_ref().map_or(0, |a| a.len());
        if found != k {
            return Err(CalmError::config("data.k", format!("expected {k} anchors, corpus has {found}")));
        }
    }
    if let Some(d) = cfg.data.dim {
        if corpus.dim() != d {
            return Err(CalmError::config(
                "data.dim",
                format!("expected dim {d}, corpus has {}", corpus.dim()),
            ));
        }
    }
    Ok(corpus)
}

/// Text-to-video retrieval over one split, using adapted features and
/// cosine similarity.
pub fn evaluate(head: &CalmHead, store: &ParamStore, corpus: &Corpus, split: Split) -> Result<RetrievalMetrics> {
    let idx = corpus.split(split);
    if idx.is_empty() {
        return Err(CalmError::EmptyInput("evaluation split has no samples"));
    }
    let batch = corpus.batch(idx)?;
    let tape = Tape::new();
    let (video, text) = head.embed(
        &tape,
        store,
        tape.constant(batch.frames),
        tape.constant(batch.text),
        batch.frames_per_video,
    )?;
    let sim = SimilarityMatrix::cosine(&text.value(), &video.value())?;
    RetrievalMetrics::evaluate(&sim)
}

/// Mean loss over consecutive `batch_size` chunks of `indices`, with no
/// dropout and the latent fixed at the posterior mean.
pub fn dataset_loss(
    head: &CalmHead,
    store: &ParamStore,
    corpus: &Corpus,
    indices: &[usize],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(CalmError::EmptyInput("loss over no samples"));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let batch = corpus.batch(chunk)?;
        let tape = Tape::new();
        let noise = CvaeNoise::deterministic(chunk.len(), &head.cvae);
        let f = head.forward(&tape, store, &batch, &noise, loss)?;
        total += f.report.total * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub head: CalmHead,
    pub store: ParamStore,
    /// Train-split loss before the first update.
    pub initial_loss: f64,
    /// Train-split loss after the last update.
    pub final_loss: f64,
    pub steps: usize,
    pub epochs: usize,
    /// Per-step training-batch loss.
    pub loss_trace: Vec<f64>,
    pub history: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub out_dir: Option<PathBuf>,
}

struct Logger {
    out: Option<(PathBuf, BufWriter<fs::File>)>,
}

impl Logger {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let out = match dir {
            Some(d) => {
                let p = d.join(LOG_FILE);
                let f = fs::File::create(&p).map_err(|e| CalmError::io(&p, e))?;
                Some((p, BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self { out })
    }

    fn line(&mut self, v: serde_json::Value) -> Result<()> {
        if let Some((p, w)) = self.out.as_mut() {
            writeln!(w, "{v}").map_err(|e| CalmError::io(p.as_path(), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((p, w)) = self.out.as_mut() {
            w.flush().map_err(|e| CalmError::io(p.as_path(), e))?;
        }
        Ok(())
    }
}

fn total_steps(cfg: &RunConfig, n_train: usize) -> usize {
    let per_epoch = n_train.div_ceil(cfg.optim.batch_size);
    let by_epochs = per_epoch * cfg.optim.epochs;
    cfg.optim.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
}

/// Trains on `corpus`. With `out_dir` set, writes the JSON-lines log, the
/// last and best-by-R@1 checkpoints, and the final metrics there. `notes`
/// are copied into the log header.
pub fn train(cfg: &RunConfig, corpus: &Corpus, out_dir: Option<&Path>, notes: &[String]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let anchors = corpus
        .anchors
        .as_ref()
        .ok_or_else(|| CalmError::config("data.anchors", "the corpus has no anchor store"))?;
    let train_idx = corpus.split(Split::Train).to_vec();
    if train_idx.is_empty() {
        return Err(CalmError::EmptyInput("training split has no samples"));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| CalmError::io(d, e))?;
    }

    let mut init_rng = rng::stream(cfg.seed, Stream::Init);
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut eps_rng = rng::stream(cfg.seed, Stream::Epsilon);
    let mut dropout_rng = rng::stream(cfg.seed, Stream::Dropout);
    let (mut store, head) = CalmHead::init(cfg.model.clone(), anchors, &mut init_rng)?;
    let mut state = AdamWState::new(&store);

    let mut log = Logger::open(out_dir)?;
    log.line(json!({
        "kind": "header",
        "config": cfg.to_json(),
        "data_checksum": corpus.checksum,
        "init": crate::checkpoint::INIT_DESCRIPTION,
        "deviations": cfg.deviations(),
        "notes": notes,
        "planned_steps": total_steps(cfg, train_idx.len()),
    }))?;

    let bs = cfg.optim.batch_size;
    let initial_loss = dataset_loss(&head, &store, corpus, &train_idx, bs, &cfg.loss)?;
    let planned = total_steps(cfg, train_idx.len());
    let has_val = !corpus.split(Split::Val).is_empty();

    let mut history = Vec::new();
    let mut best: Option<EvalRecord> = None;
    let mut loss_trace = Vec::with_capacity(planned);
    let mut step = 0usize;
    let mut epoch = 0usize;

    let checkpoint = |path: &Path, store: &ParamStore, step: usize, epoch: usize, history: &[EvalRecord]| {
        save_checkpoint(
            path,
            &CheckpointState {
                config: cfg,
                head: &head,
                store,
                step,
                epoch,
                history,
                frames_per_video: corpus.frames_per_video,
                data_checksum: &corpus.checksum,
            },
        )
    };

    let record_eval = |store: &ParamStore,
                           step: usize,
                           epoch: usize,
                           history: &mut Vec<EvalRecord>,
                           best: &mut Option<EvalRecord>,
                           log: &mut Logger|
     -> Result<()> {
        if !has_val {
            return Ok(());
        }
        let metrics = evaluate(&head, store, corpus, Split::Val)?;
        let rec = EvalRecord {
            step,
            epoch,
            split: Split::Val.to_string(),
            metrics,
        };
        log.line(json!({ "kind": "eval", "step": step, "epoch": epoch, "split": "val", "metrics": metrics }))?;
        history.push(rec.clone());
        let improved = best.as_ref().is_none_or(|b| metrics.r1 > b.metrics.r1);
        if improved {
            *best = Some(rec);
            if let Some(d) = out_dir {
                checkpoint(&d.join(BEST_CKPT), store, step, epoch, history)?;
            }
        }
        if let Some(d) = out_dir {
            checkpoint(&d.join(LAST_CKPT), store, step, epoch, history)?;
        }
        log.flush()
    };

    if planned == 0 {
        record_eval(&store, 0, 0, &mut history, &mut best, &mut log)?;
    }
    while step < planned {
        let perm = rng::permutation(&mut shuffle_rng, train_idx.len());
        let order: Vec<usize> = perm.into_iter().map(|i| train_idx[i]).collect();
        for chunk in order.chunks(bs) {
            if step >= planned {
                break;
            }
            let batch = corpus.batch(chunk)?;
            let noise = CvaeNoise::sample(&mut eps_rng, &mut dropout_rng, chunk.len(), &head.cvae);
            let tape = Tape::new();
            let fwd = match head.forward(&tape, &store, &batch, &noise, &cfg.loss) {
                Ok(f) => f,
                Err(e) => {
                    log.line(json!({ "kind": "abort", "step": step + 1, "error": e.to_string() }))?;
                    log.flush()?;
                    return Err(e);
                }
            };
            store.zero_grad();
            tape.backward_into(fwd.loss, &mut store)?;
            if let Err(e) = adamw_step(&mut store, &mut state, &cfg.optim) {
                log.line(json!({ "kind": "abort", "step": step + 1, "error": e.to_string() }))?;
                log.flush()?;
                return Err(e);
            }
            step += 1;
            let r = fwd.report;
            loss_trace.push(r.total);
            log.line(json!({
                "kind": "step", "step": step, "epoch": epoch,
                "total": r.total, "task": r.task, "rec": r.rec, "kl": r.kl,
                "weighted_kl": r.weighted_kl, "discriminative": r.discriminative,
            }))?;
        }
        epoch += 1;
        record_eval(&store, step, epoch, &mut history, &mut best, &mut log)?;
    }
    store.zero_grad();

    let final_loss = dataset_loss(&head, &store, corpus, &train_idx, bs, &cfg.loss)?;
    log.line(json!({
        "kind": "summary", "steps": step, "epochs": epoch,
        "initial_loss": initial_loss, "final_loss": final_loss,
        "best": best,
    }))?;
    log.flush()?;
    if let Some(d) = out_dir {
        let summary = json!({
            "initial_loss": initial_loss,
            "final_loss": final_loss,
            "steps": step,
            "best": best,
            "final": history.last(),
            "data_checksum": corpus.checksum,
        });
        let p = d.join(METRICS_FILE);
        crate::store::write_atomic(&p, format!("{summary:#}\n").as_bytes())?;
    }

    Ok(TrainOutcome {
        head,
        store,
        initial_loss,
        final_loss,
        steps: step,
        epochs: epoch,
        loss_trace,
        history,
        best,
        out_dir: out_dir.map(Path::to_path_buf),
    })
}
