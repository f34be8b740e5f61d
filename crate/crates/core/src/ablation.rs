//! Generative versus discriminative alignment: one training run per loss
//! mode on the same corpus and seed.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{Corpus, Split};
use crate::error::Result;
use crate::objective::LossMode;
use crate::trainer::{evaluate, train};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: LossMode,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mnr: f64,
    pub final_loss: f64,
    pub data_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub seed: u64,
    pub split: Split,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

/// Trains every mode in `cfg.ablation.modes` from the same seed and scores
/// it on the test split, or validation when the test split is empty.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus) -> Result<AblationTable> {
    let split = if corpus.split(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let mut rows = Vec::with_capacity(cfg.ablation.modes.len());
    let mut steps = 0;
    for &mode in &cfg.ablation.modes {
        let mut run = cfg.clone();
        run.loss.mode = mode;
        let out = train(&run, corpus, None, &[])?;
        let m = evaluate(&out.head, &out.store, corpus, split)?;
        steps = out.steps;
        rows.push(AblationRow {
            mode,
            r1: m.r1,
            r5: m.r5,
            r10: m.r10,
            mnr: m.mnr,
            final_loss: out.final_loss,
            data_checksum: corpus.checksum.clone(),
        });
    }
    Ok(AblationTable {
        seed: cfg.seed,
        split,
        steps,
        rows,
    })
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>7} {:>7} {:>7} {:>7} {:>10}",
            "mode", "R@1", "R@5", "R@10", "MnR", "train_loss"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>7.3} {:>10.4}",
                r.mode.as_str(),
                r.r1,
                r.r5,
                r.r10,
                r.mnr,
                r.final_loss
            );
        }
        let _ = writeln!(
            s,
            "seed {} | split {} | {} steps per mode",
            self.seed, self.split, self.steps
        );
        s
    }
}
