//! The single JSON document that drives every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::model::ModelConfig;
use crate::objective::{LossConfig, LossMode};
use crate::optim::OptimConfig;
use crate::synth::SyntheticConfig;

pub const SEED_ENV: &str = "CALM_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus manifest. When absent a synthetic corpus is generated from the
    /// `synthetic` section into `<output_dir>/data`.
    pub manifest: Option<PathBuf>,
    /// Replaces the manifest's anchor store.
    pub anchors: Option<PathBuf>,
    /// Expected number of anchors; checked against the loaded store.
    pub k: Option<usize>,
    /// Expected embedding width; checked against the loaded stores.
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub k: usize,
    pub dim: usize,
    pub frames: usize,
    pub batch: usize,
    pub hidden: usize,
    pub latent: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            k: 5,
            dim: 6,
            frames: 3,
            batch: 4,
            hidden: 4,
            latent: 3,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub modes: Vec<LossMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            modes: LossMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub gradcheck: GradcheckConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            gradcheck: GradcheckConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CalmError::Json {
            path: origin.to_path_buf(),
            source: e,
        })
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates. Does not consult the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CalmError::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.output_dir);
        if let Some(p) = cfg.data.manifest.as_mut() {
            rebase(base, p);
        }
        if let Some(p) = cfg.data.anchors.as_mut() {
            rebase(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `CALM_SEED` override, returning a note for the run log when
    /// one was used.
    pub fn apply_env_seed(&mut self) -> Result<Option<String>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed: u64 = v
                    .trim()
                    .parse()
                    .map_err(|_| CalmError::config(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
                let note = format!("{SEED_ENV}={seed} overrides config seed {}", self.seed);
                self.seed = seed;
                Ok(Some(note))
            }
            Err(std::env::VarError::NotPresent) => Ok(None),
            Err(e) => Err(CalmError::config(SEED_ENV, e.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        let g = &self.gradcheck;
        if g.k == 0 || g.dim == 0 || g.frames == 0 || g.batch == 0 || g.hidden == 0 || g.latent == 0 {
            return Err(CalmError::config("gradcheck", "all sizes must be >= 1"));
        }
        if !(g.step > 0.0) || !(g.tolerance > 0.0) {
            return Err(CalmError::config("gradcheck", "step and tolerance must be > 0"));
        }
        if self.ablation.modes.is_empty() {
            return Err(CalmError::config("ablation.modes", "must list at least one mode"));
        }
        Ok(())
    }

    /// Fully materialized config, used as the run header.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Settings that differ from the full-scale reference setup, echoed in
    /// the run header.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.optim.lr != 1e-5 {
            out.push(format!("lr {} (full-scale setup uses 1e-5)", self.optim.lr));
        }
        if self.optim.batch_size != 128 {
            out.push(format!("batch_size {} (full-scale setup uses 128)", self.optim.batch_size));
        }
        if self.model.adapters {
            out.push("affine feature adapters stand in for encoder fine-tuning".into());
        }
        if self.data.manifest.is_none() {
            out.push("synthetic corpus instead of benchmark embeddings".into());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let c = RunConfig::from_json("{}", Path::new("x.json")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [r#"{"sed": 1}"#, r#"{"model": {"latent": 3}}"#, r#"{"optim": {"learning_rate": 1}}"#] {
            let err = RunConfig::from_json(doc, Path::new("c.json")).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{doc}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"output_dir": "out", "data": {"manifest": "d/manifest.json"}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.data.manifest.unwrap(), dir.path().join("d/manifest.json"));
    }

    #[test]
    fn invalid_section_reports_key() {
        let doc = r#"{"synthetic": {"dim": 4, "imbalance_keep": 5}}"#;
        let c = RunConfig::from_json(doc, Path::new("c.json")).unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("imbalance_keep"));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_value(c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
