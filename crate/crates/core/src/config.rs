//! TOML experiment configuration: task-stream source, strategy roster,
//! hyperparameters, seeds, and output location.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::{Hyper, Regime, SMM_CR, SMM_CR_INTERSEP, SMM_PLAIN};
use crate::taskgen::{make_blob_stream, BlobStreamParams, TaskStream};

/// Where the task stream comes from: a saved file or the blob generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StreamSpec {
    Path { path: PathBuf },
    Blobs(BlobStreamParams),
}

impl StreamSpec {
    pub fn resolve(&self, relative_to: Option<&Path>) -> Result<TaskStream> {
        match self {
            StreamSpec::Path { path } => {
                let full = match relative_to {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.clone(),
                };
                TaskStream::load(&full)
            }
            StreamSpec::Blobs(params) => make_blob_stream(params),
        }
    }
}

/// Named strategy presets selectable from the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Naive,
    Static,
    Imm,
    Smm,
    SmmCr,
    SmmCrIntersep,
    /// Double branch: static branch scores base classes, a dynamically
    /// adapted branch scores novel classes.
    Dbf,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Static => "static",
            StrategyKind::Imm => "imm",
            StrategyKind::Smm => "smm",
            StrategyKind::SmmCr => "smm_cr",
            StrategyKind::SmmCrIntersep => "smm_cr_intersep",
            StrategyKind::Dbf => "dbf",
        }
    }
}

fn default_imm_alpha() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Row label in the outputs; defaults to the kind name.
    pub name: Option<String>,
    #[serde(default = "default_imm_alpha")]
    pub imm_alpha: f64,
}

impl StrategySpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_string())
    }

    /// The single-branch regime; `Dbf` is orchestrated by the runner and has
    /// no single regime.
    pub fn regime(&self) -> Option<Regime> {
        match self.kind {
            StrategyKind::Naive => Some(Regime::Naive),
            StrategyKind::Static => Some(Regime::Static),
            StrategyKind::Imm => Some(Regime::Imm { alpha: self.imm_alpha }),
            StrategyKind::Smm => Some(SMM_PLAIN),
            StrategyKind::SmmCr => Some(SMM_CR),
            StrategyKind::SmmCrIntersep => Some(SMM_CR_INTERSEP),
            StrategyKind::Dbf => None,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub strategies: Vec<StrategySpec>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub hyper: Hyper,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Collects every violation instead of stopping at the first one.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();

        if self.seeds.is_empty() {
            problems.push("seeds: list must not be empty".to_string());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            problems.push("seeds: duplicate seed values".to_string());
        }

        if self.strategies.is_empty() {
            problems.push("strategies: list must not be empty".to_string());
        }
        {
            let mut labels: Vec<String> = self.strategies.iter().map(|s| s.label()).collect();
            labels.sort();
            labels.dedup();
            if labels.len() != self.strategies.len() {
                problems.push("strategies: duplicate strategy labels".to_string());
            }
        }
        for s in &self.strategies {
            if !(0.0..=1.0).contains(&s.imm_alpha) {
                problems.push(format!(
                    "strategies.{}: imm_alpha {} outside [0, 1]",
                    s.label(),
                    s.imm_alpha
                ));
            }
        }

        let h = &self.hyper;
        if let Err(e) = h.alpha.validate() {
            problems.push(format!("hyper.alpha: {e}"));
        }
        if h.hidden.is_empty() || h.hidden.contains(&0) {
            problems.push("hyper.hidden: needs at least one nonzero layer width".to_string());
        }
        if h.kappa <= 0.0 {
            problems.push(format!("hyper.kappa: must be > 0, got {}", h.kappa));
        }
        if h.margin < 0.0 {
            problems.push(format!("hyper.margin: must be >= 0, got {}", h.margin));
        }
        if h.lambda_margin < 0.0 || h.lambda_anchor < 0.0 {
            problems.push("hyper: loss weights must be >= 0".to_string());
        }
        for (name, eta) in
            [("eta_pretrain", h.eta_pretrain), ("eta_fc", h.eta_fc), ("eta_ex", h.eta_ex)]
        {
            if eta <= 0.0 || !eta.is_finite() {
                problems.push(format!("hyper.{name}: must be positive and finite, got {eta}"));
            }
        }
        if h.batch_size == 0 {
            problems.push("hyper.batch_size: must be >= 1".to_string());
        }
        if h.epochs_fc == 0 {
            problems.push("hyper.epochs_fc: must be >= 1".to_string());
        }
        if h.capacity == 0 {
            problems.push("hyper.capacity: must be >= 1".to_string());
        }
        if h.replay_per_class == 0 {
            problems.push("hyper.replay_per_class: must be >= 1".to_string());
        }
        if h.probe_barrier && h.barrier_grid < 3 {
            problems.push(format!("hyper.barrier_grid: must be >= 3, got {}", h.barrier_grid));
        }

        if let StreamSpec::Blobs(p) = &self.stream {
            if p.d_in < 2 {
                problems.push(format!("stream.d_in: must be >= 2, got {}", p.d_in));
            }
            if p.n_base < 1 || p.n_novel < 1 || p.k < 1 {
                problems.push("stream: n_base, n_novel and k must be >= 1".to_string());
            }
            if !(p.spread > 0.0 && p.spread.is_finite()) {
                problems.push(format!("stream.spread: must be positive and finite, got {}", p.spread));
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VALID: &str = r#"
seeds = [0, 1, 2]
out_dir = "runs"

[stream]
n_base = 3
n_novel = 4
k = 5
d_in = 4
spread = 0.2
seed = 42
protocol = { kind = "per_class" }

[[strategies]]
kind = "naive"

[[strategies]]
kind = "smm_cr_intersep"

[[strategies]]
kind = "imm"
imm_alpha = 0.5
"#;

    #[test]
    fn valid_fixture_passes() {
        let cfg = ExperimentConfig::from_toml_str(VALID).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.strategies.len(), 3);
        assert!(matches!(cfg.strategies[2].regime(), Some(Regime::Imm { alpha }) if alpha == 0.5));
    }

    #[test]
    fn validate_lists_every_violation() {
        let mut cfg = ExperimentConfig::from_toml_str(VALID).unwrap();
        cfg.seeds.clear();
        cfg.hyper.alpha.alpha_hi = 1.2;
        cfg.hyper.eta_ex = 0.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("seeds"), "{msg}");
        assert!(msg.contains("alpha"), "{msg}");
        assert!(msg.contains("eta_ex"), "{msg}");
    }

    #[test]
    fn clamp_above_one_is_rejected() {
        let mut cfg = ExperimentConfig::from_toml_str(VALID).unwrap();
        cfg.hyper.alpha.alpha_hi = 1.2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let mut cfg = ExperimentConfig::from_toml_str(VALID).unwrap();
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stream_path_variant_parses() {
        let text = r#"
seeds = [0]
[stream]
path = "stream.txt"
[[strategies]]
kind = "smm"
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert!(matches!(cfg.stream, StreamSpec::Path { .. }));
        cfg.validate().unwrap();
    }

    #[test]
    fn hyper_defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml_str(VALID).unwrap();
        assert_eq!(cfg.hyper.kappa, 16.0);
        assert_eq!(cfg.out_dir, PathBuf::from("runs"));
    }
}
