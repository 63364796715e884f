//! Pipeline configuration: one TOML file, path overrides from the
//! environment, command-line flags on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use distill_core::eval::MAX_RUN_DEPTH;
use distill_core::loss::LossConfig;
use distill_core::negatives::MiningConfig;
use distill_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every key accepted under `[paths]`. Each can be overridden by the
/// environment variable `DISTILL_<KEY>` (upper case).
pub const PATH_KEYS: [&str; 9] = [
    "corpus",
    "queries",
    "passage_embeddings",
    "query_embeddings",
    "teacher_scores",
    "eval_query_embeddings",
    "qrels",
    "eval_teacher_scores",
    "output_dir",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Passages retrieved per query for run files.
    pub depth: usize,
    pub rerank_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { depth: 100, rerank_depth: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { thresholds: vec![0.3, 0.6, 0.95] }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    deterministic: bool,
    log_level: Option<String>,
    paths: BTreeMap<String, PathBuf>,
    mining: MiningConfig,
    loss: LossConfig,
    train: TrainConfig,
    eval: EvalConfig,
    sweep: SweepConfig,
}

/// Everything that influences stage outputs apart from input files. Its
/// hash goes into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub deterministic: bool,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Settings {
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("settings serialize"))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub settings: Settings,
    pub paths: BTreeMap<String, PathBuf>,
    pub log_level: String,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub log_level: Option<String>,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl PipelineConfig {
    /// Loads `path` (or defaults when absent), applies `DISTILL_*` path
    /// variables from `env`, then the flags. Relative paths in the file
    /// resolve against the file's directory.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>, flags: &Overrides) -> Result<Self, CliError> {
        let (file, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let file: FileConfig =
                    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                (file, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (FileConfig::default(), PathBuf::new()),
        };

        let mut paths = BTreeMap::new();
        for (key, value) in file.paths {
            if !PATH_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown key paths.{key}; expected one of {}", PATH_KEYS.join(", "))));
            }
            paths.insert(key, base.join(value));
        }
        for key in PATH_KEYS {
            if let Some(v) = env(&format!("DISTILL_{}", key.to_uppercase())) {
                paths.insert(key.to_string(), PathBuf::from(v));
            }
        }

        let seed = flags.seed.or(file.seed).unwrap_or(file.train.seed);
        let settings = Settings {
            seed,
            deterministic: flags.deterministic || file.deterministic,
            mining: file.mining,
            loss: file.loss,
            train: TrainConfig { seed, ..file.train },
            eval: file.eval,
            sweep: file.sweep,
        };
        let cfg = PipelineConfig {
            settings,
            paths,
            log_level: flags.log_level.clone().or(file.log_level).unwrap_or_else(|| "info".into()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let s = &self.settings;
        s.mining.validate()?;
        s.loss.validate()?;
        s.train.validate()?;
        if s.loss.k != s.mining.k {
            return Err(CliError::Usage(format!(
                "loss.k ({}) must equal mining.k ({})",
                s.loss.k, s.mining.k
            )));
        }
        for (name, d) in [("eval.depth", s.eval.depth), ("eval.rerank_depth", s.eval.rerank_depth)] {
            if d == 0 || d > MAX_RUN_DEPTH {
                return Err(CliError::Usage(format!("{name} must be in 1..={MAX_RUN_DEPTH}, got {d}")));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.paths
            .get("output_dir")
            .map(PathBuf::as_path)
            .ok_or_else(|| CliError::Usage("paths.output_dir is not set (config or DISTILL_OUTPUT_DIR)".into()))
    }
}
