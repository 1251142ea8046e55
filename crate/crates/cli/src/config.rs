//! Run configuration: one JSON file feeds every subcommand.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use attrgate_core::attribution::AttributionConfig;
use attrgate_core::importance::ImportanceConfig;
use attrgate_core::model::ModelConfig;
use attrgate_core::tasks::{TaskKind, TaskSpec, Tokenizer};
use attrgate_core::trainer::{TrainConfig, TrainMode};
use attrgate_core::Error;

pub const SCHEMA_VERSION: u32 = 1;

fn default_k_fraction() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attribution: AttributionConfig,
    #[serde(default)]
    pub importance: ImportanceConfig,
    /// Also the default task order.
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Fraction of each tensor's elements compared by the similarity study.
    #[serde(default = "default_k_fraction")]
    pub study_k_fraction: f64,
}

/// Command-line overrides of config scalars.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub gate: Option<bool>,
    pub mode: Option<TrainMode>,
    pub out: Option<PathBuf>,
    pub task_order: Option<Vec<TaskKind>>,
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.to_string(), reason: reason.into() }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text).map_err(|e| config_err("config", format!("{}: {e}", path.display())))
    }

    /// A single `--seed` replaces every seed so one root value drives
    /// initialization, data and batch order.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), Error> {
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            for t in &mut self.tasks {
                t.seed = seed;
            }
        }
        if let Some(g) = o.gate {
            self.train.gate = g;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(order) = &o.task_order {
            let mut reordered = Vec::with_capacity(order.len());
            for kind in order {
                let spec = self
                    .tasks
                    .iter()
                    .find(|t| t.name == *kind)
                    .ok_or_else(|| config_err("task_order", format!("task `{kind}` is not configured")))?;
                reordered.push(spec.clone());
            }
            self.tasks = reordered;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.attribution.validate()?;
        self.importance.validate()?;
        if self.tasks.is_empty() {
            return Err(config_err("tasks", "at least one task is required"));
        }
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.name) {
                return Err(config_err("tasks", format!("task `{}` listed twice", t.name)));
            }
            t.validate(attrgate_core::tasks::max_alphabet())?;
        }
        let alphabet = self.tasks[0].alphabet;
        if let Some(t) = self.tasks.iter().find(|t| t.alphabet != alphabet) {
            return Err(config_err(
                &format!("tasks.{}.alphabet", t.name),
                "all tasks share one vocabulary, so alphabets must match",
            ));
        }
        let vocab = Tokenizer::new(alphabet)?.vocab_size();
        if self.model.vocab_size != vocab {
            return Err(config_err(
                "model.vocab_size",
                format!("alphabet {alphabet} needs vocab_size {vocab}, found {}", self.model.vocab_size),
            ));
        }
        for t in &self.tasks {
            // the last framed token is only ever a target
            let need = t.max_framed_len() - 1;
            if need > self.model.max_seq_len {
                return Err(config_err(
                    "model.max_seq_len",
                    format!("task `{}` needs {need} positions, model has {}", t.name, self.model.max_seq_len),
                ));
            }
        }
        if self.train.mode == TrainMode::Lora && self.model.lora_rank.is_none() {
            return Err(config_err("model.lora_rank", "LoRA mode needs a rank"));
        }
        if !(self.study_k_fraction > 0.0 && self.study_k_fraction <= 1.0) {
            return Err(config_err("study_k_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, Error> {
        self.out
            .as_deref()
            .ok_or_else(|| config_err("out", "no output directory; pass --out or set `out`"))
    }

    /// Model architecture for the configured mode; the LoRA rank only
    /// applies in LoRA mode.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.train.mode == TrainMode::Full {
            m.lora_rank = None;
        }
        m
    }

    pub fn tokenizer(&self) -> Result<Tokenizer, Error> {
        Tokenizer::new(self.tasks[0].alphabet)
    }

    pub fn task_order(&self) -> Vec<TaskKind> {
        self.tasks.iter().map(|t| t.name).collect()
    }

    /// Hash of the resolved configuration, excluding the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let text = serde_json::to_string(&c).expect("serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
