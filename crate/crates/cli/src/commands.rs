//! Subcommands. Each reads its upstream artifacts from the output
//! directory, delegates to one core operation and records a manifest of
//! input and output hashes under `manifests/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use attrgate_core::analysis::{forgetting, similarity_csv, similarity_study, study_prior, write_text, SimilarityReport};
use attrgate_core::importance::{sample_relevance, select_correct, ImportancePrior};
use attrgate_core::model::{init_params, load_checkpoint, load_checkpoint_expecting, save_checkpoint, ModelConfig, ModelParams};
use attrgate_core::parallel::map_ordered;
use attrgate_core::tasks::{accuracy, encode_all, generate, read_jsonl, write_jsonl, Example, TaskKind};
use attrgate_core::trainer::{task_prior, train_continual, train_single_task, TaskData, TrainMode};
use attrgate_core::{Error, RngState};

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("missing {what} at {path}; run `attrgate {producer}` first")]
    Missing { what: String, path: PathBuf, producer: &'static str },
}

impl CliError {
    /// 2 configuration, 3 data or artifacts, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing { .. } => 3,
            CliError::Core(e) => match e {
                Error::Config { .. } => 2,
                Error::Data(_)
                | Error::NoCorrectSamples { .. }
                | Error::Integrity { .. }
                | Error::Io { .. }
                | Error::Json(_) => 3,
                Error::Numerical { .. } => 4,
                Error::Shape { .. } => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

/// Fixed file layout under the output directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("data/tokenizer.json")
    }

    pub fn split(&self, task: TaskKind, split: &str) -> PathBuf {
        self.root.join(format!("data/{task}/{split}.jsonl"))
    }

    pub fn single(&self, task: TaskKind) -> PathBuf {
        self.root.join(format!("single/{task}"))
    }

    pub fn attribution(&self, task: TaskKind) -> PathBuf {
        self.root.join(format!("attribution/{task}"))
    }

    pub fn prior(&self, t: usize) -> PathBuf {
        self.root.join(format!("priors/task{t}.prior"))
    }

    pub fn continual(&self, gate: bool) -> PathBuf {
        self.root.join(format!("continual/gate-{}", if gate { "on" } else { "off" }))
    }

    pub fn study(&self) -> PathBuf {
        self.root.join("study")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join(format!("manifests/{name}.json"))
    }
}

fn require(path: &Path, what: &str, producer: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing { what: what.to_string(), path: path.to_path_buf(), producer })
    }
}

/// SHA-256 of a file, or of a directory's files in sorted path order.
fn hash_path(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(fs::read(&f).map_err(|e| io_err(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(|e| io_err(path, e))? {
            let entry = entry.map_err(|e| io_err(path, e))?;
            collect_files(&entry.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_sha256: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct Recorder<'a> {
    layout: &'a Layout,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Recorder<'a> {
    fn new(layout: &'a Layout) -> Self {
        Self { layout, inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.layout.root).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        let k = self.key(path);
        self.inputs.insert(k, hash_path(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> CliResult<()> {
        let k = self.key(path);
        self.outputs.insert(k, hash_path(path)?);
        Ok(())
    }

    fn finish(self, name: &str, cfg: &RunConfig) -> CliResult<()> {
        let m = RunManifest { command: name, config_sha256: cfg.digest(), inputs: self.inputs, outputs: self.outputs };
        write_json(&self.layout.manifest(name), &m)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_text(path, &text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

/// Starting parameters: a fresh model, or `base` with LoRA factors
/// attached when training in LoRA mode.
fn initial_params(cfg: &RunConfig, base: Option<&Path>) -> CliResult<(ModelParams, ModelConfig)> {
    let model = cfg.effective_model();
    match base {
        None => Ok((init_params(&model, &mut RngState::new(model.seed).substream("init")), model)),
        Some(path) => {
            require(path, "base checkpoint", "train-single")?;
            let plain = ModelConfig { lora_rank: None, ..model.clone() };
            let (mut params, _) = load_checkpoint_expecting(path, &plain)?;
            if params.blocks.iter().any(|b| b.lora.is_some()) {
                return Err(Error::Config { field: "base".into(), reason: "base checkpoint already has LoRA factors".into() }.into());
            }
            if let Some(rank) = model.lora_rank {
                params.attach_lora(&model, rank, &mut RngState::new(model.seed).substream("lora"));
            }
            Ok((params, model))
        }
    }
}

fn load_task(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder, kind: TaskKind) -> CliResult<TaskData> {
    let tok = cfg.tokenizer()?;
    let mut read = |split: &str| -> CliResult<Vec<Example>> {
        let path = layout.split(kind, split);
        require(&path, &format!("{kind} {split} split"), "gen-tasks")?;
        rec.input(&path)?;
        Ok(read_jsonl(&path)?)
    };
    let train = read("train")?;
    let eval = read("eval")?;
    Ok(TaskData { kind, train: encode_all(&tok, kind, &train)?, eval: encode_all(&tok, kind, &eval)? })
}

fn load_single(cfg: &RunConfig, layout: &Layout, rec: &mut Recorder, kind: TaskKind) -> CliResult<ModelParams> {
    let path = layout.single(kind).join("checkpoint");
    require(&path, &format!("single-task checkpoint for `{kind}`"), "train-single")?;
    rec.input(&path)?;
    Ok(load_checkpoint_expecting(&path, &cfg.effective_model())?.0)
}

pub fn gen_tasks(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let mut rec = Recorder::new(layout);
    let tok = cfg.tokenizer()?;
    write_json(&layout.tokenizer(), &tok.to_json())?;
    rec.output(&layout.tokenizer())?;
    for spec in &cfg.tasks {
        let data = generate(spec)?;
        for (split, examples) in [("train", &data.train), ("eval", &data.eval)] {
            let path = layout.split(spec.name, split);
            write_jsonl(&path, examples)?;
            rec.output(&path)?;
        }
        log::info!("{}: {} train / {} eval examples", spec.name, data.train.len(), data.eval.len());
    }
    rec.finish("gen-tasks", cfg)
}

#[derive(Serialize, Deserialize)]
struct SingleRecord {
    task: TaskKind,
    mode: TrainMode,
    eval_accuracy: f64,
    final_loss: f64,
    losses: Vec<f64>,
}

pub fn train_single(cfg: &RunConfig, layout: &Layout, base: Option<&Path>) -> CliResult<()> {
    let mut rec = Recorder::new(layout);
    if let Some(b) = base {
        require(b, "base checkpoint", "train-single")?;
        rec.input(b)?;
    }
    for kind in cfg.task_order() {
        let task = load_task(cfg, layout, &mut rec, kind)?;
        let (init, model) = initial_params(cfg, base)?;
        let out = train_single_task(&init, &model, kind, &task.train, &cfg.train)?;
        let acc = accuracy(&out.params, &model, &task.eval)?;
        log::info!("{kind}: eval exact match {acc:.3}");
        let dir = layout.single(kind);
        save_checkpoint(&out.params, &model, &dir.join("checkpoint"))?;
        let record = SingleRecord {
            task: kind,
            mode: cfg.train.mode,
            eval_accuracy: acc,
            final_loss: *out.losses.last().expect("steps >= 1"),
            losses: out.losses,
        };
        write_json(&dir.join("record.json"), &record)?;
        rec.output(&dir)?;
    }
    rec.finish("train-single", cfg)
}

#[derive(Serialize)]
struct AttributionEntry {
    /// Index into the task's training split.
    sample: usize,
    dir: String,
    total: f64,
    conservation_error: f64,
}

pub fn attribute(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let mut rec = Recorder::new(layout);
    for kind in cfg.task_order() {
        let task = load_task(cfg, layout, &mut rec, kind)?;
        let params = load_single(cfg, layout, &mut rec, kind)?;
        let model = cfg.effective_model();
        let pool = &task.train[..task.train.len().min(cfg.train.prior_samples)];
        let correct = select_correct(&params, &model, kind, pool)?;
        let dir = layout.attribution(kind);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        let mut index = Vec::with_capacity(correct.len());
        for chunk in correct.chunks(32) {
            let maps = map_ordered(chunk, |&i| sample_relevance(&params, &model, &pool[i], &cfg.attribution))?;
            for (&i, map) in chunk.iter().zip(maps) {
                let name = format!("sample{i:05}");
                map.save(&dir.join(&name))?;
                index.push(AttributionEntry {
                    sample: i,
                    dir: name,
                    total: map.total,
                    conservation_error: map.conservation_error(),
                });
            }
        }
        log::info!("{kind}: attributed {} of {} samples", correct.len(), pool.len());
        write_json(&dir.join("index.json"), &index)?;
        rec.output(&dir)?;
    }
    rec.finish("attribute", cfg)
}

pub fn prior(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let mut rec = Recorder::new(layout);
    for (i, kind) in cfg.task_order().into_iter().enumerate() {
        let task = load_task(cfg, layout, &mut rec, kind)?;
        let params = load_single(cfg, layout, &mut rec, kind)?;
        let p = task_prior(&params, &cfg.effective_model(), i + 1, &task, &cfg.train, &cfg.attribution, &cfg.importance)?;
        let path = layout.prior(i + 1);
        p.save(&path)?;
        rec.output(&path)?;
    }
    rec.finish("prior", cfg)
}

#[derive(Serialize, Deserialize)]
pub struct ContinualRecord {
    pub gate: bool,
    pub mode: TrainMode,
    pub task_order: Vec<TaskKind>,
    /// `accuracy[task][stage]`.
    pub accuracy: Vec<Vec<f64>>,
    pub final_mean: f64,
    pub bwt: f64,
    pub final_losses: Vec<f64>,
}

pub fn train_continual_cmd(cfg: &RunConfig, layout: &Layout, base: Option<&Path>) -> CliResult<()> {
    let mut rec = Recorder::new(layout);
    if let Some(b) = base {
        rec.input(b)?;
    }
    let order = cfg.task_order();
    let mut tasks = Vec::with_capacity(order.len());
    for &kind in &order {
        tasks.push(load_task(cfg, layout, &mut rec, kind)?);
    }
    let (init, model) = initial_params(cfg, base)?;
    let out = train_continual(&init, &model, &tasks, &cfg.train, &cfg.attribution, &cfg.importance)?;
    let dir = layout.continual(cfg.train.gate);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    for (s, p) in out.stage_params.iter().enumerate() {
        save_checkpoint(p, &model, &dir.join(format!("stage{}/checkpoint", s + 1)))?;
    }
    for (s, g) in out.gates.iter().enumerate() {
        g.save(&dir.join(format!("stage{}.gate", s + 1)))?;
    }
    for p in &out.priors {
        p.save(&dir.join(format!("task{}.prior", p.task_id)))?;
    }
    let f = forgetting(&out.accuracy)?;
    let record = ContinualRecord {
        gate: cfg.train.gate,
        mode: cfg.train.mode,
        task_order: order,
        accuracy: f.accuracy,
        final_mean: f.final_mean,
        bwt: f.bwt,
        final_losses: out.losses.iter().map(|l| *l.last().expect("steps >= 1")).collect(),
    };
    write_json(&dir.join("record.json"), &record)?;
    rec.output(&dir)?;
    let name = if cfg.train.gate { "train-continual.gate-on" } else { "train-continual.gate-off" };
    rec.finish(name, cfg)
}

#[derive(Serialize, Deserialize)]
pub struct StudyPair {
    pub tasks: [TaskKind; 2],
    pub independent: SimilarityReport,
    pub sequential: SimilarityReport,
}

/// Importance similarity for each consecutive task pair: single-task
/// models θ'_a, θ'_b against the naive continual model after stage b.
pub fn study(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let mut rec = Recorder::new(layout);
    let order = cfg.task_order();
    if order.len() < 2 {
        return Err(Error::Config { field: "tasks".into(), reason: "the study compares at least two tasks".into() }.into());
    }
    let model = cfg.effective_model();
    let naive = layout.continual(false);
    let mut pairs = Vec::new();
    for s in 0..order.len() - 1 {
        let (a, b) = (order[s], order[s + 1]);
        let ta = load_task(cfg, layout, &mut rec, a)?;
        let tb = load_task(cfg, layout, &mut rec, b)?;
        let pa = load_single(cfg, layout, &mut rec, a)?;
        let pb = load_single(cfg, layout, &mut rec, b)?;
        let seq_path = naive.join(format!("stage{}/checkpoint", s + 2));
        require(&seq_path, "naive continual checkpoint", "train-continual --gate off")?;
        rec.input(&seq_path)?;
        let (seq, _) = load_checkpoint(&seq_path)?;
        let n = cfg.train.prior_samples;
        let imp = |p: &ModelParams, t: &TaskData, id: usize| -> CliResult<ImportancePrior> {
            Ok(study_prior(p, &model, t.kind, id, &t.eval[..t.eval.len().min(n)], &cfg.attribution, &cfg.importance)?)
        };
        let independent = similarity_study(&imp(&pa, &ta, s + 1)?.tensors, &imp(&pb, &tb, s + 2)?.tensors, cfg.study_k_fraction)?;
        let sequential = similarity_study(&imp(&seq, &ta, s + 1)?.tensors, &imp(&seq, &tb, s + 2)?.tensors, cfg.study_k_fraction)?;
        log::info!(
            "{a}/{b}: overlap {:.4} -> {:.4}, spearman {:.4} -> {:.4}",
            independent.mean_overlap(),
            sequential.mean_overlap(),
            independent.mean_spearman(),
            sequential.mean_spearman()
        );
        pairs.push(StudyPair { tasks: [a, b], independent, sequential });
    }
    let dir = layout.study();
    write_json(&dir.join("similarity.json"), &pairs)?;
    write_text(&dir.join("similarity.csv"), &pairs_csv(&pairs))?;
    rec.output(&dir)?;
    rec.finish("study", cfg)
}

fn pairs_csv(pairs: &[StudyPair]) -> String {
    let labels: Vec<(String, &SimilarityReport)> = pairs
        .iter()
        .flat_map(|p| {
            let tag = format!("{}-{}", p.tasks[0], p.tasks[1]);
            [(format!("independent/{tag}"), &p.independent), (format!("sequential/{tag}"), &p.sequential)]
        })
        .collect();
    let refs: Vec<(&str, &SimilarityReport)> = labels.iter().map(|(l, r)| (l.as_str(), *r)).collect();
    similarity_csv(&refs)
}

#[derive(Serialize)]
struct Comparison {
    /// First task's accuracy right after stage 1.
    task1_after_stage1: f64,
    task1_final_naive: f64,
    task1_final_gated: f64,
    naive_task1_drop: f64,
    gated_task1_gain: f64,
    last_task_naive: f64,
    last_task_gated: f64,
    last_task_gap: f64,
}

#[derive(Serialize)]
struct PairSummary {
    tasks: [TaskKind; 2],
    independent_mean_overlap: f64,
    sequential_mean_overlap: f64,
    independent_mean_spearman: f64,
    sequential_mean_spearman: f64,
    both_increase: bool,
}

#[derive(Serialize)]
struct Summary {
    config_sha256: String,
    task_order: Vec<TaskKind>,
    naive: Option<ContinualRecord>,
    gated: Option<ContinualRecord>,
    comparison: Option<Comparison>,
    similarity: Vec<PairSummary>,
}

/// Collates continual records and the study into `report/summary.json`
/// plus CSV tables.
pub fn report(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let mut rec = Recorder::new(layout);
    let mut load = |gate: bool| -> CliResult<Option<ContinualRecord>> {
        let path = layout.continual(gate).join("record.json");
        if !path.exists() {
            return Ok(None);
        }
        rec.input(&path)?;
        read_json(&path).map(Some)
    };
    let naive = load(false)?;
    let gated = load(true)?;
    if naive.is_none() && gated.is_none() {
        return Err(CliError::Missing {
            what: "continual record".into(),
            path: layout.continual(false).join("record.json"),
            producer: "train-continual",
        });
    }
    let comparison = match (&naive, &gated) {
        (Some(n), Some(g)) => {
            let last = n.accuracy.len() - 1;
            Some(Comparison {
                task1_after_stage1: n.accuracy[0][0],
                task1_final_naive: n.accuracy[0][last],
                task1_final_gated: g.accuracy[0][last],
                naive_task1_drop: n.accuracy[0][0] - n.accuracy[0][last],
                gated_task1_gain: g.accuracy[0][last] - n.accuracy[0][last],
                last_task_naive: n.accuracy[last][last],
                last_task_gated: g.accuracy[last][last],
                last_task_gap: g.accuracy[last][last] - n.accuracy[last][last],
            })
        }
        _ => None,
    };
    let study_path = layout.study().join("similarity.json");
    let pairs: Vec<StudyPair> = if study_path.exists() {
        rec.input(&study_path)?;
        read_json(&study_path)?
    } else {
        log::warn!("no study found at {}; run `attrgate study` to include similarity", study_path.display());
        Vec::new()
    };
    let similarity = pairs
        .iter()
        .map(|p| {
            let (io, so) = (p.independent.mean_overlap(), p.sequential.mean_overlap());
            let (is, ss) = (p.independent.mean_spearman(), p.sequential.mean_spearman());
            PairSummary {
                tasks: p.tasks,
                independent_mean_overlap: io,
                sequential_mean_overlap: so,
                independent_mean_spearman: is,
                sequential_mean_spearman: ss,
                both_increase: so > io && ss > is,
            }
        })
        .collect();

    let mut acc_csv = String::from("setting,task,stage,accuracy\n");
    for r in naive.iter().chain(gated.iter()) {
        let setting = if r.gate { "gated" } else { "naive" };
        for (t, row) in r.accuracy.iter().enumerate() {
            for (s, a) in row.iter().enumerate() {
                let _ = writeln!(acc_csv, "{setting},{},{},{a}", r.task_order[t], s + 1);
            }
        }
    }

    let summary = Summary {
        config_sha256: cfg.digest(),
        task_order: cfg.task_order(),
        naive,
        gated,
        comparison,
        similarity,
    };
    let dir = layout.report();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    write_text(&dir.join("accuracy.csv"), &acc_csv)?;
    if !pairs.is_empty() {
        write_text(&dir.join("similarity.csv"), &pairs_csv(&pairs))?;
    }
    rec.output(&dir)?;
    rec.finish("report", cfg)
}
