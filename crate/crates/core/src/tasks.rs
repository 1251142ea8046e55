//! Synthetic sequence tasks, the character-level tokenizer and exact-match
//! evaluation.
//!
//! Every example is framed as `[BOS] [TASK] x [SEP] y [EOS]`. The task tag
//! token lets a single model tell the tasks of a curriculum apart.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{greedy_decode, ModelConfig, ModelParams};
use crate::numerics::RngState;

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const PLUS: usize = 3;
/// Number of reserved ids before the task tags.
const N_SPECIAL: usize = 4;
/// Characters used for alphabet symbols (and digits for `modadd`).
const SYMBOLS: &str = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Largest supported alphabet.
pub fn max_alphabet() -> usize {
    SYMBOLS.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Modadd,
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Modadd, TaskKind::Sort];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modadd => "modadd",
            TaskKind::Sort => "sort",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("task", format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskKind,
    /// Number of symbols; for `modadd` this is the numeric base.
    pub alphabet: usize,
    /// Inclusive `[min, max]` length of `x` (per operand for `modadd`).
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Length of the longest framed example, `[BOS] [TASK] x [SEP] y [EOS]`.
    pub fn max_framed_len(&self) -> usize {
        let (x, y) = match self.name {
            TaskKind::Modadd => (2 * self.max_len + 1, self.max_len),
            _ => (self.max_len, self.max_len),
        };
        x + y + 4
    }

    pub fn validate(&self, alphabet_limit: usize) -> Result<()> {
        let field = |f: &str| format!("tasks.{}.{f}", self.name);
        if self.alphabet == 0 || self.alphabet > alphabet_limit {
            return Err(Error::config(
                field("alphabet"),
                format!("must be in 1..={alphabet_limit}"),
            ));
        }
        if self.name == TaskKind::Modadd && self.alphabet < 2 {
            return Err(Error::config(field("alphabet"), "modadd needs at least 2 digits"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(field("min_len"), "need 1 <= min_len <= max_len"));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::config(field("n_train"), "sample counts must be positive"));
        }
        Ok(())
    }
}

/// Shared character-level vocabulary: specials, one tag per task kind, then
/// the alphabet symbols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub alphabet: usize,
}

impl Tokenizer {
    pub fn new(alphabet: usize) -> Result<Self> {
        if alphabet == 0 || alphabet > SYMBOLS.len() {
            return Err(Error::config(
                "alphabet",
                format!("must be in 1..={}", SYMBOLS.len()),
            ));
        }
        Ok(Self { alphabet })
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL + TaskKind::ALL.len() + self.alphabet
    }

    pub fn tag(&self, task: TaskKind) -> usize {
        N_SPECIAL + task.index()
    }

    pub fn symbol(&self, digit: usize) -> usize {
        debug_assert!(digit < self.alphabet);
        N_SPECIAL + TaskKind::ALL.len() + digit
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                if c == '+' {
                    return Ok(PLUS);
                }
                SYMBOLS
                    .chars()
                    .take(self.alphabet)
                    .position(|s| s == c)
                    .map(|d| self.symbol(d))
                    .ok_or_else(|| Error::Data(format!("character `{c}` not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let base = N_SPECIAL + TaskKind::ALL.len();
        tokens
            .iter()
            .map(|&t| match t {
                PLUS => Ok('+'),
                t if t >= base && t < base + self.alphabet => {
                    Ok(SYMBOLS.as_bytes()[t - base] as char)
                }
                t => Err(Error::Data(format!("token {t} is not a text symbol"))),
            })
            .collect()
    }

    /// JSON map written alongside datasets.
    pub fn to_json(&self) -> serde_json::Value {
        let mut symbols = serde_json::Map::new();
        for (d, c) in SYMBOLS.chars().take(self.alphabet).enumerate() {
            symbols.insert(c.to_string(), self.symbol(d).into());
        }
        let tags: serde_json::Map<String, serde_json::Value> = TaskKind::ALL
            .iter()
            .map(|&k| (k.name().to_string(), self.tag(k).into()))
            .collect();
        serde_json::json!({
            "alphabet": self.alphabet,
            "vocab_size": self.vocab_size(),
            "specials": { "bos": BOS, "sep": SEP, "eos": EOS, "plus": PLUS },
            "task_tags": tags,
            "symbols": symbols,
        })
    }
}

/// One `(prompt, target)` pair as text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub target: String,
}

/// A framed, tokenized example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    /// `[BOS] [TASK] x [SEP]`.
    pub prompt: Vec<usize>,
    /// `y [EOS]`.
    pub response: Vec<usize>,
}

impl Encoded {
    pub fn full(&self) -> Vec<usize> {
        let mut v = self.prompt.clone();
        v.extend_from_slice(&self.response);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

pub fn encode_example(tok: &Tokenizer, task: TaskKind, ex: &Example) -> Result<Encoded> {
    if ex.target.is_empty() {
        return Err(Error::Data("zero-length target".into()));
    }
    let mut prompt = vec![BOS, tok.tag(task)];
    prompt.extend(tok.encode(&ex.prompt)?);
    prompt.push(SEP);
    let mut response = tok.encode(&ex.target)?;
    response.push(EOS);
    Ok(Encoded { prompt, response })
}

fn digits_to_string(digits: &[usize]) -> String {
    digits.iter().map(|&d| SYMBOLS.as_bytes()[d] as char).collect()
}

/// `(a + b) mod base^width` with both operands written in `width` digits.
pub fn modadd_digits(a: &[usize], b: &[usize], base: usize) -> Vec<usize> {
    let width = a.len();
    let mut out = vec![0; width];
    let mut carry = 0;
    for i in (0..width).rev() {
        let s = a[i] + b[i] + carry;
        out[i] = s % base;
        carry = s / base;
    }
    out
}

fn solve(task: TaskKind, x: &[usize], y_operand: Option<&[usize]>, base: usize) -> Vec<usize> {
    match task {
        TaskKind::Copy => x.to_vec(),
        TaskKind::Reverse => x.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut v = x.to_vec();
            v.sort_unstable();
            v
        }
        TaskKind::Modadd => modadd_digits(x, y_operand.expect("second operand"), base),
    }
}

fn split_bucket(task: TaskKind, prompt: &str) -> bool {
    let digest = Sha256::digest(format!("{}|{prompt}", task.name()).as_bytes());
    // one in five prompts belongs to the eval split
    digest[0] % 5 == 0
}

/// Deterministic generation with a hash partition of the prompt space:
/// a prompt can only ever land in one split.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate(SYMBOLS.len())?;
    let mut rng = RngState::new(spec.seed).substream(spec.name.name());
    let mut train = Vec::with_capacity(spec.n_train);
    let mut eval = Vec::with_capacity(spec.n_eval);
    let mut seen_eval = HashSet::new();
    let max_attempts = 200 * (spec.n_train + spec.n_eval) + 10_000;
    let mut attempts = 0;
    while train.len() < spec.n_train || eval.len() < spec.n_eval {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!(
                "could not draw {} train / {} eval distinct examples for `{}`; the prompt space is too small",
                spec.n_train, spec.n_eval, spec.name
            )));
        }
        let len = rng.int_inclusive(spec.min_len, spec.max_len);
        let x: Vec<usize> = (0..len).map(|_| rng.below(spec.alphabet)).collect();
        let (prompt, target) = if spec.name == TaskKind::Modadd {
            let b: Vec<usize> = (0..len).map(|_| rng.below(spec.alphabet)).collect();
            let y = solve(spec.name, &x, Some(&b), spec.alphabet);
            (
                format!("{}+{}", digits_to_string(&x), digits_to_string(&b)),
                digits_to_string(&y),
            )
        } else {
            let y = solve(spec.name, &x, None, spec.alphabet);
            (digits_to_string(&x), digits_to_string(&y))
        };
        let ex = Example { prompt, target };
        if split_bucket(spec.name, &ex.prompt) {
            if eval.len() < spec.n_eval && seen_eval.insert(ex.prompt.clone()) {
                eval.push(ex);
            }
        } else if train.len() < spec.n_train {
            train.push(ex);
        }
    }
    Ok(Dataset {
        task: spec.name,
        train,
        eval,
    })
}

/// Greedy decode of the prompt; returns the generated response tokens.
pub fn generate_response(
    params: &ModelParams,
    cfg: &ModelConfig,
    enc: &Encoded,
) -> Result<Vec<usize>> {
    let out = greedy_decode(params, cfg, &enc.prompt, enc.response.len(), Some(EOS))?;
    Ok(out[enc.prompt.len()..].to_vec())
}

/// Exact match: the decoded response equals `y [EOS]` token for token.
pub fn is_correct(params: &ModelParams, cfg: &ModelConfig, enc: &Encoded) -> Result<bool> {
    Ok(generate_response(params, cfg, enc)? == enc.response)
}

/// Fraction of encoded examples whose greedy decode exactly matches.
pub fn accuracy(params: &ModelParams, cfg: &ModelConfig, encoded: &[Encoded]) -> Result<f64> {
    if encoded.is_empty() {
        return Ok(0.0);
    }
    let flags = crate::parallel::map_ordered(encoded, |e| is_correct(params, cfg, e))?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / encoded.len() as f64)
}

/// Fraction of examples whose greedy decode exactly matches the target.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    tok: &Tokenizer,
    task: TaskKind,
    examples: &[Example],
) -> Result<f64> {
    let encoded = encode_all(tok, task, examples)?;
    accuracy(params, cfg, &encoded)
}

pub fn encode_all(tok: &Tokenizer, task: TaskKind, examples: &[Example]) -> Result<Vec<Encoded>> {
    examples.iter().map(|e| encode_example(tok, task, e)).collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
