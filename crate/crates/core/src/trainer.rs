//! Masked autoregressive loss, Adam with gradient gating, and the
//! single-task and continual training loops.
//!
//! One optimizer step: raw gradients → element-wise gate on gated tensors →
//! global-norm clip over the trainable set → Adam update.

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionConfig;
use crate::error::{Error, Result};
use crate::importance::{build_prior, historical_gate, select_correct, GateMask, ImportanceConfig, ImportancePrior};
use crate::model::{backward, forward, ModelConfig, ModelParams, ParamRole};
use crate::numerics::{Matrix, RngState};
use crate::parallel::map_ordered;
use crate::tasks::{accuracy, Encoded, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Full,
    Lora,
}

/// Where the gate multiplies in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatePlacement {
    /// Raw gradients, before clipping and the moment updates.
    Gradient,
    /// The Adam step of each element. Gradients still enter the moments
    /// ungated.
    Update,
}

/// Which full fine-tuning tensors receive a gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateScope {
    /// Attention projections and FFN weights and biases.
    Blocks,
    /// Blocks plus the token/position embeddings and the unembedding.
    Extended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `None` picks 3e-4 for full fine-tuning and 1e-3 for LoRA.
    pub learning_rate: Option<f64>,
    /// Optimizer steps per stage.
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub gate: bool,
    pub gate_placement: GatePlacement,
    pub gate_scope: GateScope,
    /// Attribute the live continual model θ_t instead of a fresh
    /// single-task model θ'_t when building priors.
    pub attribute_live_model: bool,
    /// Upper bound on candidate samples per task for prior construction.
    pub prior_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: None,
            steps: 2000,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            mode: TrainMode::Full,
            gate: false,
            gate_placement: GatePlacement::Gradient,
            gate_scope: GateScope::Blocks,
            attribute_live_model: false,
            prior_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.mode {
            TrainMode::Full => 3e-4,
            TrainMode::Lora => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be non-negative"));
        }
        if self.prior_samples == 0 {
            return Err(Error::config("train.prior_samples", "must be at least 1"));
        }
        Ok(())
    }
}

/// Which tensors the optimizer updates.
pub fn is_trainable(role: ParamRole, mode: TrainMode) -> bool {
    match mode {
        TrainMode::Full => role != ParamRole::Lora,
        TrainMode::Lora => role == ParamRole::Lora,
    }
}

/// Which tensors receive a gate.
pub fn is_gated(role: ParamRole, cfg: &TrainConfig) -> bool {
    match (cfg.mode, cfg.gate_scope) {
        (TrainMode::Full, GateScope::Blocks) => role == ParamRole::BlockWeight,
        (TrainMode::Full, GateScope::Extended) => matches!(
            role,
            ParamRole::BlockWeight | ParamRole::Embedding | ParamRole::Unembedding
        ),
        (TrainMode::Lora, _) => role == ParamRole::Lora,
    }
}

/// Names and shapes of the gated tensor set.
pub fn gated_shapes(params: &ModelParams, cfg: &TrainConfig) -> Vec<(String, (usize, usize))> {
    params
        .tensors()
        .into_iter()
        .filter(|(_, role, _)| is_gated(*role, cfg))
        .map(|(n, _, m)| (n, m.shape()))
        .collect()
}

/// Masked mean negative log-likelihood of one sequence and its gradient.
/// `targets[i]` is the label for position `i`; positions with `mask[i]`
/// false do not contribute.
pub fn masked_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &[usize],
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, ModelParams)> {
    if targets.len() != inputs.len() || mask.len() != inputs.len() {
        return Err(Error::Data("inputs, targets and mask differ in length".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Data("zero-length target".into()));
    }
    let trace = forward(params, inputs, cfg)?;
    let v = cfg.vocab_size;
    let mut dlogits = Matrix::zeros(inputs.len(), v);
    let mut loss = 0.0;
    for i in (0..inputs.len()).filter(|&i| mask[i]) {
        let t = targets[i];
        if t >= v {
            return Err(Error::Data(format!("target token {t} outside vocabulary of {v}")));
        }
        let row = trace.logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[t];
        let d = dlogits.row_mut(i);
        for (j, o) in d.iter_mut().enumerate() {
            *o = (row[j] - log_z).exp() / n as f64;
        }
        d[t] -= 1.0 / n as f64;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::numerical("loss", format!("non-finite loss {loss}")));
    }
    let grads = backward(params, &trace, cfg, &dlogits)?;
    Ok((loss, grads))
}

/// Loss over the response (`y [EOS]`) positions of one framed example.
pub fn example_loss(params: &ModelParams, cfg: &ModelConfig, enc: &Encoded) -> Result<(f64, ModelParams)> {
    if enc.response.is_empty() {
        return Err(Error::Data("zero-length target".into()));
    }
    let full = enc.full();
    let inputs = &full[..full.len() - 1];
    let targets = &full[1..];
    let mask: Vec<bool> = (0..inputs.len()).map(|i| i + 1 >= enc.prompt.len()).collect();
    masked_loss(params, cfg, inputs, targets, &mask)
}

/// Mean over the batch of per-example mean token NLL, with gradients
/// reduced in batch order.
pub fn loss_and_grads(params: &ModelParams, cfg: &ModelConfig, batch: &[&Encoded]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let per = map_ordered(batch, |e| example_loss(params, cfg, e))?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total = params.zeros_like();
    for (l, g) in &per {
        loss += l * scale;
        for (t, s) in total.tensors_mut().into_iter().zip(g.tensors()) {
            t.axpy(scale, s.2)?;
        }
    }
    Ok((loss, total))
}

/// Adam moments for every parameter tensor (unused for frozen ones).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Gradients as they enter the Adam moment updates.
pub struct PreparedGradients {
    /// One entry per parameter tensor; `None` for frozen tensors.
    pub grads: Vec<Option<Matrix>>,
    /// Global norm before clipping.
    pub norm: f64,
}

/// Gate, then clip. Exposed separately so the effective gradient can be
/// inspected.
pub fn prepare_gradients(
    params: &ModelParams,
    grads: &ModelParams,
    gate: Option<&GateMask>,
    cfg: &TrainConfig,
) -> Result<PreparedGradients> {
    let p = params.tensors();
    let g = grads.tensors();
    if p.len() != g.len() {
        return Err(Error::Data("gradient set does not mirror the parameters".into()));
    }
    let mut out = Vec::with_capacity(p.len());
    let mut used_gates = 0;
    for ((name, role, pm), (_, _, gm)) in p.iter().zip(&g) {
        if pm.shape() != gm.shape() {
            return Err(Error::Shape {
                op: "gradient",
                left: gm.shape(),
                right: pm.shape(),
            });
        }
        if !is_trainable(*role, cfg.mode) {
            out.push(None);
            continue;
        }
        let mut gm = (*gm).clone();
        if let Some(mask) = gate.filter(|_| is_gated(*role, cfg)) {
            let gv = mask
                .tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("gate lacks tensor {name}")))?;
            if gv.shape() != gm.shape() {
                return Err(Error::Shape {
                    op: "gate",
                    left: gv.shape(),
                    right: gm.shape(),
                });
            }
            if cfg.gate_placement == GatePlacement::Gradient {
                gm = gm.hadamard(gv)?;
            }
            used_gates += 1;
        }
        out.push(Some(gm));
    }
    if let Some(mask) = gate {
        if used_gates != mask.tensors.len() {
            return Err(Error::Data(format!(
                "gate holds {} tensors but only {used_gates} are gated in {:?} mode, {:?} scope",
                mask.tensors.len(),
                cfg.mode,
                cfg.gate_scope
            )));
        }
    }
    let norm = out.iter().flatten().map(|m| m.sum_sq()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::numerical("gradient", format!("non-finite gradient norm {norm}")));
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = cfg.grad_clip / norm;
        for m in out.iter_mut().flatten() {
            *m = m.scale(s);
        }
    }
    Ok(PreparedGradients { grads: out, norm })
}

/// One optimizer step. Returns the pre-clip gradient norm.
pub fn apply_gated_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    gate: Option<&GateMask>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let prepared = prepare_gradients(params, grads, gate, cfg)?;
    state.t += 1;
    let t = state.t as i32;
    let lr = cfg.lr();
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    for (i, (p, g)) in params.tensors_mut().into_iter().zip(&prepared.grads).enumerate() {
        let Some(g) = g else { continue };
        let update_gate = match (gate, cfg.gate_placement) {
            (Some(mask), GatePlacement::Update) => mask.tensors.get(&names[i]).map(Matrix::data),
            _ => None,
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mut update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            if let Some(gv) = update_gate {
                update *= gv[j];
            }
            *w -= lr * (update + cfg.weight_decay * *w);
        }
    }
    Ok(prepared.norm)
}

/// Trained parameters and the per-step loss curve.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub losses: Vec<f64>,
}

/// Batch sampling stream for a task; shared by single-task and continual
/// training so that stage 1 of a continual run equals single-task training.
fn batch_rng(cfg: &TrainConfig, task: TaskKind) -> RngState {
    RngState::new(cfg.seed).substream(&format!("batches.{}", task.name()))
}

/// Runs `cfg.steps` optimizer steps on `data` with a fixed gate (or none).
pub fn train_stage(
    init: &ModelParams,
    model_cfg: &ModelConfig,
    task: TaskKind,
    data: &[Encoded],
    gate: Option<&GateMask>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("no training data for task `{task}`")));
    }
    if cfg.mode == TrainMode::Lora && init.blocks.iter().any(|b| b.lora.is_none()) {
        return Err(Error::config("train.mode", "LoRA mode needs a model with LoRA factors"));
    }
    let mut params = init.clone();
    let mut state = AdamState::new(&params);
    let mut rng = batch_rng(cfg, task);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Encoded> = (0..cfg.batch_size).map(|_| &data[rng.below(data.len())]).collect();
        let (loss, grads) = loss_and_grads(&params, model_cfg, &batch)?;
        apply_gated_step(&mut params, &grads, gate, &mut state, cfg)?;
        if !params.all_finite() {
            return Err(Error::numerical(
                format!("training step {step}"),
                "parameters diverged",
            ));
        }
        losses.push(loss);
        if step % 250 == 0 {
            log::debug!("{task} step {step} loss {loss:.4}");
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Ungated training of a single task.
pub fn train_single_task(
    init: &ModelParams,
    model_cfg: &ModelConfig,
    task: TaskKind,
    data: &[Encoded],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_stage(init, model_cfg, task, data, None, cfg)
}

/// Everything a continual run needs about one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub kind: TaskKind,
    pub train: Vec<Encoded>,
    pub eval: Vec<Encoded>,
}

#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    /// θ_t after every stage; the last entry is the final model.
    pub stage_params: Vec<ModelParams>,
    /// `accuracy[task][stage]` on each task's eval split.
    pub accuracy: Vec<Vec<f64>>,
    pub losses: Vec<Vec<f64>>,
    /// Priors of completed tasks (gated runs only).
    pub priors: Vec<ImportancePrior>,
    /// Gate used at each stage (gated runs only).
    pub gates: Vec<GateMask>,
}

/// Prior for one task from a given model, over the correctly generated
/// examples among the first `cfg.prior_samples` training examples.
pub fn task_prior(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    task_id: usize,
    task: &TaskData,
    cfg: &TrainConfig,
    attr: &AttributionConfig,
    imp: &ImportanceConfig,
) -> Result<ImportancePrior> {
    let pool = &task.train[..task.train.len().min(cfg.prior_samples)];
    let correct = select_correct(params, model_cfg, task.kind, pool)?;
    log::info!(
        "prior for task {task_id} ({}) from {}/{} correct samples",
        task.kind,
        correct.len(),
        pool.len()
    );
    let chosen: Vec<&Encoded> = correct.iter().map(|&i| &pool[i]).collect();
    let roles: Vec<(String, ParamRole)> = params.tensors().into_iter().map(|(n, r, _)| (n, r)).collect();
    let keep = move |name: &str| {
        roles
            .iter()
            .any(|(n, r)| n == name && is_gated(*r, cfg))
    };
    build_prior(params, model_cfg, task.kind, task_id, &chosen, attr, imp, &keep)
}

/// Sequential fine-tuning over `tasks`, optionally gated by the priors of
/// completed tasks.
pub fn train_continual(
    init: &ModelParams,
    model_cfg: &ModelConfig,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    attr: &AttributionConfig,
    imp: &ImportanceConfig,
) -> Result<ContinualOutcome> {
    if tasks.len() < 2 {
        return Err(Error::config("tasks", "continual training needs at least two tasks"));
    }
    let n = tasks.len();
    let mut current = init.clone();
    let mut out = ContinualOutcome {
        stage_params: Vec::with_capacity(n),
        accuracy: vec![vec![0.0; n]; n],
        losses: Vec::with_capacity(n),
        priors: Vec::new(),
        gates: Vec::new(),
    };
    for (stage, task) in tasks.iter().enumerate() {
        let gate = if cfg.gate {
            let refs: Vec<&ImportancePrior> = out.priors.iter().collect();
            Some(historical_gate(&refs, gated_shapes(&current, cfg).iter().map(|(n, s)| (n.as_str(), *s)))?)
        } else {
            None
        };
        let trained = train_stage(&current, model_cfg, task.kind, &task.train, gate.as_ref(), cfg)?;
        current = trained.params;
        out.losses.push(trained.losses);
        for (t, other) in tasks.iter().enumerate() {
            out.accuracy[t][stage] = accuracy(&current, model_cfg, &other.eval)?;
        }
        log::info!(
            "stage {} ({}) accuracies {:?}",
            stage + 1,
            task.kind,
            (0..n).map(|t| out.accuracy[t][stage]).collect::<Vec<_>>()
        );
        if cfg.gate && stage + 1 < n {
            // θ'_1 is θ_1: stage 1 starts from the same init with the same stream
            let source = if cfg.attribute_live_model || stage == 0 {
                current.clone()
            } else {
                train_single_task(init, model_cfg, task.kind, &task.train, cfg)?.params
            };
            out.priors.push(task_prior(&source, model_cfg, stage + 1, task, cfg, attr, imp)?);
        }
        if let Some(g) = gate {
            out.gates.push(g);
        }
        out.stage_params.push(current.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny(lora: Option<usize>) -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            d_head: 4,
            vocab_size: 9,
            max_seq_len: 12,
            lora_rank: lora,
            seed: 3,
        };
        let mut p = init_params(&cfg, &mut RngState::new(3));
        // larger weights make gradients less degenerate
        for t in p.tensors_mut() {
            *t = t.scale(20.0);
        }
        if lora.is_some() {
            for b in p.blocks.iter_mut() {
                let l = b.lora.as_mut().unwrap();
                for f in l.q.iter_mut().chain(l.k.iter_mut()).chain(l.v.iter_mut()) {
                    f.b = RngState::new(5).normal_matrix(f.b.rows(), f.b.cols(), 0.3);
                }
                l.o.b = RngState::new(6).normal_matrix(l.o.b.rows(), l.o.b.cols(), 0.3);
            }
        }
        (cfg, p)
    }

    fn enc(prompt: &[usize], response: &[usize]) -> Encoded {
        Encoded {
            prompt: prompt.to_vec(),
            response: response.to_vec(),
        }
    }

    fn fd_check(cfg: &ModelConfig, params: &ModelParams, examples: &[Encoded]) {
        let batch: Vec<&Encoded> = examples.iter().collect();
        let (_, grads) = loss_and_grads(params, cfg, &batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            let len = params.tensors()[ti].2.len();
            for j in 0..len {
                let mut p = params.clone();
                let base = p.tensors()[ti].2.data()[j];
                p.tensors_mut()[ti].data_mut()[j] = base + h;
                let up = loss_and_grads(&p, cfg, &batch).unwrap().0;
                p.tensors_mut()[ti].data_mut()[j] = base - h;
                let down = loss_and_grads(&p, cfg, &batch).unwrap().0;
                let num = (up - down) / (2.0 * h);
                let ana = grads.tensors()[ti].2.data()[j];
                // central differences carry ~1e-10 absolute roundoff at h = 1e-5
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-5);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst:.3e}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cfg, p) = tiny(None);
        fd_check(&cfg, &p, &[enc(&[0, 4, 8, 7, 1], &[7, 8, 2]), enc(&[0, 5, 6, 1], &[6, 2])]);
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        let (cfg, p) = tiny(Some(2));
        fd_check(&cfg, &p, &[enc(&[0, 4, 8, 1], &[8, 2])]);
    }

    #[test]
    fn loss_masking_ignores_prompt_labels() {
        let (cfg, p) = tiny(None);
        let inputs = [0, 4, 7, 8, 1, 8];
        let mask = [false, false, false, false, true, true];
        let a = masked_loss(&p, &cfg, &inputs, &[4, 7, 8, 1, 8, 7], &mask).unwrap().0;
        let b = masked_loss(&p, &cfg, &inputs, &[3, 3, 5, 6, 8, 7], &mask).unwrap().0;
        assert_eq!(a, b);
        assert!(masked_loss(&p, &cfg, &inputs, &[0; 6], &[false; 6]).is_err());
        assert!(example_loss(&p, &cfg, &enc(&[0, 4], &[])).is_err());
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let cfg = ModelConfig { seed: 0, ..tiny(None).0 };
        let p = init_params(&cfg, &mut RngState::new(1));
        let mut rng = RngState::new(2);
        let batch: Vec<Encoded> = (0..8)
            .map(|_| enc(&[0, 4, rng.below(9), 1], &[rng.below(9), rng.below(9), 2]))
            .collect();
        let refs: Vec<&Encoded> = batch.iter().collect();
        let (loss, _) = loss_and_grads(&p, &cfg, &refs).unwrap();
        let uniform = (cfg.vocab_size as f64).ln();
        assert!((loss - uniform).abs() < 0.2 * uniform, "{loss} vs {uniform}");
    }

    #[test]
    fn half_gate_halves_effective_gradient() {
        let (cfg, p) = tiny(None);
        let e = enc(&[0, 4, 8, 1], &[8, 2]);
        let (_, grads) = loss_and_grads(&p, &cfg, &[&e]).unwrap();
        let tcfg = TrainConfig { grad_clip: 0.0, ..Default::default() };
        let mut gate = GateMask::ones(gated_shapes(&p, &tcfg).iter().map(|(n, s)| (n.as_str(), *s)));
        gate.tensors.get_mut("block0.w1").unwrap().set(1, 2, 0.5);
        let prepared = prepare_gradients(&p, &grads, Some(&gate), &tcfg).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _, _)| n).collect();
        let i = names.iter().position(|n| n == "block0.w1").unwrap();
        let eff = prepared.grads[i].as_ref().unwrap();
        assert_eq!(eff.get(1, 2), 0.5 * grads.blocks[0].w1.get(1, 2));
        assert_eq!(eff.get(0, 0), grads.blocks[0].w1.get(0, 0));
        // frozen roles are absent in LoRA mode
        let lcfg = TrainConfig { mode: TrainMode::Lora, ..tcfg };
        let prepared = prepare_gradients(&p, &grads, None, &lcfg).unwrap();
        assert!(prepared.grads.iter().all(Option::is_none));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (cfg, p) = tiny(None);
        let e = enc(&[0, 4, 8, 1], &[8, 2]);
        let (_, grads) = loss_and_grads(&p, &cfg, &[&e]).unwrap();
        let tcfg = TrainConfig { grad_clip: 1e-3, ..Default::default() };
        let prepared = prepare_gradients(&p, &grads, None, &tcfg).unwrap();
        assert!(prepared.norm > 1e-3);
        let after: f64 = prepared.grads.iter().flatten().map(|m| m.sum_sq()).sum::<f64>().sqrt();
        assert!((after - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn lr_defaults_follow_mode() {
        assert_eq!(TrainConfig::default().lr(), 3e-4);
        assert_eq!(TrainConfig { mode: TrainMode::Lora, ..Default::default() }.lr(), 1e-3);
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
    }
}
