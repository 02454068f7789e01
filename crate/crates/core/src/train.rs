//! Training driver: Adam with decoupled weight decay, linear warmup then
//! linear decay to zero, optional global-norm clipping, periodic validation
//! perplexity and best-checkpoint tracking.
//!
//! Runs are deterministic given the seed: each epoch visits the examples in
//! a permutation drawn from `shuffle_seed(seed, epoch)`, and the final
//! partial batch of an epoch is kept.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{FormattedExample, Mode};
use crate::metrics::{self, MetricsError};
use crate::model::{Checkpoint, CheckpointError, ModelConfig, ModelError, TransformerModel};
use crate::rng::{rng_from_seed, shuffle_seed};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    NoExamples,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<TransformerModel> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mode: Mode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub grad_clip_norm: Option<f64>,
    pub eval_every: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            mode: Mode::EmoPrepend,
            learning_rate: 3e-4,
            batch_size: 16,
            max_steps: 1000,
            warmup_steps: 100,
            grad_clip_norm: Some(1.0),
            eval_every: 100,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.warmup_steps > self.max_steps {
            return bad(format!("warmup_steps {} exceeds max_steps {}", self.warmup_steps, self.max_steps));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Learning rate used for the update at 0-based `step`:
    /// `lr·(step+1)/warmup` during warmup, then `lr·(max−step)/(max−warmup)`.
    /// Equals 0 at `step = max_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let lr = self.learning_rate;
        if step >= self.max_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        lr * (self.max_steps - step) as f64 / (self.max_steps - self.warmup_steps) as f64
    }

    /// Applies `key=value` overrides. Keys use dashes or underscores.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(k: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))
        }
        match key.replace('-', "_").as_str() {
            "stage" => self.stage = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "learning_rate" | "lr" => self.learning_rate = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "warmup_steps" => self.warmup_steps = p(key, value)?,
            "grad_clip_norm" => {
                self.grad_clip_norm = if value == "none" { None } else { Some(p(key, value)?) };
            }
            "eval_every" => self.eval_every = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            other => return Err(format!("unknown training key {other:?}")),
        }
        Ok(())
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One Adam step with decoupled weight decay on coordinates where `decay` is set.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay: &[bool], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + cfg.adam_eps);
            if decay[i] {
                update += cfg.weight_decay * params[i];
            }
            params[i] -= lr * update;
        }
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    /// Number of updates applied so far (1-based).
    pub step: usize,
    pub train_loss: f64,
    pub valid_ppl: Option<f64>,
}

/// Writes history as `step,train_loss,valid_ppl` (empty cell when not evaluated).
pub fn write_history_csv<W: Write>(mut w: W, history: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(w, "step,train_loss,valid_ppl")?;
    for row in history {
        match row.valid_ppl {
            Some(p) => writeln!(w, "{},{},{}", row.step, row.train_loss, p)?,
            None => writeln!(w, "{},{},", row.step, row.train_loss)?,
        }
    }
    Ok(())
}

/// Position in the epoch-shuffled example stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cursor {
    pub epoch: u64,
    pub offset: usize,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TransformerModel,
    pub adam: AdamState,
    pub step: usize,
    pub cursor: Cursor,
    pub best_ppl: Option<f64>,
}

impl TrainState {
    pub fn fresh(model: TransformerModel) -> Self {
        let n = model.params().len();
        TrainState { model, adam: AdamState::new(n), step: 0, cursor: Cursor::default(), best_ppl: None }
    }

    /// Model checkpoint plus `train.*` keys and `adam.m` / `adam.v` tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.set("train.step", self.step);
        ckpt.set("train.adam_t", self.adam.t);
        ckpt.set("train.epoch", self.cursor.epoch);
        ckpt.set("train.offset", self.cursor.offset);
        ckpt.set("train.best_ppl", self.best_ppl.map_or("none".to_string(), |p| format!("{:016x}", p.to_bits())));
        let n = self.adam.m.len();
        ckpt.push_tensor("adam.m", &[n], &self.adam.m);
        ckpt.push_tensor("adam.v", &[n], &self.adam.v);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let model = TransformerModel::from_checkpoint(ckpt)?;
        let n = model.params().len();
        let best_raw: String = ckpt.require("train.best_ppl")?;
        let best_ppl = if best_raw == "none" {
            None
        } else {
            Some(f64::from_bits(
                u64::from_str_radix(&best_raw, 16)
                    .map_err(|_| CheckpointError::Malformed("bad train.best_ppl".into()))?,
            ))
        };
        Ok(TrainState {
            adam: AdamState {
                m: ckpt.expect_tensor("adam.m", &[n])?.data.clone(),
                v: ckpt.expect_tensor("adam.v", &[n])?.data.clone(),
                t: ckpt.require("train.adam_t")?,
            },
            step: ckpt.require("train.step")?,
            cursor: Cursor { epoch: ckpt.require("train.epoch")?, offset: ckpt.require("train.offset")? },
            best_ppl,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_checkpoint().to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::from_bytes(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final state after the last step (model, optimizer, cursor).
    pub state: TrainState,
    /// Model with the lowest validation perplexity seen in this run, if any evaluation ran.
    pub best: Option<(usize, TransformerModel)>,
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    pub fn model(&self) -> &TransformerModel {
        &self.state.model
    }

    /// Best-validation model, falling back to the final one.
    pub fn best_model(&self) -> &TransformerModel {
        self.best.as_ref().map_or(&self.state.model, |(_, m)| m)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(shuffle_seed(seed, epoch)));
    order
}

/// Trains from a fresh optimizer state. See [`continue_training`].
pub fn run_training(
    model: TransformerModel,
    examples: &[FormattedExample],
    valid: &[FormattedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    continue_training(TrainState::fresh(model), examples, valid, cfg, cfg.max_steps)
}

/// Runs updates from `state.step` until `stop_at` (capped at `cfg.max_steps`).
///
/// Validation perplexity is computed on the masked tokens of `valid` after
/// every `eval_every`-th update and after the last one. A non-finite loss,
/// gradient or parameter aborts with [`TrainError::Diverged`] carrying the
/// model from before the failing step.
pub fn continue_training(
    mut state: TrainState,
    examples: &[FormattedExample],
    valid: &[FormattedExample],
    cfg: &TrainConfig,
    stop_at: usize,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let stop_at = stop_at.min(cfg.max_steps);
    let decay = state.model.layout().decay_mask();
    let mut history = Vec::new();
    let mut best: Option<(usize, TransformerModel)> = None;
    let mut order = epoch_order(examples.len(), cfg.seed, state.cursor.epoch);

    while state.step < stop_at {
        if state.cursor.offset >= examples.len() {
            state.cursor = Cursor { epoch: state.cursor.epoch + 1, offset: 0 };
            order = epoch_order(examples.len(), cfg.seed, state.cursor.epoch);
        }
        let end = (state.cursor.offset + cfg.batch_size).min(examples.len());
        // Sorted so the loss reduction order depends only on batch membership.
        let mut members = order[state.cursor.offset..end].to_vec();
        members.sort_unstable();
        let batch: Vec<&FormattedExample> = members.iter().map(|&i| &examples[i]).collect();
        let step = state.step;

        let mut lg = state.model.batch_loss_and_grads(&batch)?;
        if !lg.loss.is_finite() || !lg.grads.iter().all(|g| g.is_finite()) {
            return Err(TrainError::Diverged { step, last_good: Box::new(state.model) });
        }
        if let Some(max) = cfg.grad_clip_norm {
            clip_grad_norm(&mut lg.grads, max);
        }
        let before = state.model.params().to_vec();
        state.adam.step(state.model.params_mut(), &lg.grads, &decay, cfg.lr_at(step), cfg);
        if !state.model.all_finite() {
            state.model.params_mut().copy_from_slice(&before);
            return Err(TrainError::Diverged { step, last_good: Box::new(state.model) });
        }
        state.step += 1;
        state.cursor.offset = end;

        let mut row = HistoryRow { step: state.step, train_loss: lg.loss, valid_ppl: None };
        if !valid.is_empty() && (state.step % cfg.eval_every == 0 || state.step == stop_at) {
            let ppl = metrics::perplexity(&state.model, valid)?;
            row.valid_ppl = Some(ppl);
            if state.best_ppl.is_none_or(|b| ppl < b) {
                state.best_ppl = Some(ppl);
                best = Some((state.step, state.model.clone()));
            }
        }
        log::debug!("step {} loss {:.5} lr {:.3e}", row.step, row.train_loss, cfg.lr_at(step));
        history.push(row);
    }
    Ok(TrainOutcome { state, best, history })
}

/// Result of the two-arm transfer comparison.
#[derive(Debug, Clone)]
pub struct TransferReport {
    pub pretrain_history: Vec<HistoryRow>,
    pub pretrained_finetune_ppl: f64,
    pub scratch_finetune_ppl: f64,
    pub pretrained_history: Vec<HistoryRow>,
    pub scratch_history: Vec<HistoryRow>,
}

/// Pretrains on `generic` then fine-tunes on `train`, and fine-tunes a
/// second, freshly initialised model with the same budget for comparison.
/// Both arms start from `TransformerModel::init(config, init_seed)`.
/// Returns the pretrained-then-fine-tuned model.
#[allow(clippy::too_many_arguments)]
pub fn transfer_pipeline(
    config: ModelConfig,
    init_seed: u64,
    generic: &[FormattedExample],
    train: &[FormattedExample],
    valid: &[FormattedExample],
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
) -> Result<(TransformerModel, TransferReport), TrainError> {
    let init = TransformerModel::init(config, init_seed)?;
    let pre = if pretrain_cfg.max_steps == 0 {
        TrainOutcome { state: TrainState::fresh(init.clone()), best: None, history: Vec::new() }
    } else {
        run_training(init.clone(), generic, &[], pretrain_cfg)?
    };
    let (tuned, pretrained_history) = finetune_or_keep(pre.state.model, train, valid, finetune_cfg)?;
    let (scratch, scratch_history) = finetune_or_keep(init, train, valid, finetune_cfg)?;
    let report = TransferReport {
        pretrain_history: pre.history,
        pretrained_finetune_ppl: metrics::perplexity(&tuned, valid)?,
        scratch_finetune_ppl: metrics::perplexity(&scratch, valid)?,
        pretrained_history,
        scratch_history,
    };
    Ok((tuned, report))
}

fn finetune_or_keep(
    model: TransformerModel,
    train: &[FormattedExample],
    valid: &[FormattedExample],
    cfg: &TrainConfig,
) -> Result<(TransformerModel, Vec<HistoryRow>), TrainError> {
    if cfg.max_steps == 0 {
        return Ok((model, Vec::new()));
    }
    let out = run_training(model, train, valid, cfg)?;
    Ok((out.state.model, out.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_model(vocab: usize, seed: u64) -> TransformerModel {
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, context_len: 16, vocab_size: vocab };
        TransformerModel::init(cfg, seed).unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig { max_steps: steps, warmup_steps: 0, eval_every: 10, batch_size: 4, ..TrainConfig::default() }
    }

    fn toy_examples(n: usize) -> Vec<FormattedExample> {
        (0..n).map(|i| FormattedExample::plain((0..8).map(|j| ((i * 5 + j * 3) % 20) as u32).collect())).collect()
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig { learning_rate: 1.0, max_steps: 10, warmup_steps: 4, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 0.25);
        assert_eq!(c.lr_at(3), 1.0);
        assert_eq!(c.lr_at(4), 1.0);
        assert!((c.lr_at(7) - 0.5).abs() < 1e-12);
        assert_eq!(c.lr_at(10), 0.0);
        let no_warm = TrainConfig { warmup_steps: 0, ..c };
        assert_eq!(no_warm.lr_at(0), 1.0);
    }

    proptest! {
        #[test]
        fn schedule_piecewise_linear(max in 1usize..200, warm_frac in 0.0f64..1.0, lr in 1e-5f64..1.0) {
            let warm = ((max as f64) * warm_frac) as usize;
            let c = TrainConfig { learning_rate: lr, max_steps: max, warmup_steps: warm, ..TrainConfig::default() };
            prop_assert_eq!(c.lr_at(max), 0.0);
            prop_assert!((c.lr_at(0) - lr * (1.0f64).min(1.0 / warm as f64)).abs() < 1e-12);
            for s in 0..max {
                prop_assert!(c.lr_at(s) > 0.0 && c.lr_at(s) <= lr * (1.0 + 1e-12));
            }
        }

        #[test]
        fn clipping_bounds_norm(g in prop::collection::vec(-100.0f64..100.0, 1..50), max in 0.01f64..10.0) {
            let mut g = g;
            clip_grad_norm(&mut g, max);
            prop_assert!(global_norm(&g) <= max + 1e-9);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let m = tiny_model(20, 1);
        let exs = toy_examples(3);
        let c = TrainConfig { learning_rate: 0.0, batch_size: 3, ..cfg(5) };
        let out = run_training(m.clone(), &exs, &exs, &c).unwrap();
        assert_eq!(out.state.model, m);
        let first = out.history[0].train_loss;
        assert!(out.history.iter().all(|r| r.train_loss == first));
    }

    #[test]
    fn same_seed_same_history() {
        let exs = toy_examples(10);
        let c = TrainConfig { learning_rate: 1e-2, ..cfg(12) };
        let a = run_training(tiny_model(20, 3), &exs, &exs[..3], &c).unwrap();
        let b = run_training(tiny_model(20, 3), &exs, &exs[..3], &c).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state, b.state);
        assert_eq!(a.history.len(), 12);
        assert!(a.history[9].valid_ppl.is_some() && a.history[11].valid_ppl.is_some());
        assert!(a.history[4].valid_ppl.is_none());
    }

    #[test]
    fn overfits_single_example() {
        let ex = FormattedExample::plain(vec![1, 7, 3, 9, 4, 4, 12, 0]);
        let c = TrainConfig { learning_rate: 1e-3, batch_size: 1, ..cfg(500) };
        let model = TransformerModel::init(ModelConfig::desk(20), 5).unwrap();
        let out = run_training(model, &[ex.clone()], &[ex.clone()], &c).unwrap();
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 0.1, "final loss {last}");
        let ppl = metrics::perplexity(out.model(), &[ex]).unwrap();
        assert!(ppl >= 1.0 && ppl < 1.1);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let exs = toy_examples(7);
        let c = TrainConfig { learning_rate: 5e-3, batch_size: 3, warmup_steps: 2, ..cfg(9) };
        let full = run_training(tiny_model(20, 2), &exs, &exs[..2], &c).unwrap();

        let first = continue_training(TrainState::fresh(tiny_model(20, 2)), &exs, &exs[..2], &c, 4).unwrap();
        let bytes = first.state.to_checkpoint().to_bytes();
        let restored = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored, first.state);
        assert_eq!(restored.to_checkpoint().to_bytes(), bytes);
        let rest = continue_training(restored, &exs, &exs[..2], &c, 9).unwrap();

        let losses = |h: &[HistoryRow]| h.iter().map(|r| (r.step, r.train_loss)).collect::<Vec<_>>();
        let mut joined = losses(&first.history);
        joined.extend(losses(&rest.history));
        assert_eq!(joined, losses(&full.history));
        assert_eq!(rest.state.model, full.state.model);
    }

    #[test]
    fn divergence_is_reported_with_last_good_model() {
        let exs = toy_examples(2);
        let mut m = tiny_model(20, 1);
        m.tensor_mut("lnf.g").unwrap().fill(f64::INFINITY);
        let err = run_training(m.clone(), &exs, &[], &cfg(3)).unwrap_err();
        match err {
            TrainError::Diverged { step, last_good } => {
                assert_eq!(step, 0);
                assert_eq!(*last_good, m);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_overrides() {
        let mut c = TrainConfig::default();
        c.apply("learning-rate", "0.01").unwrap();
        c.apply("grad_clip_norm", "none").unwrap();
        c.apply("mode", "fine_tuned").unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.grad_clip_norm, None);
        assert_eq!(c.mode, Mode::FineTuned);
        assert!(c.apply("bogus", "1").is_err());
        assert!(c.apply("batch_size", "x").is_err());
        let bad = TrainConfig { warmup_steps: 20, max_steps: 10, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn history_csv() {
        let mut out = Vec::new();
        let rows = [
            HistoryRow { step: 1, train_loss: 2.5, valid_ppl: None },
            HistoryRow { step: 2, train_loss: 2.0, valid_ppl: Some(7.25) },
        ];
        write_history_csv(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,train_loss,valid_ppl\n1,2.5,\n2,2,7.25\n");
    }

    #[test]
    fn degenerate_transfer_equals_single_stage() {
        let exs = toy_examples(6);
        let mcfg = *tiny_model(20, 0).config();
        let pre = TrainConfig { learning_rate: 5e-3, stage: Stage::Pretrain, ..cfg(8) };
        let ft = TrainConfig { max_steps: 0, warmup_steps: 0, ..pre.clone() };
        let (model, report) = transfer_pipeline(mcfg, 4, &exs, &exs, &exs, &pre, &ft).unwrap();
        let single = run_training(TransformerModel::init(mcfg, 4).unwrap(), &exs, &[], &pre).unwrap();
        assert_eq!(model, single.state.model);
        let ppl = metrics::perplexity(&single.state.model, &exs).unwrap();
        assert_eq!(report.pretrained_finetune_ppl, ppl);
    }
}
