//! Masked cross-entropy training with warmup, accuracy-based early stopping and gradient checks.

use std::ops::ControlFlow;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, TrainLogEntry};
use crate::databuild::PackedBatchSet;
use crate::model::{ModelConfigError, ToyLm, ToyLmConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data seq_len {data} does not match model seq_len {model}")]
    SeqLenMismatch { data: usize, model: usize },
    #[error("data vocab {data} exceeds model vocab {model}")]
    VocabMismatch { data: usize, model: usize },
    #[error("no segments to train on")]
    EmptyData,
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Model(#[from] ModelConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Which tokens the early-stopping accuracy is measured on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracySource {
    /// Every masked token of the training set, with the current weights.
    #[default]
    FullSet,
    /// Tokens of the batches seen since the previous check (pre-update predictions).
    RecentBatches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Steps between accuracy checks; 0 disables early stopping.
    pub check_interval: usize,
    pub accuracy_threshold: f64,
    pub max_steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub accuracy_source: AccuracySource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-4,
            warmup_steps: 2000,
            check_interval: 250,
            accuracy_threshold: 0.98,
            max_steps: 10_000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            accuracy_source: AccuracySource::FullSet,
        }
    }
}

impl TrainConfig {
    /// Schedule used for 7B-scale updates (peak 5e-5).
    pub fn large_model() -> Self {
        TrainConfig { peak_lr: 5e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.accuracy_threshold > 0.0 && self.accuracy_threshold <= 1.0) {
            return Err(TrainError::Config(format!("accuracy_threshold {} not in (0, 1]", self.accuracy_threshold)));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(TrainError::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(TrainError::Config("adam betas must be in [0, 1) and eps positive".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate for 1-based `step`: linear warmup to `peak_lr`, then constant.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.peak_lr
    } else {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    }
}

pub fn init_model(cfg: ToyLmConfig) -> Result<Checkpoint, TrainError> {
    Ok(Checkpoint::new(ToyLm::init(cfg)?))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Reached the accuracy threshold at a check; `false` means it ran out of steps.
    pub converged: bool,
    pub steps_run: usize,
    pub last_accuracy: Option<f64>,
}

struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(cfg: OptimizerConfig, n: usize) -> Self {
        let (m, v) = match cfg {
            OptimizerConfig::Sgd => (Vec::new(), Vec::new()),
            OptimizerConfig::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        Optimizer { cfg, m, v, t: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.cfg {
            OptimizerConfig::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

fn check_shapes(model: &ToyLm, data: &PackedBatchSet) -> Result<(), TrainError> {
    let mc = model.config();
    if data.seq_len != mc.seq_len {
        return Err(TrainError::SeqLenMismatch { data: data.seq_len, model: mc.seq_len });
    }
    if data.vocab_size > mc.vocab_size {
        return Err(TrainError::VocabMismatch { data: data.vocab_size, model: mc.vocab_size });
    }
    if data.segments.is_empty() {
        return Err(TrainError::EmptyData);
    }
    Ok(())
}

/// Trains until the accuracy check passes or `max_steps` is reached.
pub fn train(model: Checkpoint, data: &PackedBatchSet, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_hook(model, data, cfg, |_, _| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every optimizer step (`step` is 1-based and
/// local to this call). Returning `Break` stops training without marking convergence.
pub fn train_with_hook<F>(
    mut ckpt: Checkpoint,
    data: &PackedBatchSet,
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(usize, &ToyLm) -> ControlFlow<()>,
{
    cfg.validate()?;
    check_shapes(&ckpt.model, data)?;
    let mut opt = Optimizer::new(cfg.optimizer, ckpt.model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let (mut recent_correct, mut recent_targets) = (0usize, 0usize);
    let mut last_accuracy = None;

    for step in 1..=cfg.max_steps {
        if cursor == order.len() {
            order = (0..data.segments.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let seg = &data.segments[order[cursor]];
        cursor += 1;
        let rows: Vec<(&[u32], &[bool])> = seg.rows(data.seq_len).collect();
        let bg = ckpt.model.loss_and_grad(&rows);
        let global_step = ckpt.step + 1;
        if !bg.loss.is_finite() || bg.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Divergence { step: global_step });
        }
        recent_correct += bg.n_correct;
        recent_targets += bg.n_targets;
        let lr = lr_at(cfg, step);
        opt.update(ckpt.model.params_mut(), &bg.grad, lr);
        ckpt.step = global_step;

        let mut entry = TrainLogEntry { step: global_step, loss: bg.loss, lr, masked_accuracy: None };
        let mut converged = false;
        if cfg.check_interval > 0 && step % cfg.check_interval == 0 {
            let acc = match cfg.accuracy_source {
                AccuracySource::FullSet => masked_accuracy(&ckpt.model, data),
                AccuracySource::RecentBatches => ratio(recent_correct, recent_targets),
            };
            recent_correct = 0;
            recent_targets = 0;
            entry.masked_accuracy = Some(acc);
            last_accuracy = Some(acc);
            converged = acc >= cfg.accuracy_threshold;
        }
        ckpt.train_log.push(entry);
        if converged {
            return Ok(TrainOutcome { checkpoint: ckpt, converged: true, steps_run: step, last_accuracy });
        }
        if hook(step, &ckpt.model).is_break() {
            return Ok(TrainOutcome { checkpoint: ckpt, converged: false, steps_run: step, last_accuracy });
        }
    }
    if cfg.check_interval > 0 {
        log::warn!("training stopped at max_steps {} without reaching accuracy {}", cfg.max_steps, cfg.accuracy_threshold);
    }
    Ok(TrainOutcome { checkpoint: ckpt, converged: false, steps_run: cfg.max_steps, last_accuracy })
}

fn ratio(correct: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    }
}

/// Fraction of loss-masked targets whose argmax prediction is correct.
/// A dataset without masked targets scores 1.0.
pub fn masked_accuracy(model: &ToyLm, data: &PackedBatchSet) -> f64 {
    let (mut correct, mut total) = (0, 0);
    for seg in &data.segments {
        let rows: Vec<_> = seg.rows(data.seq_len).collect();
        let r = model.loss(&rows);
        correct += r.n_correct;
        total += r.n_targets;
    }
    if total == 0 {
        log::warn!("masked_accuracy: no loss-masked targets, reporting 1.0");
    }
    ratio(correct, total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_coords: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Central finite differences on at least 200 parameter coordinates against the analytic gradient.
pub fn grad_check(model: &ToyLm, rows: &[(&[u32], &[bool])], epsilon: f64) -> Result<GradCheckReport, TrainError> {
    let analytic = model.loss_and_grad(rows).grad;
    grad_check_against(model, rows, epsilon, 256, 0, &analytic)
}

/// Compares `analytic` with finite differences of the model loss on a seeded coordinate sample.
///
/// Coordinates are stratified over parameter tensors; token-embedding coordinates
/// are drawn only from rows of tokens present in `rows`.
pub fn grad_check_against(
    model: &ToyLm,
    rows: &[(&[u32], &[bool])],
    epsilon: f64,
    n_coords: usize,
    seed: u64,
    analytic: &[f64],
) -> Result<GradCheckReport, TrainError> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(TrainError::Config(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let coords = sample_coords(model, rows, n_coords.max(200), seed);
    let mut probe = model.clone();
    let mut worst = (0.0_f64, None);
    for &i in &coords {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let up = probe.loss(rows).loss;
        probe.params_mut()[i] = orig - epsilon;
        let down = probe.loss(rows).loss;
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let g = analytic[i];
        let rel = (fd - g).abs() / (fd.abs() + g.abs() + 1e-12);
        if rel > worst.0 || worst.1.is_none() {
            worst = (rel, Some(i));
        }
    }
    let worst_named = worst.1.map(|i| {
        let e = model.layout().entries().iter().find(|e| e.range().contains(&i)).expect("index in layout");
        (e.name.clone(), i)
    });
    Ok(GradCheckReport { max_rel_error: worst.0, n_coords: coords.len(), worst: worst_named })
}

fn sample_coords(model: &ToyLm, rows: &[(&[u32], &[bool])], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = model.layout();
    let d = model.config().d_model;
    let per = n.div_ceil(layout.entries().len());
    let mut out = Vec::with_capacity(n + per);
    let mut present: Vec<u32> = rows.iter().flat_map(|(ids, _)| ids.iter().copied()).collect();
    present.sort_unstable();
    present.dedup();
    for e in layout.entries() {
        let pool: Vec<usize> = if e.name == "tok_emb" {
            present.iter().flat_map(|&t| (0..d).map(move |j| e.offset + t as usize * d + j)).collect()
        } else {
            e.range().collect()
        };
        let k = per.min(pool.len());
        out.extend(index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]));
    }
    // top up from the whole buffer if stratification came short
    if out.len() < n {
        let extra = index::sample(&mut rng, layout.total(), (n - out.len()).min(layout.total()));
        out.extend(extra.into_iter());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databuild::{pack_and_chunk, MaskedTokenSeq};
    use crate::tokenizer::Tokenizer;

    fn tiny_cfg() -> ToyLmConfig {
        ToyLmConfig { vocab_size: 259, d_model: 16, n_layers: 1, n_heads: 2, seq_len: 8, init_seed: 1, init_scale: 0.02 }
    }

    fn memorize_data() -> PackedBatchSet {
        let ids: Vec<u32> = b"abcdefgh".iter().map(|&b| b as u32).collect();
        let seq = MaskedTokenSeq { loss_mask: vec![true; ids.len()], ids };
        pack_and_chunk(&[seq], 1, 8, 0, &Tokenizer::byte_level().spec()).unwrap()
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig { peak_lr: 1e-3, warmup_steps: 100, ..TrainConfig::default() };
        assert_eq!(lr_at(&cfg, 25), 1e-3 * 25.0 / 100.0);
        assert_eq!(lr_at(&cfg, 100), 1e-3);
        assert_eq!(lr_at(&cfg, 5000), 1e-3);
        let flat = TrainConfig { warmup_steps: 0, ..cfg };
        assert_eq!(lr_at(&flat, 1), 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { accuracy_threshold: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { accuracy_threshold: 1.0, ..TrainConfig::default() }.validate().is_ok());
        assert_eq!(TrainConfig::large_model().peak_lr, 5e-5);
    }

    #[test]
    fn seq_len_mismatch() {
        let ck = init_model(ToyLmConfig { seq_len: 16, ..tiny_cfg() }).unwrap();
        let err = train(ck, &memorize_data(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::SeqLenMismatch { data: 8, model: 16 }));
    }

    #[test]
    fn memorizes_and_stops_on_interval() {
        let ck = init_model(tiny_cfg()).unwrap();
        let cfg = TrainConfig { peak_lr: 1e-2, warmup_steps: 0, check_interval: 10, max_steps: 500, ..TrainConfig::default() };
        let out = train(ck, &memorize_data(), &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.steps_run % 10, 0);
        assert_eq!(masked_accuracy(&out.checkpoint.model, &memorize_data()), 1.0);
    }

    #[test]
    fn divergence_reported() {
        let mut ck = init_model(tiny_cfg()).unwrap();
        ck.model.params_mut()[0] = f64::NAN;
        // token 0 is not in the data; poison something that is used
        let i = ck.model.layout().get("out.b").unwrap().offset;
        ck.model.params_mut()[i] = f64::NAN;
        let cfg = TrainConfig { max_steps: 3, ..TrainConfig::default() };
        assert!(matches!(train(ck, &memorize_data(), &cfg), Err(TrainError::Divergence { step: 1 })));
    }

    #[test]
    fn empty_mask_accuracy_is_one() {
        let ids: Vec<u32> = vec![1, 2, 3, 4];
        let seq = MaskedTokenSeq { loss_mask: vec![false; 4], ids };
        let data = pack_and_chunk(&[seq], 1, 8, 0, &Tokenizer::byte_level().spec()).unwrap();
        let ck = init_model(tiny_cfg()).unwrap();
        assert_eq!(masked_accuracy(&ck.model, &data), 1.0);
    }

    #[test]
    fn epsilon_range_enforced() {
        let ck = init_model(tiny_cfg()).unwrap();
        let ids = [1u32, 2, 3];
        let mask = [true; 3];
        assert!(grad_check(&ck.model, &[(&ids, &mask)], 1e-2).is_err());
    }
}
