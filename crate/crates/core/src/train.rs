//! Teacher pretraining and student distillation loops.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{vocab, CorpusSplits, TokenSequence};
use crate::divergence::{variant_loss, DistillConfig, LossVariant};
use crate::error::{Error, Result};
use crate::model::{cond_ids, forward_seq, backward_seq, sum_in_order, validate_tokens, Gradients, ModelSpec, ModelWeights};
use crate::tensor::{log_softmax_unchecked, Matrix};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Training hyperparameters shared by teacher pretraining and distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub distill: DistillConfig,
    /// Weight on hard-label cross-entropy; the KD term gets `1 - ce_weight`.
    pub ce_weight: f64,
    /// Probability of replacing an item's condition with the null condition.
    pub cond_dropout: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl TrainConfig {
    /// Desk defaults for teacher pretraining: 10 epochs, batch 16, lr 0.05.
    pub fn teacher_default(seed: u64) -> Self {
        Self::defaults(seed, 0.05)
    }

    /// Desk defaults for distillation: 10 epochs, batch 16, lr 0.02, pure KD.
    pub fn student_default(seed: u64) -> Self {
        Self::defaults(seed, 0.02)
    }

    fn defaults(seed: u64, learning_rate: f64) -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate,
            seed,
            distill: DistillConfig::builder(1).build().expect("default distill config is valid"),
            ce_weight: 0.0,
            cond_dropout: 0.1,
            clip_norm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate = {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.ce_weight) {
            return Err(Error::invalid(format!("ce_weight = {} outside [0,1]", self.ce_weight)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!("cond_dropout = {} outside [0,1]", self.cond_dropout)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip_norm = {} must be positive", self.clip_norm)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }
}

/// Per-step training loss and per-epoch validation loss of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub variant: String,
}

impl LossCurve {
    pub fn write_train_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,variant")?;
        for (i, v) in self.train.iter().enumerate() {
            writeln!(w, "{i},{v},{}", self.variant)?;
        }
        Ok(())
    }

    pub fn write_val_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,val_loss,variant")?;
        for (i, v) in self.val.iter().enumerate() {
            writeln!(w, "{},{v},{}", i + 1, self.variant)?;
        }
        Ok(())
    }

    /// Exponential moving average of the training loss with span `window`.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        ema(&self.train, window)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val.last().copied()
    }
}

/// EMA with `alpha = 2 / (window + 1)`, seeded with the first value.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in values {
        acc = alpha * v + (1.0 - alpha) * acc;
        out.push(acc);
    }
    out
}

/// Decoder input for teacher forcing: `START` followed by all but the last token.
pub fn shifted_input(seq: &TokenSequence) -> TokenSequence {
    let mut tokens = Vec::with_capacity(seq.tokens.len());
    if !seq.tokens.is_empty() {
        tokens.push(vocab::START);
        tokens.extend_from_slice(&seq.tokens[..seq.tokens.len() - 1]);
    }
    TokenSequence { tokens, condition: seq.condition }
}

/// Mean next-token cross-entropy of one sequence and its logit gradient,
/// scaled by `grad_scale`.
fn cross_entropy(logits: &[f64], targets: &[u32], vocab: usize, grad_scale: f64) -> (f64, Vec<f64>) {
    let n = targets.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let ls = log_softmax_unchecked(&logits[i * vocab..(i + 1) * vocab]);
        loss -= ls[t as usize];
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        for (gv, l) in g.iter_mut().zip(&ls) {
            *gv = l.exp() * grad_scale / n as f64;
        }
        g[t as usize] -= grad_scale / n as f64;
    }
    (loss / n as f64, grad)
}

/// What one optimizer step saw, passed to observers before the update.
pub struct StepRecord<'a> {
    pub step: usize,
    pub weights_before: &'a ModelWeights,
    pub inputs: &'a [TokenSequence],
    pub dropped: &'a [bool],
    pub loss: f64,
}

/// Objective evaluated per batch item.
trait Objective: Sync {
    /// Loss of one item and the logit gradient scaled by `grad_scale`.
    fn item(&self, item: usize, dropped: bool, logits: &[f64], step: usize, grad_scale: f64) -> Result<(f64, Vec<f64>)>;
}

struct HardLabels<'a> {
    items: &'a [TokenSequence],
    vocab: usize,
}

impl Objective for HardLabels<'_> {
    fn item(&self, item: usize, _dropped: bool, logits: &[f64], _step: usize, grad_scale: f64) -> Result<(f64, Vec<f64>)> {
        Ok(cross_entropy(logits, &self.items[item].tokens, self.vocab, grad_scale))
    }
}

/// KD objective mixed with hard-label cross-entropy. Teacher logits are
/// memoized per (item, dropped) since the teacher never changes.
struct Distillation<'a> {
    teacher: &'a ModelWeights,
    items: &'a [TokenSequence],
    cfg: &'a DistillConfig,
    ce_weight: f64,
    vocab: usize,
    cache: Mutex<HashMap<(usize, bool), std::sync::Arc<Vec<f64>>>>,
}

impl<'a> Distillation<'a> {
    fn new(teacher: &'a ModelWeights, items: &'a [TokenSequence], cfg: &'a DistillConfig, ce_weight: f64) -> Self {
        Self {
            teacher,
            items,
            cfg,
            ce_weight,
            vocab: teacher.spec().vocab_size,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn teacher_logits(&self, item: usize, dropped: bool) -> std::sync::Arc<Vec<f64>> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(&(item, dropped)) {
            return v.clone();
        }
        let input = shifted_input(&self.items[item]);
        let (logits, _) = forward_seq(self.teacher, &input.tokens, cond_ids(&input, dropped));
        let logits = std::sync::Arc::new(logits);
        self.cache
            .lock()
            .expect("cache lock")
            .insert((item, dropped), logits.clone());
        logits
    }
}

impl Objective for Distillation<'_> {
    fn item(&self, item: usize, dropped: bool, logits: &[f64], step: usize, grad_scale: f64) -> Result<(f64, Vec<f64>)> {
        let v = self.vocab;
        let teacher = self.teacher_logits(item, dropped);
        let n = logits.len() / v;
        let kd_w = 1.0 - self.ce_weight;
        let mut loss = 0.0;
        let mut grad = vec![0.0; logits.len()];
        if kd_w > 0.0 {
            for i in 0..n {
                let row = i * v..(i + 1) * v;
                let out = variant_loss(&teacher[row.clone()], &logits[row.clone()], self.cfg, step as u64)?;
                loss += out.loss / n as f64;
                for (g, d) in grad[row].iter_mut().zip(&out.grad) {
                    *g = d * kd_w * grad_scale / n as f64;
                }
            }
            loss *= kd_w;
        }
        if self.ce_weight > 0.0 {
            let (ce, ce_grad) = cross_entropy(logits, &self.items[item].tokens, v, self.ce_weight * grad_scale);
            loss += self.ce_weight * ce;
            crate::tensor::add_assign(&mut grad, &ce_grad);
        }
        Ok((loss, grad))
    }
}

fn check_corpus(spec: &ModelSpec, corpus: &CorpusSplits) -> Result<()> {
    if corpus.train.items.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if corpus.validation.items.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    for seq in corpus.train.items.iter().chain(&corpus.validation.items) {
        validate_tokens(spec, &seq.tokens)?;
    }
    Ok(())
}

/// Mean loss over a split with conditions intact.
fn evaluate(w: &ModelWeights, items: &[TokenSequence], objective: &dyn Objective, step: usize) -> Result<f64> {
    let mut total = 0.0;
    for (i, seq) in items.iter().enumerate() {
        let input = shifted_input(seq);
        let (logits, _) = forward_seq(w, &input.tokens, cond_ids(&input, false));
        total += objective.item(i, false, &logits, step, 0.0)?.0;
    }
    Ok(total / items.len() as f64)
}

/// Mean next-token cross-entropy of `w` on `items`, conditions intact.
pub fn mean_cross_entropy(w: &ModelWeights, items: &[TokenSequence]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("no sequences to evaluate"));
    }
    for seq in items {
        validate_tokens(w.spec(), &seq.tokens)?;
    }
    evaluate(w, items, &HardLabels { items, vocab: w.spec().vocab_size }, 0)
}

fn run_training(
    mut w: ModelWeights,
    corpus: &CorpusSplits,
    cfg: &TrainConfig,
    objective: &dyn Objective,
    val_objective: &dyn Objective,
    variant: String,
    observer: &mut dyn FnMut(StepRecord<'_>),
) -> Result<(ModelWeights, LossCurve)> {
    let train = &corpus.train.items;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(SHUFFLE_STREAM);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(DROPOUT_STREAM);

    let mut curve = LossCurve { train: Vec::new(), val: Vec::new(), variant };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let dropped: Vec<bool> = chunk.iter().map(|_| drop_rng.gen::<f64>() < cfg.cond_dropout).collect();
            let inputs: Vec<TokenSequence> = chunk.iter().map(|&i| shifted_input(&train[i])).collect();
            let scale = 1.0 / chunk.len() as f64;
            let per_item = |b: usize| -> Result<(Gradients, f64)> {
                let ids = cond_ids(&inputs[b], dropped[b]);
                let (logits, cache) = forward_seq(&w, &inputs[b].tokens, ids);
                let (loss, dlogits) = objective.item(chunk[b], dropped[b], &logits, step, scale)?;
                let mut g = Gradients::zeros_like(&w);
                backward_seq(&w, &cache, &dlogits, &mut g);
                Ok((g, loss))
            };
            let (mut grads, losses) = sum_in_order(&w, chunk.len(), per_item).map_err(|e| match e {
                Error::TrainingFailure { .. } => e,
                other => Error::TrainingFailure { step, reason: other.to_string() },
            })?;
            let loss = losses.iter().sum::<f64>() * scale;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure { step, reason: format!("loss is {loss}") });
            }
            observer(StepRecord { step, weights_before: &w, inputs: &inputs, dropped: &dropped, loss });
            grads.clip(cfg.clip_norm);
            w.sgd_step(&grads, cfg.learning_rate);
            curve.train.push(loss);
            step += 1;
        }
        let val = evaluate(&w, &corpus.validation.items, val_objective, step)
            .map_err(|e| Error::TrainingFailure { step, reason: e.to_string() })?;
        if !val.is_finite() {
            return Err(Error::TrainingFailure { step, reason: format!("validation loss is {val}") });
        }
        curve.val.push(val);
    }
    Ok((w, curve))
}

/// Next-token cross-entropy pretraining with condition dropout, from
/// `init(spec, cfg.seed)`.
pub fn train_teacher(spec: &ModelSpec, corpus: &CorpusSplits, cfg: &TrainConfig) -> Result<(ModelWeights, LossCurve)> {
    let w = ModelWeights::init(spec, cfg.seed)?;
    train_from(w, corpus, cfg, "teacher-ce")
}

/// Cross-entropy training continuing from given weights.
pub fn train_from(
    w: ModelWeights,
    corpus: &CorpusSplits,
    cfg: &TrainConfig,
    label: &str,
) -> Result<(ModelWeights, LossCurve)> {
    cfg.validate()?;
    check_corpus(w.spec(), corpus)?;
    let vocab = w.spec().vocab_size;
    let train_obj = HardLabels { items: &corpus.train.items, vocab };
    let val_obj = HardLabels { items: &corpus.validation.items, vocab };
    run_training(w, corpus, cfg, &train_obj, &val_obj, label.to_string(), &mut |_| {})
}

/// Trains a student from `init(student_spec, cfg.seed)` against the teacher's
/// softened distributions. The run length used by the temperature schedule
/// and the stepped objective is the actual number of optimizer steps.
pub fn distill(
    teacher: &ModelWeights,
    student_spec: &ModelSpec,
    corpus: &CorpusSplits,
    cfg: &TrainConfig,
) -> Result<(ModelWeights, LossCurve)> {
    distill_observed(teacher, student_spec, corpus, cfg, &mut |_| {})
}

pub fn distill_observed(
    teacher: &ModelWeights,
    student_spec: &ModelSpec,
    corpus: &CorpusSplits,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(StepRecord<'_>),
) -> Result<(ModelWeights, LossCurve)> {
    cfg.validate()?;
    if teacher.spec().vocab_size != student_spec.vocab_size {
        return Err(Error::invalid(format!(
            "teacher vocab_size {} differs from student vocab_size {}",
            teacher.spec().vocab_size,
            student_spec.vocab_size
        )));
    }
    check_corpus(student_spec, corpus)?;
    check_corpus(teacher.spec(), corpus)?;
    let total = cfg.total_steps(corpus.train.items.len()) as u64;
    let dcfg = cfg.distill.with_total_steps(total)?;
    let student = ModelWeights::init(student_spec, cfg.seed)?;
    let train_obj = Distillation::new(teacher, &corpus.train.items, &dcfg, cfg.ce_weight);
    let val_obj = Distillation::new(teacher, &corpus.validation.items, &dcfg, cfg.ce_weight);
    run_training(student, corpus, cfg, &train_obj, &val_obj, dcfg.variant().name().to_string(), observer)
}

/// Runs [`distill`] once per variant with identical seeds and data.
pub fn compare_losses(
    teacher: &ModelWeights,
    student_spec: &ModelSpec,
    corpus: &CorpusSplits,
    base_cfg: &TrainConfig,
    variants: &[LossVariant],
) -> Result<Vec<LossCurve>> {
    if variants.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 variants, got {}", variants.len())));
    }
    variants
        .iter()
        .map(|&v| {
            let mut cfg = base_cfg.clone();
            cfg.distill = cfg.distill.with_variant(v);
            distill(teacher, student_spec, corpus, &cfg).map(|(_, c)| c)
        })
        .collect()
}

/// Whether the stage-mixed curve ends with validation loss no higher than
/// the forward-KL curve. `None` if either is missing.
pub fn stage_mixed_at_most_forward(curves: &[LossCurve]) -> Option<bool> {
    let find = |v: LossVariant| curves.iter().find(|c| c.variant == v.name()).and_then(LossCurve::final_val);
    Some(find(LossVariant::StageMixedSkewed)? <= find(LossVariant::ForwardKl)?)
}

/// Teacher-forced logits of one sequence, for callers outside the loop.
pub fn sequence_logits(w: &ModelWeights, seq: &TokenSequence, dropped: bool) -> Result<Matrix> {
    let input = shifted_input(seq);
    validate_tokens(w.spec(), &input.tokens)?;
    let (data, _) = forward_seq(w, &input.tokens, cond_ids(&input, dropped));
    Matrix::from_vec(input.tokens.len(), w.spec().vocab_size, data)
}

#[cfg(test)]
mod tests;
