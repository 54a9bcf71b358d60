//! Masked-loss training with Adam, early stopping on dev loss, and a
//! finite-difference gradient check.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::contextizer::{make_dataset, ContextConfig, ContextError, EncodedExample};
use crate::corpus::{CorpusSet, DialogueDocument};
use crate::model::{BatchItem, Checkpoint, Mode, ModelConfig, ModelError, Parameters, Strategy, Transformer};
use crate::tokenizer::{TokenId, Vocabulary, EOS, SYNTHETIC_PLAIN, SYNTHETIC_POLITE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss mask has no supervised position")]
    EmptyMask,
    #[error("logits have {rows} rows but {targets} targets and {mask} mask entries were given")]
    Shape { rows: usize, targets: usize, mask: usize },
    #[error("target id {0} outside the logit range")]
    TargetOutOfRange(TokenId),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training examples")]
    NoData,
    #[error("non-finite loss at step {step}; best checkpoint so far is attached")]
    Diverged { step: u64, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Sentences per batch.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0 disables smoothing.
    pub label_smoothing: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub max_epochs: usize,
    /// Evaluations without dev-loss improvement before stopping.
    pub patience: usize,
    /// Steps between evaluations; 0 evaluates once per epoch.
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            max_epochs: 50,
            patience: 5,
            eval_interval: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.warmup_steps == 0 {
            return bad("batch_size, max_epochs, patience and warmup_steps must be positive");
        }
        if !(self.peak_lr > 0.0 && self.adam_eps > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must lie in [0, 1)");
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }

    /// Inverse square-root schedule with linear warmup; `step` counts from 1.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Label-smoothed cross-entropy averaged over mask-true rows, and its
/// gradient with respect to the logits. Mask-false rows contribute nothing.
pub fn masked_cross_entropy(
    logits: &Array2<f64>,
    targets: &[TokenId],
    mask: &[bool],
    label_smoothing: f64,
) -> Result<(f64, Array2<f64>), TrainError> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(TrainError::Shape {
            rows: logits.nrows(),
            targets: targets.len(),
            mask: mask.len(),
        });
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    let v = logits.ncols();
    let off = label_smoothing / v as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let t = t as usize;
        if t >= v {
            return Err(TrainError::TargetOutOfRange(t as TokenId));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let mut loss = -(1.0 - label_smoothing) * (row[t] - lse);
        if label_smoothing > 0.0 {
            loss -= off * row.iter().map(|&x| x - lse).sum::<f64>();
        }
        total += loss;
        let mut g = grad.row_mut(r);
        for (j, gj) in g.iter_mut().enumerate() {
            let q = off + if j == t { 1.0 - label_smoothing } else { 0.0 };
            *gj = ((row[j] - lse).exp() - q) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Parameters,
    v: Parameters,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Parameters, cfg: &TrainConfig) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update; parameters are rounded to `f32` afterwards.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        params.round_to_f32();
    }
}

/// Packed batch inputs with the gold tokens and loss mask per logit row.
pub fn batch_inputs(examples: &[&EncodedExample]) -> (Vec<BatchItem>, Vec<TokenId>, Vec<bool>) {
    let items = examples.iter().map(|ex| BatchItem::from_example(ex)).collect();
    let gold = examples.iter().flat_map(|ex| ex.gold().iter().copied()).collect();
    let mask = examples.iter().flat_map(|ex| ex.gold_mask().iter().copied()).collect();
    (items, gold, mask)
}

/// Summed unsmoothed loss and supervised-token count over `examples`.
pub fn loss_sum(model: &Transformer, examples: &[EncodedExample], batch_size: usize) -> Result<(f64, usize), TrainError> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let (items, gold, mask) = batch_inputs(&refs);
        let (logits, _) = model.forward_batch(&items, Mode::Eval)?;
        let n = mask.iter().filter(|&&m| m).count();
        let (loss, _) = masked_cross_entropy(&logits, &gold, &mask, 0.0)?;
        total += loss * n as f64;
        count += n;
    }
    Ok((total, count))
}

/// Mean unsmoothed per-token loss.
pub fn evaluate_loss(model: &Transformer, examples: &[EncodedExample], batch_size: usize) -> Result<f64, TrainError> {
    let (total, count) = loss_sum(model, examples, batch_size)?;
    if count == 0 {
        return Err(TrainError::NoData);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerStats {
    pub correct: usize,
    pub total: usize,
}

impl MarkerStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn marker_ids(vocab: &Vocabulary) -> Option<(TokenId, TokenId)> {
    Some((vocab.id(SYNTHETIC_POLITE)?, vocab.id(SYNTHETIC_PLAIN)?))
}

/// Last non-EOS token of a sequence.
fn final_token(seq: &[TokenId]) -> Option<TokenId> {
    seq.iter().rev().find(|&&t| t != EOS).copied()
}

/// Teacher-forced marker accuracy: at each supervised position whose gold
/// token is a politeness marker, whether the argmax prediction matches.
/// `None` when the vocabulary has no markers.
pub fn marker_accuracy_forced(
    model: &Transformer,
    examples: &[EncodedExample],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Option<MarkerStats>, TrainError> {
    let Some((polite, plain)) = marker_ids(vocab) else {
        return Ok(None);
    };
    let mut stats = MarkerStats { correct: 0, total: 0 };
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let (items, gold, mask) = batch_inputs(&refs);
        let (logits, _) = model.forward_batch(&items, Mode::Eval)?;
        for (r, (&g, &m)) in gold.iter().zip(&mask).enumerate() {
            if m && (g == polite || g == plain) {
                let row = logits.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                stats.total += 1;
                stats.correct += usize::from(best as TokenId == g);
            }
        }
    }
    Ok(Some(stats))
}

/// Free-running marker accuracy: decodes each example (forcing the gold
/// target context when present) and compares the final non-EOS token with
/// the gold marker.
pub fn marker_accuracy_generated(
    model: &Transformer,
    examples: &[EncodedExample],
    vocab: &Vocabulary,
    strategy: Strategy,
) -> Result<Option<MarkerStats>, TrainError> {
    let Some((polite, plain)) = marker_ids(vocab) else {
        return Ok(None);
    };
    let mut stats = MarkerStats { correct: 0, total: 0 };
    for ex in examples {
        let gold_cur: Vec<TokenId> = ex
            .target_ids
            .iter()
            .zip(&ex.tgt_loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        let Some(gold) = final_token(&gold_cur).filter(|&t| t == polite || t == plain) else {
            continue;
        };
        let prefix_len = ex.tgt_loss_mask.iter().position(|&m| m).unwrap_or(1);
        let max_len = ex.target_ids.len() + 8;
        let out = if prefix_len > 1 {
            model.forced_prefix_generate(&ex.source_ids, &ex.src_context_mask, &ex.target_ids[..prefix_len], max_len)?
        } else {
            model.generate(&ex.source_ids, &ex.src_context_mask, max_len, strategy)?
        };
        stats.total += 1;
        stats.correct += usize::from(final_token(&out) == Some(gold));
    }
    Ok(Some(stats))
}

/// Share of the most frequent politeness marker among `docs`' targets.
pub fn marker_prior(docs: &[DialogueDocument]) -> Option<f64> {
    let mut polite = 0usize;
    let mut plain = 0usize;
    for u in docs.iter().flat_map(|d| &d.utterances) {
        match u.target_text.split_whitespace().last() {
            Some(SYNTHETIC_POLITE) => polite += 1,
            Some(SYNTHETIC_PLAIN) => plain += 1,
            _ => {}
        }
    }
    let total = polite + plain;
    (total > 0).then(|| polite.max(plain) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub marker_accuracy: Option<f64>,
    pub best: bool,
    pub seed: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub best_step: u64,
    pub best_dev_loss: f64,
    pub steps: u64,
    pub stopped_early: bool,
}

/// The training log as line-delimited JSON.
pub fn log_to_jsonl(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log serialisation") + "\n")
        .collect()
}

fn derive_seed(seed: u64, label: &str, n: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(n.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Trains from scratch and returns the best-dev-loss checkpoint.
///
/// Dev loss is computed without label smoothing, using the full configured
/// context. With `ctx.dynamic` the training context sizes are redrawn every
/// epoch.
pub fn train(
    corpus: &CorpusSet,
    ctx: &ContextConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    ctx.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.validate_for(ctx)?;
    let started = Instant::now();
    let mut model = Transformer::new(model_cfg, derive_seed(cfg.seed, "init", 0))?;
    let mut adam = Adam::new(model.params(), cfg);
    let dev_ctx = ctx.with_dynamic(false);
    let dev = make_dataset(&corpus.dev, &dev_ctx, vocab, cfg.seed, 0)?;
    if dev.is_empty() {
        return Err(TrainError::NoData);
    }
    let snapshot = |m: &Transformer| Checkpoint {
        model: m.clone(),
        vocab: vocab.clone(),
        context: *ctx,
    };
    let mut best = snapshot(&model);
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut bad_evals = 0;
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut running = (0.0, 0usize);

    let mut evaluate = |model: &Transformer, step: u64, epoch: usize, running: &mut (f64, usize), log: &mut Vec<LogRecord>| -> Result<bool, TrainError> {
        let dev_loss = evaluate_loss(model, &dev, cfg.batch_size)?;
        let marker = marker_accuracy_forced(model, &dev, vocab, cfg.batch_size)?.map(|s| s.accuracy());
        let improved = dev_loss < best_loss;
        if improved {
            best_loss = dev_loss;
            best_step = step;
            best = snapshot(model);
            bad_evals = 0;
        } else {
            bad_evals += 1;
        }
        let record = LogRecord {
            step,
            epoch,
            lr: cfg.learning_rate(step),
            train_loss: if running.1 > 0 { running.0 / running.1 as f64 } else { f64::NAN },
            dev_loss,
            marker_accuracy: marker,
            best: improved,
            seed: cfg.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "step {step} epoch {epoch}: train {:.4} dev {dev_loss:.4}{}",
            record.train_loss,
            marker.map(|m| format!(" marker {:.3}", m)).unwrap_or_default()
        );
        log.push(record);
        *running = (0.0, 0);
        Ok(bad_evals >= cfg.patience)
    };

    let mut stopped_early = false;
    'epochs: for epoch in 0..cfg.max_epochs {
        let mut data = make_dataset(&corpus.train, ctx, vocab, cfg.seed, epoch as u64)?;
        if data.is_empty() {
            return Err(TrainError::NoData);
        }
        data.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64)));
        for chunk in data.chunks(cfg.batch_size) {
            step += 1;
            let refs: Vec<&EncodedExample> = chunk.iter().collect();
            let (items, gold, mask) = batch_inputs(&refs);
            let mode = Mode::Train {
                seed: derive_seed(cfg.seed, "dropout", step),
            };
            let (logits, cache) = model.forward_batch(&items, mode)?;
            let (loss, dlogits) = masked_cross_entropy(&logits, &gold, &mask, cfg.label_smoothing)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    last_good: Box::new(best),
                });
            }
            let mut grads = model.backward(&cache, &dlogits);
            if cfg.clip_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
            }
            adam.step(model.params_mut(), &grads, cfg.learning_rate(step));
            if !model.params().all_finite() {
                return Err(TrainError::Diverged {
                    step,
                    last_good: Box::new(best),
                });
            }
            running.0 += loss;
            running.1 += 1;
            if cfg.eval_interval > 0 && step.is_multiple_of(cfg.eval_interval) && evaluate(&model, step, epoch, &mut running, &mut log)? {
                stopped_early = true;
                break 'epochs;
            }
        }
        if cfg.eval_interval == 0 && evaluate(&model, step, epoch, &mut running, &mut log)? {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        log,
        best_step,
        best_dev_loss: best_loss,
        steps: step,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub name: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub h: f64,
    pub probes: Vec<GradProbe>,
}

/// Denominator floor so that coordinates with near-zero gradient are judged
/// by absolute error.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Analytic gradient of the masked loss of one example (eval mode).
pub fn example_gradient(model: &Transformer, ex: &EncodedExample, label_smoothing: f64) -> Result<(f64, Parameters), TrainError> {
    let (items, gold, mask) = batch_inputs(&[ex]);
    let (logits, cache) = model.forward_batch(&items, Mode::Eval)?;
    let (loss, dlogits) = masked_cross_entropy(&logits, &gold, &mask, label_smoothing)?;
    Ok((loss, model.backward(&cache, &dlogits)))
}

fn example_loss(model: &Transformer, ex: &EncodedExample, label_smoothing: f64) -> Result<f64, TrainError> {
    let (items, gold, mask) = batch_inputs(&[ex]);
    let (logits, _) = model.forward_batch(&items, Mode::Eval)?;
    Ok(masked_cross_entropy(&logits, &gold, &mask, label_smoothing)?.0)
}

/// Compares the analytic gradient with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on `probes` coordinates drawn without
/// replacement.
pub fn finite_difference_check(
    model: &Transformer,
    ex: &EncodedExample,
    probes: usize,
    h: f64,
    label_smoothing: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let (_, grads) = example_gradient(model, ex, label_smoothing)?;
    let total = model.params().num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = index::sample(&mut rng, total, probes.min(total)).into_vec();
    coords.sort_unstable();
    finite_difference_at(model, ex, &grads, &coords, h, label_smoothing)
}

/// Central differences at the given flat coordinates.
pub fn finite_difference_at(
    model: &Transformer,
    ex: &EncodedExample,
    grads: &Parameters,
    coords: &[usize],
    h: f64,
    label_smoothing: f64,
) -> Result<GradCheckReport, TrainError> {
    let mut probe_model = model.clone();
    let mut out = Vec::with_capacity(coords.len());
    let mut max_err: f64 = 0.0;
    for &k in coords {
        let orig = probe_model.params().flat_get(k);
        probe_model.params_mut().flat_set(k, orig + h);
        let up = example_loss(&probe_model, ex, label_smoothing)?;
        probe_model.params_mut().flat_set(k, orig - h);
        let down = example_loss(&probe_model, ex, label_smoothing)?;
        probe_model.params_mut().flat_set(k, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.flat_get(k);
        let err = relative_error(analytic, numeric);
        max_err = max_err.max(err);
        let (t, _, _) = grads.locate(k);
        out.push(GradProbe {
            name: grads.names()[t].clone(),
            coordinate: k,
            analytic,
            numeric,
            relative_error: err,
        });
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        h,
        probes: out,
    })
}
