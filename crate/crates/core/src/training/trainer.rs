use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::early_stop::{EarlyStopConfig, EarlyStopper, EpochDecision};
use super::optim::{clip_gradients, AdamWConfig, OptimizerState};
use super::schedule::SchedulerState;
use crate::data::{epoch_order, Batch, Sample, IGNORED_TARGETS};
use crate::model::CoCaModel;
use crate::nn::{ParamSet, Session};
use crate::objectives::{caption_loss, coca_loss, contrastive_loss, perplexity, LossWeights};
use crate::tensor::{Tape, Tensor};
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Pretrain,
    Finetune,
}

impl RunMode {
    pub fn loss_weights(self) -> LossWeights {
        match self {
            RunMode::Pretrain => LossWeights::PRETRAIN,
            RunMode::Finetune => LossWeights::FINETUNE,
        }
    }

    pub fn dropout(self) -> f64 {
        match self {
            RunMode::Pretrain => 0.15,
            RunMode::Finetune => 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: RunMode,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub warmup_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub early_stop: EarlyStopConfig,
    /// Overrides the mode's loss weights.
    pub loss_weights: Option<LossWeights>,
    /// Overrides the mode's dropout rate.
    pub dropout: Option<f64>,
    /// When false the metrics log records 0 elapsed seconds, making logs
    /// of identical runs byte-identical.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Pretrain,
            micro_batch: 8,
            accum_steps: 2,
            epochs: 30,
            seed: 0,
            warmup_steps: 50,
            lr_max: 3e-4,
            lr_min: 3e-6,
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            early_stop: EarlyStopConfig::default(),
            loss_weights: None,
            dropout: None,
            log_wallclock: true,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }

    pub fn weights(&self) -> LossWeights {
        self.loss_weights.unwrap_or(self.mode.loss_weights())
    }

    pub fn resolved_dropout(&self) -> f64 {
        self.dropout.unwrap_or(self.mode.dropout())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("train.{key}: {msg}")));
        if self.micro_batch == 0 {
            return bad("micro_batch", "must be positive".into());
        }
        if self.accum_steps == 0 {
            return bad("accum_steps", "must be positive".into());
        }
        if self.effective_batch() < 2 {
            return bad(
                "micro_batch",
                "micro_batch × accum_steps must be at least 2 for the contrastive loss".into(),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(
                "lr_min",
                format!(
                    "need 0 <= lr_min < lr_max, got {} and {}",
                    self.lr_min, self.lr_max
                ),
            );
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", format!("must be positive, got {}", self.clip_norm));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
            || !(o.weight_decay >= 0.0)
        {
            return bad("optimizer", format!("invalid AdamW settings {o:?}"));
        }
        if let Some(w) = self.loss_weights {
            w.validate()
                .map_err(|e| Error::Config(format!("train.loss_weights: {e}")))?;
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout", format!("must be in [0, 1), got {p}"));
            }
        }
        let es = &self.early_stop;
        if es.patience == 0 || es.soft_window == 0 || !(es.lr_reduction >= 1.0) {
            return bad("early_stop", format!("invalid settings {es:?}"));
        }
        Ok(())
    }
}

/// Gradients and loss statistics of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub grads: Vec<Tensor>,
    pub contrastive_loss: f64,
    pub caption_loss_sum: f64,
    pub valid_tokens: usize,
    pub samples: usize,
}

impl StepGradients {
    pub fn caption_loss_mean(&self) -> f64 {
        self.caption_loss_sum / self.valid_tokens as f64
    }

    pub fn coca_loss(&self, w: LossWeights) -> f64 {
        w.combine(self.contrastive_loss, self.caption_loss_mean())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(base ^ splitmix(a)) ^ b)
}

fn session<'t>(
    tape: &'t Tape,
    params: &'t ParamSet,
    trainable: bool,
    dropout_seed: Option<u64>,
) -> Session<'t> {
    let s = if trainable {
        Session::new(tape, params)
    } else {
        Session::inference(tape, params)
    };
    match dropout_seed {
        Some(seed) => s.with_dropout(seed),
        None => s,
    }
}

fn dense_grads(model: &CoCaModel, s: &Session<'_>) -> Vec<Tensor> {
    s.param_grads()
        .into_iter()
        .zip(model.specs())
        .map(|(g, spec)| g.unwrap_or_else(|| Tensor::zeros(spec.shape.clone())))
        .collect()
}

fn add_into(acc: &mut [Tensor], other: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let width = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![rows, width], data)
}

fn count_valid(targets: &[usize]) -> usize {
    targets.iter().filter(|t| !IGNORED_TARGETS.contains(t)).count()
}

/// Gradient of the CoCa loss over the union of `micro` batches.
///
/// The contrastive term couples every pair in the union, so with more than
/// one micro-batch the latents are first computed without gradients, the
/// contrastive loss is differentiated with respect to them, and each
/// micro-batch is then re-run with a surrogate whose parameter gradient
/// equals its share of the full-batch gradient. The result matches a single
/// pass over the concatenated batch. `dropout_seed` enables dropout with
/// masks that are identical in both passes.
pub fn batch_gradients(
    model: &CoCaModel,
    params: &ParamSet,
    micro: &[Batch],
    weights: LossWeights,
    dropout_seed: Option<u64>,
) -> Result<StepGradients> {
    if micro.is_empty() {
        return Err(Error::invalid("batch_gradients", "no micro-batches"));
    }
    let samples: usize = micro.iter().map(|b| b.size).sum();
    let seed_of = |k: usize| dropout_seed.map(|s| derive_seed(s, k as u64, 0));

    if let [b] = micro {
        let tape = Tape::new();
        let s = session(&tape, params, true, seed_of(0));
        let out = model.forward(&s, tape.constant(b.images.clone()), &b.inputs)?;
        let con = contrastive_loss(out.image_latent, out.text_latent, out.temperature)?;
        let cap = caption_loss(out.logits, &b.targets, &IGNORED_TARGETS)?;
        let loss = coca_loss(con, cap.mean(), weights)?;
        tape.backward(loss)?;
        return Ok(StepGradients {
            grads: dense_grads(model, &s),
            contrastive_loss: con.value().item()?,
            caption_loss_sum: cap.sum.value().item()?,
            valid_tokens: cap.valid_tokens,
            samples,
        });
    }

    let indexed: Vec<(usize, &Batch)> = micro.iter().enumerate().collect();
    let latents = par::map(&indexed, |&(k, b)| -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let s = session(&tape, params, false, seed_of(k));
        let patches = model.encode_image(&s, tape.constant(b.images.clone()))?;
        let pooled = model.pool(&s, patches)?;
        let text = model.encode_text(&s, &b.inputs, b.size)?;
        Ok(((*pooled.con.value()).clone(), (*text.cls.value()).clone()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let (img_parts, txt_parts): (Vec<Tensor>, Vec<Tensor>) = latents.into_iter().unzip();
    let tape = Tape::new();
    let img = tape.leaf(stack_rows(&img_parts)?);
    let txt = tape.leaf(stack_rows(&txt_parts)?);
    let log_t = tape.leaf(params.get(model.log_temperature).clone());
    let con = contrastive_loss(img, txt, log_t.exp())?;
    tape.backward(con)?;
    let contrastive = con.value().item()?;
    let missing = || Error::invalid("batch_gradients", "contrastive latents received no gradient");
    let g_img = img.grad().ok_or_else(missing)?;
    let g_txt = txt.grad().ok_or_else(missing)?;
    let g_log_t = log_t.grad().ok_or_else(missing)?;

    let total_valid: usize = micro.iter().map(|b| count_valid(&b.targets)).sum();
    if total_valid == 0 {
        return Err(Error::invalid(
            "batch_gradients",
            "no target outside the ignored set",
        ));
    }
    let d = model.config.d_model;
    let offsets: Vec<usize> = micro
        .iter()
        .scan(0, |acc, b| {
            let start = *acc;
            *acc += b.size;
            Some(start)
        })
        .collect();

    let parts = par::map(&indexed, |&(k, b)| -> Result<(Vec<Tensor>, f64, usize)> {
        let rows = |g: &Tensor| {
            let start = offsets[k] * d;
            Tensor::new(vec![b.size, d], g.data()[start..start + b.size * d].to_vec())
        };
        let tape = Tape::new();
        let s = session(&tape, params, true, seed_of(k));
        let out = model.forward(&s, tape.constant(b.images.clone()), &b.inputs)?;
        let cap = caption_loss(out.logits, &b.targets, &IGNORED_TARGETS)?;
        let mut surrogate = cap.sum.scale(weights.caption / total_valid as f64);
        let lin = out
            .image_latent
            .mul(&tape.constant(rows(&g_img)?))?
            .sum()
            .add(&out.text_latent.mul(&tape.constant(rows(&g_txt)?))?.sum())?;
        surrogate = surrogate.add(&lin.scale(weights.contrastive))?;
        if k == 0 {
            let t = s
                .param(model.log_temperature)
                .mul(&tape.constant(g_log_t.clone()))?
                .sum();
            surrogate = surrogate.add(&t.scale(weights.contrastive))?;
        }
        tape.backward(surrogate)?;
        Ok((dense_grads(model, &s), cap.sum.value().item()?, cap.valid_tokens))
    });

    let mut grads: Option<Vec<Tensor>> = None;
    let mut caption_sum = 0.0;
    for part in parts {
        let (g, sum, _) = part?;
        caption_sum += sum;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => add_into(acc, &g),
        }
    }
    Ok(StepGradients {
        grads: grads.expect("at least one micro-batch"),
        contrastive_loss: contrastive,
        caption_loss_sum: caption_sum,
        valid_tokens: total_valid,
        samples,
    })
}

/// Splits `group` into consecutive micro-batches of at most `micro_batch`.
pub fn micro_batches(samples: &[Sample], group: &[usize], micro_batch: usize) -> Result<Vec<Batch>> {
    group
        .chunks(micro_batch.max(1))
        .map(|idx| Batch::from_samples(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}

/// Validation-style metrics over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub coca_loss: f64,
    pub caption_loss_mean: f64,
    pub perplexity: f64,
    /// Mean over batches, weighted by batch size.
    pub contrastive_loss: f64,
    pub caption_loss_sum: f64,
    pub valid_tokens: usize,
    pub samples: usize,
}

impl EvalMetrics {
    fn from_parts(
        weights: LossWeights,
        con_weighted: f64,
        cap_sum: f64,
        valid: usize,
        samples: usize,
    ) -> Result<Self> {
        let contrastive_loss = con_weighted / samples as f64;
        let caption_loss_mean = cap_sum / valid as f64;
        Ok(Self {
            coca_loss: weights.combine(contrastive_loss, caption_loss_mean),
            caption_loss_mean,
            perplexity: perplexity(cap_sum, valid)?,
            contrastive_loss,
            caption_loss_sum: cap_sum,
            valid_tokens: valid,
            samples,
        })
    }
}

/// Evaluates without dropout over consecutive batches of `batch_size`.
pub fn evaluate(
    model: &CoCaModel,
    params: &ParamSet,
    samples: &[Sample],
    batch_size: usize,
    weights: LossWeights,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let groups: Vec<&[Sample]> = samples.chunks(batch_size).collect();
    let parts = par::map(&groups, |group| -> Result<(f64, f64, usize, usize)> {
        let b = Batch::from_samples(&group.iter().collect::<Vec<_>>())?;
        let tape = Tape::new();
        let s = Session::inference(&tape, params);
        let out = model.forward(&s, tape.constant(b.images), &b.inputs)?;
        let con = contrastive_loss(out.image_latent, out.text_latent, out.temperature)?;
        let cap = caption_loss(out.logits, &b.targets, &IGNORED_TARGETS)?;
        Ok((
            con.value().item()? * b.size as f64,
            cap.sum.value().item()?,
            cap.valid_tokens,
            b.size,
        ))
    });
    let (mut con, mut cap, mut valid, mut n) = (0.0, 0.0, 0, 0);
    for p in parts {
        let (c, s, v, k) = p?;
        con += c;
        cap += s;
        valid += v;
        n += k;
    }
    let m = EvalMetrics::from_parts(weights, con, cap, valid, n)?;
    if !m.coca_loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss {}", m.coca_loss)));
    }
    Ok(m)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub coca_loss: f64,
    pub caption_loss_mean: f64,
    pub perplexity: f64,
    pub contrastive_loss: f64,
    pub lr_max_current: f64,
    pub resets_done: u32,
    pub wallclock_s: f64,
}

impl MetricsRow {
    fn new(
        epoch: usize,
        split: &str,
        m: &EvalMetrics,
        sched: &SchedulerState,
        resets: u32,
        wallclock_s: f64,
    ) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            coca_loss: m.coca_loss,
            caption_loss_mean: m.caption_loss_mean,
            perplexity: m.perplexity,
            contrastive_loss: m.contrastive_loss,
            lr_max_current: sched.lr_max,
            resets_done: resets,
            wallclock_s,
        }
    }
}

/// Appends rows to a CSV file, flushing after each one.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| Error::io("metrics", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("metrics", e))
}

#[derive(Clone, Debug)]
struct TrainState {
    params: ParamSet,
    optimizer: OptimizerState,
}

/// What the epoch callback sees.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub train: &'a MetricsRow,
    pub val: &'a MetricsRow,
    pub decision: EpochDecision,
    /// Parameters after the decision: the new best on improvement, the
    /// restored best on a reset or stop.
    pub params: &'a ParamSet,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters; the best ones if training stopped early.
    pub params: ParamSet,
    pub best_params: ParamSet,
    pub best_val_loss: f64,
    pub metrics: Vec<MetricsRow>,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Runs the training loop. Each epoch reshuffles the training set, takes
/// one optimizer step per effective batch (groups of fewer than two samples
/// are skipped), evaluates on `val` with the effective batch size and lets
/// the early stopper decide. The callback runs after every epoch.
pub fn train<F>(
    model: &CoCaModel,
    params: ParamSet,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport<'_>) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let weights = cfg.weights();
    let eff = cfg.effective_batch();
    let steps_per_epoch = epoch_order(train_set.len(), eff, cfg.seed, 0)?
        .iter()
        .filter(|g| g.len() >= 2)
        .count() as u64;
    if steps_per_epoch == 0 {
        return Err(Error::Data("training set has fewer than two samples".into()));
    }
    let mut sched = SchedulerState::new(cfg.warmup_steps, cfg.lr_max, cfg.lr_min, steps_per_epoch)?;
    let mut stopper = EarlyStopper::<TrainState>::new(cfg.early_stop)?;
    let mut state = TrainState {
        optimizer: OptimizerState::new(&params, cfg.optimizer),
        params,
    };
    let dropout = model.config.dropout > 0.0;
    let started = Instant::now();
    let clock = || {
        if cfg.log_wallclock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let mut metrics = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let (mut con, mut cap, mut valid, mut n) = (0.0, 0.0, 0, 0);
        for group in epoch_order(train_set.len(), eff, cfg.seed, epoch as u64)? {
            if group.len() < 2 {
                continue;
            }
            let micro = micro_batches(train_set, &group, cfg.micro_batch)?;
            let lr = sched.tick();
            let seed = dropout.then(|| derive_seed(cfg.seed, sched.step, 1));
            let mut step = batch_gradients(model, &state.params, &micro, weights, seed)?;
            let loss = step.coca_loss(weights);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at step {}",
                    sched.step
                )));
            }
            clip_gradients(&mut step.grads, cfg.clip_norm);
            state.optimizer.step(&mut state.params, &step.grads, lr)?;
            con += step.contrastive_loss * step.samples as f64;
            cap += step.caption_loss_sum;
            valid += step.valid_tokens;
            n += step.samples;
        }
        let train_m = EvalMetrics::from_parts(weights, con, cap, valid, n)?;
        let val_m = evaluate(model, &state.params, val_set, eff, weights)?;
        let decision = stopper.epoch_end(val_m.coca_loss, &mut state, &mut sched)?;
        let resets = stopper.state.resets_done;
        let wall = clock();
        let train_row = MetricsRow::new(epoch, "train", &train_m, &sched, resets, wall);
        let val_row = MetricsRow::new(epoch, "val", &val_m, &sched, resets, wall);
        on_epoch(&EpochReport {
            epoch,
            train: &train_row,
            val: &val_row,
            decision,
            params: &state.params,
        })?;
        metrics.push(train_row);
        metrics.push(val_row);
        if decision == EpochDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    let best_params = stopper
        .best()
        .map(|b| b.params.clone())
        .unwrap_or_else(|| state.params.clone());
    Ok(TrainOutcome {
        params: state.params,
        best_params,
        best_val_loss: stopper.state.best_val_loss,
        metrics,
        steps: sched.step,
        stopped_early,
    })
}
