//! Two-scale smooth-L1 supervision, Adam, the step-decay schedule and the
//! training loop.

use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::data::{collate, crop_at, crop_origin, Batch, Normalization};
use crate::error::{Error, Result};
use crate::inference::{evaluate_dataset, EvalItem};
use crate::model::{GhostStereo, Prediction};
use crate::nn::{ParamId, ParamStore, Session};
use crate::regression::UPSAMPLE;
use crate::tensor::Tensor;
use crate::types::StereoSample;

pub const BASE_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

/// Step decay: the rate is multiplied by `factor` at every milestone epoch
/// reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<u64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn for_phase(phase: Phase) -> Self {
        let milestones = match phase {
            Phase::Pretrain => vec![10, 14, 16, 18],
            Phase::Finetune => vec![300],
        };
        LrSchedule {
            base: BASE_LR,
            milestones,
            factor: 0.5,
        }
    }

    pub fn rate(&self, epoch: u64) -> f64 {
        let n = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(n as i32)
    }
}

pub fn lr_schedule(epoch: i64, phase: Phase) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::NegativeEpoch(epoch));
    }
    Ok(LrSchedule::for_phase(phase).rate(epoch as u64))
}

/// Ground truth and mask sampled at every 4th pixel, for the quarter term.
pub fn quarter_targets(gt: &Tensor, mask: &[bool]) -> (Tensor, Vec<bool>) {
    let [b, h, w] = [gt.dim(0), gt.dim(1), gt.dim(2)];
    let (hq, wq) = (h / UPSAMPLE, w / UPSAMPLE);
    let src = |i: &[usize]| (i[0] * h + UPSAMPLE * i[1]) * w + UPSAMPLE * i[2];
    let gq = Tensor::from_fn(&[b, hq, wq], |i| gt.data()[src(i)]);
    let mut mq = Vec::with_capacity(b * hq * wq);
    for bi in 0..b {
        for y in 0..hq {
            for x in 0..wq {
                mq.push(mask[src(&[bi, y, x])]);
            }
        }
    }
    (gq, mq)
}

pub struct LossTerms {
    pub total: Var,
    pub quarter: f64,
    pub full: f64,
    pub quarter_valid: usize,
    pub full_valid: usize,
}

/// `λ0 · smoothL1(gt_q − 4·pred_q) + λ1 · smoothL1(gt − pred_f)`, each term
/// averaged over its valid pixels. Both terms are in full-resolution
/// pixels; an empty mask contributes zero.
pub fn stereo_loss(s: &Session, pred: &Prediction, gt: &Tensor, mask: &[bool], weights: [f64; 2]) -> Result<LossTerms> {
    let full_shape = s.graph.shape(pred.full);
    if full_shape != gt.shape() || mask.len() != gt.numel() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {full_shape:?} vs ground truth {:?} ({} mask entries)",
            gt.shape(),
            mask.len()
        )));
    }
    let (gq, mq) = quarter_targets(gt, mask);
    let scaled = s.graph.scale(pred.quarter, UPSAMPLE as f64);
    let lq = s.graph.masked_smooth_l1(scaled, &gq, &mq);
    let lf = s.graph.masked_smooth_l1(pred.full, gt, mask);
    let (quarter_valid, full_valid) = (mq.iter().filter(|&&m| m).count(), mask.iter().filter(|&&m| m).count());
    if quarter_valid == 0 {
        warn!("quarter-resolution loss term has no valid pixels");
    }
    if full_valid == 0 {
        warn!("full-resolution loss term has no valid pixels");
    }
    let total = s
        .graph
        .add(s.graph.scale(lq, weights[0]), s.graph.scale(lf, weights[1]));
    Ok(LossTerms {
        total,
        quarter: s.value(lq).item(),
        full: s.value(lf).item(),
        quarter_valid,
        full_valid,
    })
}

/// Adam with bias correction and optional decoupled-free L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    /// First and second moments, indexed like the parameter store; empty
    /// for non-learnable entries.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |_: ()| -> Vec<Tensor> {
            store
                .entries()
                .iter()
                .map(|e| {
                    if e.learnable {
                        Tensor::zeros(e.value.shape())
                    } else {
                        Tensor::zeros(&[0])
                    }
                })
                .collect()
        };
        Adam {
            config,
            t: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(*id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv + c.weight_decay * *pv;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub adam: Adam,
    pub norm: Normalization,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub round: u32,
    /// Step at which the current schedule round began.
    pub round_start_step: u64,
    pub best_val_epe: Option<f64>,
}

impl TrainState {
    pub fn new(config: &ModelConfig, store: ParamStore, norm: Normalization) -> Self {
        TrainState {
            config: config.clone(),
            adam: Adam::new(&store, AdamConfig::default()),
            store,
            norm,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            epoch: 0,
            round: 0,
            round_start_step: 0,
            best_val_epe: None,
        }
    }

    /// Restart the learning-rate schedule from its first epoch.
    pub fn start_round(&mut self) {
        self.round += 1;
        self.round_start_step = self.step;
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Train until `state.step` reaches this value.
    pub total_steps: u64,
    pub batch_size: usize,
    pub steps_per_epoch: u64,
    pub schedule: LrSchedule,
    /// Random crop `(h, w)`; `None` trains on full images.
    pub crop: Option<(usize, usize)>,
    /// Where to write one checkpoint per epoch and diagnostic dumps.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_quarter: f64,
    pub loss_full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
    /// Inference-mode EPE over the full training images.
    pub train_epe: f64,
    pub train_bad3: f64,
    pub val_epe: Option<f64>,
}

/// Inference-mode EPE and bad-3 over `samples` (full images, batch of one).
pub fn evaluate_samples(
    model: &GhostStereo,
    store: &ParamStore,
    norm: &Normalization,
    samples: &[StereoSample],
) -> Result<(f64, f64)> {
    let items: Vec<EvalItem> = samples
        .iter()
        .map(|sample| EvalItem {
            sample,
            foreground: None,
        })
        .collect();
    let r = evaluate_dataset(model, store, norm, &items)?;
    Ok((r.epe, r.bad3))
}

fn next_batch(state: &mut TrainState, data: &[StereoSample], opts: &TrainOptions) -> Result<Batch> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let picks: Vec<usize> = if opts.batch_size >= data.len() {
        idx
    } else {
        idx.shuffle(&mut state.rng);
        idx.truncate(opts.batch_size);
        idx
    };
    let mut crops = Vec::with_capacity(picks.len());
    let mut ids = Vec::with_capacity(picks.len());
    for &i in &picks {
        let s = &data[i];
        let (ch, cw) = opts.crop.unwrap_or((s.height(), s.width()));
        let (y0, x0) = crop_origin(s.height(), s.width(), ch, cw, &mut state.rng);
        crops.push(crop_at(s, y0, x0, ch, cw)?);
        ids.push(format!("sample{i}@{y0},{x0}"));
    }
    let refs: Vec<&StereoSample> = crops.iter().collect();
    collate(&refs, ids, &state.norm)
}

/// Forward, loss, backward and update for one batch. Returns the step
/// record; batch-norm running statistics are folded in afterwards.
pub fn train_step(model: &GhostStereo, state: &mut TrainState, batch: &Batch, lr: f64) -> Result<StepRecord> {
    let (record, grads, bn) = {
        let s = Session::train(&state.store);
        let pred = model.forward(&s, s.input(batch.left.clone()), s.input(batch.right.clone()))?;
        let terms = stereo_loss(&s, &pred, &batch.gt, &batch.mask, state.config.loss_weights)?;
        let loss = s.value(terms.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                batch_id: batch.ids.join(","),
            });
        }
        let grads = s.param_grads(terms.total);
        let record = StepRecord {
            step: state.step,
            lr,
            loss,
            loss_quarter: terms.quarter,
            loss_full: terms.full,
        };
        (record, grads, s.into_bn_updates())
    };
    state.adam.step(&mut state.store, &grads, lr);
    bn.apply(&mut state.store);
    state.step += 1;
    Ok(record)
}

fn dump_failure(dir: &Option<PathBuf>, err: &Error, batch: &Batch) {
    let (Some(dir), Error::NonFiniteLoss { step, batch_id }) = (dir, err) else {
        return;
    };
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let body = serde_json::json!({ "step": step, "batch": batch_id, "batch_ids": batch.ids });
    if let Err(e) = std::fs::write(&path, body.to_string()) {
        warn!("could not write {}: {e}", path.display());
    }
}

/// Run until `opts.total_steps`. After every epoch (and at the final step)
/// the training EPE is measured in inference mode, an optional validation
/// EPE is computed, a checkpoint is written and `on_epoch` is called.
pub fn train_loop(
    model: &GhostStereo,
    mut state: TrainState,
    train: &[StereoSample],
    val: Option<&[StereoSample]>,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.steps_per_epoch == 0 || opts.batch_size == 0 {
        return Err(Error::Config("batch size and steps per epoch must be positive".into()));
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut losses = Vec::new();
    while state.step < opts.total_steps {
        let round_epoch = (state.step - state.round_start_step) / opts.steps_per_epoch;
        let lr = opts.schedule.rate(round_epoch);
        let batch = next_batch(&mut state, train, opts)?;
        let rec = match train_step(model, &mut state, &batch, lr) {
            Ok(r) => r,
            Err(e) => {
                dump_failure(&opts.checkpoint_dir, &e, &batch);
                return Err(e);
            }
        };
        losses.push(rec.loss);
        on_step(&rec);
        let epoch_done = state.step.is_multiple_of(opts.steps_per_epoch);
        if epoch_done || state.step == opts.total_steps {
            if epoch_done {
                state.epoch += 1;
            }
            let (train_epe, train_bad3) = evaluate_samples(model, &state.store, &state.norm, train)?;
            let val_epe = match val {
                Some(v) if !v.is_empty() => Some(evaluate_samples(model, &state.store, &state.norm, v)?.0),
                _ => None,
            };
            if let Some(v) = val_epe {
                state.best_val_epe = Some(state.best_val_epe.map_or(v, |b| b.min(v)));
            }
            let record = EpochRecord {
                epoch: state.epoch,
                step: state.step,
                lr,
                mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                train_epe,
                train_bad3,
                val_epe,
            };
            losses.clear();
            info!(
                "epoch {} step {} loss {:.4} train EPE {:.4}",
                record.epoch, record.step, record.mean_loss, train_epe
            );
            if let Some(dir) = &opts.checkpoint_dir {
                crate::checkpoint::save(&dir.join("last.ckpt"), &state)?;
            }
            on_epoch(&record);
        }
    }
    Ok(state)
}

/// Seed-derived jitter for callers that need an independent stream.
pub fn derive_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.random()
}
