//! Joint training, evaluation and visual-only inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::optim::Optimizer;
use super::model::{audio_trace, build_model, collate, Mode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LOSS_CSV_HEADER};
use crate::mtlam::AddressingScore;
use crate::params::{name_seed, ParamStore};
use crate::tensor::{Graph, Tensor};
use crate::toytask::ToySample;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π s / S))` with `S = total_steps − 1`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps <= 1 {
        return lr_max;
    }
    let s = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Top-1 accuracy of each head.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadAccuracy {
    pub acc_v: f64,
    pub acc_a: f64,
    pub acc_va: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub acc: HeadAccuracy,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,acc_v,acc_a,acc_va";

/// Per-step losses and per-epoch validation accuracies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<(usize, LossReport)>,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for (step, r) in &self.steps {
            s.push_str(&r.csv_row(*step));
            s.push('\n');
        }
        s
    }

    pub fn epoch_csv(&self) -> String {
        let mut s = String::from(EPOCH_CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.acc.acc_v, e.acc.acc_a, e.acc.acc_va));
        }
        s
    }
}

/// Knobs that shape a run without changing its result.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this state instead of a fresh initialisation.
    pub resume: Option<Checkpoint>,
    /// Stop once this many steps have been taken in total (for interruption).
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    /// Parameters with the best validation accuracy of the fused head.
    pub best: Checkpoint,
    /// Latest state, including optimizer buffers, for resuming.
    pub last: Checkpoint,
    /// Steps and epochs run by this call only (a resumed run continues the
    /// log of the run it resumes).
    pub log: MetricsLog,
    /// True when every scheduled step ran.
    pub finished: bool,
}

const BEST_ACC: &str = "state.best_acc_va";
const BEST_STEP: &str = "state.best_step";

/// Minibatch descent on the total loss with a cosine-annealed step size.
pub fn train(
    cfg: &ModelConfig,
    train_set: &[ToySample],
    val_set: &[ToySample],
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    cfg.validate()?;
    let tc = &cfg.train;
    let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;

    let (mut model, mut opt, extras, mut step) = match opts.resume {
        Some(ck) => {
            if ck.config.hash() != cfg.hash() {
                return Err(Error::ConfigHashMismatch);
            }
            let model = Model::from_params(cfg, ck.params)?;
            let opt = Optimizer::restore(&tc.optimizer, &model.params, &ck.extras)?;
            (model, opt, ck.extras, ck.step as usize)
        }
        None => {
            let model = build_model(cfg, tc.seed)?;
            let opt = Optimizer::new(&tc.optimizer, &model.params)?;
            (model, opt, ParamStore::new(), 0)
        }
    };
    let mut log = MetricsLog::default();
    let mut best_acc = extras.get(BEST_ACC).map(|t| t.data()[0] as f64).unwrap_or(f64::NEG_INFINITY);
    let mut best_step = extras.get(BEST_STEP).map(|t| t.data()[0] as u64).unwrap_or(0);
    let mut best_params = collect_prefixed(&extras, "best.");
    if best_params.is_empty() {
        best_params = model.params.clone();
    }

    let limit = opts.stop_after.unwrap_or(total_steps).min(total_steps);
    while step < limit {
        let epoch = step / steps_per_epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(name_seed(tc.seed, &format!("epoch.{epoch}"))));
        let within = step % steps_per_epoch;
        let start = within * tc.batch_size;
        let end = (start + tc.batch_size).min(order.len());
        let batch = order[start..end].iter().map(|&i| &train_set[i]);
        let lr = cosine_lr(step, total_steps, tc.optimizer.lr_max, tc.optimizer.lr_min);
        let report = train_step(&mut model, &mut opt, batch, lr, step as u64 + 1)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.steps.push((step, report));
        step += 1;

        if step % steps_per_epoch == 0 {
            let acc = evaluate(&model, val_set)?;
            log.epochs.push(EpochMetrics { epoch: step / steps_per_epoch - 1, acc });
            // Compared at f32 precision, the precision it is checkpointed at,
            // so resumed runs pick the same best epoch.
            let acc_va = acc.acc_va as f32 as f64;
            if acc_va > best_acc {
                best_acc = acc_va;
                best_step = step as u64;
                best_params = model.params.clone();
            }
        }
    }

    let mut extras = opt.state();
    for (name, t) in best_params.iter() {
        extras.insert(format!("best.{name}"), t.clone());
    }
    extras.insert(BEST_ACC, Tensor::scalar(best_acc as f32));
    extras.insert(BEST_STEP, Tensor::scalar(best_step as f32));

    let best = Checkpoint::new(cfg.clone(), best_step, best_params, ParamStore::new());
    let last = Checkpoint::new(cfg.clone(), step as u64, model.params, extras);
    Ok(TrainOutcome {
        best,
        last,
        log,
        finished: step == total_steps,
    })
}

fn collect_prefixed(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest, t.clone());
        }
    }
    out
}

/// One update on a batch; returns the batch losses before the update.
/// `t` numbers the update from 1.
pub fn train_step<'a>(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: impl IntoIterator<Item = &'a ToySample>,
    lr: f64,
    t: u64,
) -> Result<LossReport> {
    let (visual, audio, labels) = collate(batch)?;
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, true);
    let v = g.constant(visual);
    let a = g.constant(audio);
    let (parts, total) = model.losses(&mut g, &p, v, a, &labels)?;
    let report = LossReport::read(&g, &parts, total)?;
    if !report.total.is_finite() {
        return Ok(report);
    }
    g.backward(total)?;
    for (name, var) in p.iter() {
        let Some(grad) = g.grad(var) else { continue };
        opt.update(model.params.get_mut(name)?, name, &grad, lr, t)?;
    }
    Ok(report)
}

const EVAL_BATCH: usize = 64;

/// Top-1 accuracy of all three heads; leaves the model untouched.
pub fn evaluate(model: &Model, split: &[ToySample]) -> Result<HeadAccuracy> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let mut hits = [0usize; 3];
    for chunk in split.chunks(EVAL_BATCH) {
        let (visual, audio, labels) = collate(chunk)?;
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g, false);
        let v = g.constant(visual);
        let a = g.constant(audio);
        let out = model.forward(&mut g, &p, v, Some(a), Mode::Joint)?;
        let heads = [out.logits_v, out.logits_a.expect("joint mode"), out.logits_va];
        for (h, var) in hits.iter_mut().zip(heads) {
            let preds = argmax_rows(g.value(var));
            *h += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
    }
    let n = split.len() as f64;
    Ok(HeadAccuracy {
        acc_v: hits[0] as f64 / n,
        acc_a: hits[1] as f64 / n,
        acc_va: hits[2] as f64 / n,
    })
}

/// Row-wise argmax of a `[B, C]` tensor; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap();
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Prediction of the fused head from the visual stream alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub label: usize,
    pub logits: Tensor,
    /// `(level, scores)` for every memory level.
    pub scores: Vec<(usize, AddressingScore)>,
}

/// Classify one `[T, D_in]` visual stream without any audio. The audio
/// model is never run; if it were, the call fails with a contract violation.
pub fn infer_visual_only(model: &Model, visual: &Tensor) -> Result<Inference> {
    audio_trace::reset();
    let shape = visual.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "visual stream must be [T, D_in]".into(),
        });
    }
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(visual.reshape(vec![1, shape[0], shape[1]])?);
    let out = model.forward(&mut g, &p, x, None, Mode::VisualOnly)?;
    if audio_trace::was_set() {
        return Err(Error::ContractViolation(
            "the audio temporal model ran during visual-only inference".into(),
        ));
    }
    let logits = g.value(out.logits_va).clone();
    let label = argmax_rows(&logits)[0];
    let scores = model
        .banks()
        .iter()
        .zip(&out.scores)
        .map(|(b, &s)| {
            let t = g.value(s);
            let shape = t.shape()[1..].to_vec();
            Ok((b.level(), AddressingScore::new(t.reshape(shape)?)?))
        })
        .collect::<Result<_>>()?;
    Ok(Inference {
        label,
        logits: logits.reshape(vec![model.config().classes])?,
        scores,
    })
}
