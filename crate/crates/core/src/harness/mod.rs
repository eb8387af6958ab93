//! Training, evaluation, ablation drivers, attention rollout and the CLI.

pub mod cli;
mod config;
mod rollout;

pub use config::{RunConfig, TrainSettings};
pub use rollout::{rollout, rollout_from_trace, write_pgm, RolloutMap};

use std::fmt::Write as _;
use std::thread;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MmvitModel, ModelConfig};
use crate::tensor::{Rng, Tensor};
use crate::tokenize::{CompressedClip, ModalityMask};

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for m in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc,
            opt(m.val_loss),
            opt(m.val_acc)
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MmvitModel,
    pub metrics: Vec<EpochMetrics>,
}

/// Top-1 accuracy, mean loss and per-class hit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn class_accuracy(&self, class: usize) -> f64 {
        let (c, n) = self.per_class[class];
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }
}

/// Rejects clips whose geometry or label the model cannot take.
pub fn check_dataset(config: &ModelConfig, clips: &[CompressedClip]) -> Result<()> {
    for (i, c) in clips.iter().enumerate() {
        if c.frames() != config.frames || c.height() != config.height || c.width() != config.width {
            return Err(Error::config(format!(
                "clip {i} is {}x{}x{} (TxHxW), model expects {}x{}x{}",
                c.frames(),
                c.height(),
                c.width(),
                config.frames,
                config.height,
                config.width
            )));
        }
        if c.label >= config.num_classes {
            return Err(Error::config(format!(
                "clip {i} has label {} but the model has {} classes",
                c.label, config.num_classes
            )));
        }
    }
    Ok(())
}

fn workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `f` over `items` on scoped threads; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let chunk = items.len().div_ceil(workers()).max(1);
    if items.len() <= 1 || chunk == items.len() {
        return items.iter().map(&f).collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn cross_entropy(logits: &Tensor, label: usize) -> f64 {
    let z = logits.data();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Evaluates `model` with the given modalities kept.
pub fn evaluate_report(
    model: &MmvitModel,
    clips: &[CompressedClip],
    mask: ModalityMask,
) -> Result<EvalReport> {
    mask.validate()?;
    check_dataset(model.config(), clips)?;
    if clips.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let opts = ForwardOptions {
        mask,
        ..Default::default()
    };
    let results = par_map(clips, |c| {
        model
            .forward_with(c, &opts)
            .map(|o| (o.logits.argmax() == c.label, cross_entropy(&o.logits, c.label)))
    });
    let mut per_class = vec![(0, 0); model.config().num_classes];
    let mut correct = 0;
    let mut loss = 0.0;
    for (c, r) in clips.iter().zip(results) {
        let (hit, l) = r?;
        per_class[c.label].1 += 1;
        if hit {
            per_class[c.label].0 += 1;
            correct += 1;
        }
        loss += l;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / clips.len() as f64,
        loss: loss / clips.len() as f64,
        per_class,
    })
}

/// Top-1 accuracy with dropped modalities reduced to their positional
/// encoding.
pub fn evaluate(model: &MmvitModel, clips: &[CompressedClip], mask: ModalityMask) -> Result<f64> {
    Ok(evaluate_report(model, clips, mask)?.accuracy)
}

/// Plain mini-batch SGD on cross-entropy with plateau learning-rate decay.
///
/// Shuffling uses a stream derived from the model seed and the epoch, and
/// per-clip gradients are summed in batch order, so a run is
/// bit-reproducible regardless of thread scheduling.
pub fn train(
    model_config: &ModelConfig,
    settings: &TrainSettings,
    train_set: &[CompressedClip],
    val_set: &[CompressedClip],
) -> Result<TrainOutcome> {
    let model = MmvitModel::new(model_config.clone())?;
    train_from(model, settings, train_set, val_set)
}

/// Like [`train`] but continues from an existing model.
pub fn train_from(
    mut model: MmvitModel,
    settings: &TrainSettings,
    train_set: &[CompressedClip],
    val_set: &[CompressedClip],
) -> Result<TrainOutcome> {
    settings.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_dataset(model.config(), train_set)?;
    check_dataset(model.config(), val_set)?;
    let opts = ForwardOptions {
        mask: settings.mask,
        ..Default::default()
    };
    let mut lr = settings.lr;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut metrics = Vec::with_capacity(settings.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=settings.epochs {
        let mut rng = Rng::derive(model.config().seed, 0x7EA1_0000 + epoch as u64);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(settings.batch_size) {
            let clips: Vec<&CompressedClip> = batch.iter().map(|&i| &train_set[i]).collect();
            let results = par_map(&clips, |c| model.loss_and_grads(c, &opts));
            let mut total: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            for (clip, r) in clips.iter().zip(results) {
                let (loss, logits, grads) = r?;
                loss_sum += loss;
                hits += usize::from(logits.argmax() == clip.label);
                for (acc, g) in total.iter_mut().zip(&grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let step = lr / batch.len() as f64;
            for (p, g) in model.params_mut().iter_mut().zip(&total) {
                for (w, v) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= step * v;
                }
            }
        }
        let n = train_set.len() as f64;
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let r = evaluate_report(&model, val_set, settings.mask)?;
            (Some(r.loss), Some(r.accuracy))
        };
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: lr {lr} loss {:.4} acc {:.3} val_acc {:?}",
            row.train_loss,
            row.train_acc,
            val_acc
        );
        if !row.train_loss.is_finite() {
            return Err(Error::State(format!(
                "training diverged at epoch {epoch} (loss {})",
                row.train_loss
            )));
        }
        // Plateau tracking in percentage points of the monitored accuracy.
        let monitored = 100.0 * val_acc.unwrap_or(row.train_acc);
        if monitored > best + settings.min_gain {
            best = monitored;
            stale = 0;
        } else {
            stale += 1;
            if stale >= settings.patience {
                lr *= settings.lr_decay;
                stale = 0;
            }
        }
        metrics.push(row);
    }
    Ok(TrainOutcome { model, metrics })
}

/// Accuracy with all modalities and with each single modality dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mask: ModalityMask,
    pub accuracy: f64,
}

pub const ABLATION_HEADER: &str = "modalities,dropped,accuracy";

pub fn ablation_masks() -> Vec<ModalityMask> {
    let mut masks = vec![ModalityMask::all()];
    masks.extend(crate::tokenize::Modality::ALL.map(ModalityMask::without));
    masks
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let dropped: String = crate::tokenize::Modality::ALL
            .iter()
            .filter(|m| !r.mask.keeps(**m))
            .map(|m| m.symbol())
            .collect();
        let kept: Vec<String> = r.mask.label().chars().map(String::from).collect();
        writeln!(out, "{},{},{}", kept.join("+"), dropped, r.accuracy).unwrap();
    }
    out
}

/// Inference-time modality drop on a trained model.
pub fn ablate_modalities(model: &MmvitModel, clips: &[CompressedClip]) -> Result<Vec<AblationRow>> {
    ablation_masks()
        .into_iter()
        .map(|mask| {
            Ok(AblationRow {
                mask,
                accuracy: evaluate(model, clips, mask)?,
            })
        })
        .collect()
}

/// Retrains from scratch for every modality combination.
pub fn ablate_modalities_retrain(
    model_config: &ModelConfig,
    settings: &TrainSettings,
    train_set: &[CompressedClip],
    val_set: &[CompressedClip],
) -> Result<Vec<AblationRow>> {
    ablation_masks()
        .into_iter()
        .map(|mask| {
            let s = TrainSettings {
                mask,
                ..settings.clone()
            };
            let out = train(model_config, &s, train_set, val_set)?;
            Ok(AblationRow {
                mask,
                accuracy: evaluate(&out.model, val_set, mask)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OrderRow {
    pub order: crate::model::AttentionOrder,
    pub accuracy: f64,
    /// Logits of the probe clip.
    pub probe_logits: Tensor,
}

pub const ORDER_HEADER: &str = "order,accuracy,probe_logits";

pub fn order_csv(rows: &[OrderRow]) -> String {
    let mut out = format!("{ORDER_HEADER}\n");
    for r in rows {
        let logits: Vec<String> = r.probe_logits.data().iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{}", r.order, r.accuracy, logits.join(" ")).unwrap();
    }
    out
}

/// Trains one model per attention order and scores it on `val_set`;
/// the first validation clip doubles as the probe.
pub fn ablate_order(
    model_config: &ModelConfig,
    settings: &TrainSettings,
    train_set: &[CompressedClip],
    val_set: &[CompressedClip],
) -> Result<Vec<OrderRow>> {
    if !model_config.variant.is_factorized_stm() {
        return Err(Error::config(format!(
            "attention order applies to variants III and IV, not {}",
            model_config.variant
        )));
    }
    let probe = val_set
        .first()
        .or(train_set.first())
        .ok_or_else(|| Error::Data("no clips to probe".into()))?;
    crate::model::AttentionOrder::all()
        .into_iter()
        .map(|order| {
            let cfg = ModelConfig {
                order,
                ..model_config.clone()
            };
            let out = train(&cfg, settings, train_set, val_set)?;
            let accuracy = if val_set.is_empty() {
                out.metrics.last().map_or(0.0, |m| m.train_acc)
            } else {
                evaluate(&out.model, val_set, ModalityMask::all())?
            };
            Ok(OrderRow {
                order,
                accuracy,
                probe_logits: out.model.forward(probe)?,
            })
        })
        .collect()
}
