//! Mini-batch training with per-epoch history, evaluation and backbone
//! pretraining.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{random_augment, AugmentPolicy};
use crate::metrics::{confusion, ConfusionMatrix, ScoredRecord};
use crate::modelkit::{
    transfer_spec, Adam, AdamConfig, BackboneProvider, BackboneRegistry, BackboneWeights, Model, ModelSpec,
};
use crate::patchset::{Patch, PatchRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seeds weight initialization and per-epoch shuffling.
    pub seed: u64,
    /// Applied to training images only.
    pub augment_policy: Option<AugmentPolicy>,
    /// Stop after this many epochs without a lower validation loss.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 15,
            learning_rate: 1e-3,
            seed: 0,
            augment_policy: None,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with augmentation on and the longer 30-epoch schedule.
    pub fn augmented(policy: AugmentPolicy) -> Self {
        TrainConfig {
            epochs: 30,
            augment_policy: Some(policy),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if let Some(p) = &self.augment_policy {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc`, full precision.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_accuracy.to_string(),
                e.val_loss.to_string(),
                e.val_accuracy.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("writing history", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_csv(file)
    }
}

fn target(r: &PatchRecord) -> f32 {
    if r.label().is_positive() {
        1.0
    } else {
        0.0
    }
}

fn check_inputs(train: &[PatchRecord], validation: &[PatchRecord]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let positives = train.iter().filter(|r| r.label().is_positive()).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::Training(format!(
            "training split has a single class ({positives} of {} pathological)",
            train.len()
        )));
    }
    Ok(())
}

/// Initializes `spec` (pretrained backbone weights from `registry`) and trains it.
pub fn train(
    spec: &ModelSpec,
    train: &[PatchRecord],
    validation: &[PatchRecord],
    config: &TrainConfig,
    registry: &BackboneRegistry,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    check_inputs(train, validation)?;
    let mut model = Model::new(spec, config.seed, registry)?;
    let history = fit(&mut model, train, validation, config)?;
    Ok((model, history))
}

/// Continues training an existing model.
pub fn fit(
    model: &mut Model,
    train: &[PatchRecord],
    validation: &[PatchRecord],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    check_inputs(train, validation)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    model.zero_grads();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        // Each epoch's permutation depends only on (seed, epoch).
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<Patch> = match &config.augment_policy {
                Some(policy) => idx
                    .par_iter()
                    .map(|&i| random_augment(&train[i].image, policy, (epoch * n + i) as u64))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let batch = if images.is_empty() {
                model.batch(idx.iter().map(|&i| &train[i].image))?
            } else {
                model.batch(&images)?
            };
            let labels: Vec<f32> = idx.iter().map(|&i| target(&train[i])).collect();
            let (loss, probs) = model.train_step(batch, &labels);
            if !loss.is_finite() {
                model.clear_caches();
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss,
                });
            }
            adam.step(model.all_params_mut());
            loss_sum += loss * idx.len() as f64;
            correct += probs.iter().zip(&labels).filter(|(p, y)| (**p >= 0.5) == (**y == 1.0)).count();
        }

        let (val_loss, val_accuracy) = loss_and_accuracy(model, validation, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: 0,
                loss: val_loss,
            });
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "{} epoch {}/{}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4} ({:.1}s)",
            model.spec().name,
            stats.epoch,
            config.epochs,
            stats.train_loss,
            stats.train_accuracy,
            stats.val_loss,
            stats.val_accuracy,
            started.elapsed().as_secs_f64()
        );
        history.epochs.push(stats);

        if val_loss < best_val {
            best_val = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.early_stop_patience.is_some_and(|p| since_best >= p) {
            history.stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    Ok(history)
}

fn loss_and_accuracy(model: &Model, records: &[PatchRecord], batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in records.chunks(batch_size) {
        let batch = model.batch(chunk.iter().map(|r| &r.image))?;
        let labels: Vec<f32> = chunk.iter().map(target).collect();
        let (l, probs) = model.eval_batch(&batch, &labels);
        loss += l * chunk.len() as f64;
        correct += probs.iter().zip(&labels).filter(|(p, y)| (**p >= 0.5) == (**y == 1.0)).count();
    }
    Ok((loss / records.len() as f64, correct as f64 / records.len() as f64))
}

/// Accuracy at a threshold plus raw scores for ROC analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub threshold: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub scores: Vec<ScoredRecord>,
}

/// Scores every record; a record is called pathological when its score is
/// at least `threshold`.
pub fn evaluate(model: &Model, records: &[PatchRecord], threshold: f64) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let probs = model.predict(records.iter().map(|r| &r.image))?;
    let scores: Vec<ScoredRecord> = records
        .iter()
        .zip(&probs)
        .map(|(r, &p)| ScoredRecord {
            id: r.id().to_string(),
            label: r.label().is_positive(),
            score: p as f64,
        })
        .collect();
    evaluate_scores(scores, threshold)
}

/// [`evaluate`] over scores that were already computed.
pub fn evaluate_scores(scores: Vec<ScoredRecord>, threshold: f64) -> Result<Evaluation> {
    if scores.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Input(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let labels: Vec<bool> = scores.iter().map(|s| s.label).collect();
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let cm = confusion(&labels, &values, threshold)?;
    Ok(Evaluation {
        threshold,
        accuracy: cm.accuracy(),
        confusion: cm,
        scores,
    })
}

/// Trains a provider's feature stack under the standard head on a source
/// dataset and returns the learned feature weights. These can then be
/// attached to a registry as the provider's pretrained weights.
pub fn pretrain_backbone(
    provider: &dyn BackboneProvider,
    train: &[PatchRecord],
    validation: &[PatchRecord],
    config: &TrainConfig,
) -> Result<(BackboneWeights, TrainHistory)> {
    let spec = transfer_spec(provider, false)?;
    let mut model = Model::random(&spec, config.seed)?;
    let history = fit(&mut model, train, validation, config)?;
    let n = model.backbone_tensors();
    let mut tensors = model.weights();
    tensors.truncate(n);
    Ok((
        BackboneWeights {
            provider: provider.name().to_string(),
            source: format!("{} source patches", train.len()),
            tensors,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelkit::{Activation, LayerSpec};
    use crate::patchset::{LesionType, PatchMeta, PathologyTag};
    use ndarray::Array2;

    fn record(id: usize, positive: bool, value: f32) -> PatchRecord {
        let (lesion, tag) = if positive {
            (LesionType::Mass, PathologyTag::Malignant)
        } else {
            (LesionType::Normal, PathologyTag::None)
        };
        let meta = PatchMeta::new(format!("r{id}"), lesion, tag, positive.then_some(3)).unwrap();
        PatchRecord::new(meta, Array2::from_elem((256, 256), value)).unwrap()
    }

    /// Bright patches are positive; brightness varies a little.
    fn separable(n: usize, offset: usize) -> Vec<PatchRecord> {
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let jitter = (i % 5) as f32 * 0.02;
                record(offset + i, positive, if positive { 0.7 + jitter } else { 0.2 + jitter })
            })
            .collect()
    }

    /// Pools the patch straight down to 8×8 so tests stay fast.
    fn small_spec() -> ModelSpec {
        ModelSpec {
            name: "small".into(),
            input_shape: (256, 256, 1),
            layers: vec![
                LayerSpec::maxpool(32),
                LayerSpec::conv(4, 3, Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::dense(8, Activation::Relu),
                LayerSpec::dense(1, Activation::Sigmoid),
            ],
            backbone: None,
            pretrained: false,
        }
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs,
            learning_rate: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_separable_set() {
        let train_set = separable(40, 0);
        let val = separable(10, 100);
        let (model, history) = train(&small_spec(), &train_set, &val, &config(15), &BackboneRegistry::desk()).unwrap();
        assert_eq!(history.len(), 15);
        let first = history.epochs[0];
        let last = *history.last().unwrap();
        assert!(last.train_accuracy >= 0.95, "{last:?}");
        assert!(last.train_loss < first.train_loss);
        let eval = evaluate(&model, &val, 0.5).unwrap();
        assert!(eval.accuracy >= 0.9);
        assert_eq!(eval.scores.len(), 10);
    }

    #[test]
    fn deterministic_per_seed() {
        let train_set = separable(20, 0);
        let val = separable(6, 100);
        let mut cfg = config(3);
        cfg.augment_policy = Some(AugmentPolicy::default().with_seed(9));
        let r = BackboneRegistry::desk();
        let (m1, h1) = train(&small_spec(), &train_set, &val, &cfg, &r).unwrap();
        let (m2, h2) = train(&small_spec(), &train_set, &val, &cfg, &r).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1.weights(), m2.weights());
        cfg.seed += 1;
        let (_, h3) = train(&small_spec(), &train_set, &val, &cfg, &r).unwrap();
        assert_ne!(h1, h3);
    }

    #[test]
    fn one_epoch_gives_one_entry() {
        let (_, h) = train(
            &small_spec(),
            &separable(9, 0),
            &separable(3, 50),
            &config(1),
            &BackboneRegistry::desk(),
        )
        .unwrap();
        assert_eq!(h.len(), 1);
        let e = h.epochs[0];
        assert!((0.0..=1.0).contains(&e.train_accuracy) && (0.0..=1.0).contains(&e.val_accuracy));
    }

    #[test]
    fn single_class_rejected() {
        let only_pos: Vec<PatchRecord> = (0..4).map(|i| record(i, true, 0.5)).collect();
        let err = train(&small_spec(), &only_pos, &separable(2, 9), &config(1), &BackboneRegistry::desk()).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn empty_splits_rejected() {
        let r = BackboneRegistry::desk();
        assert!(matches!(
            train(&small_spec(), &[], &separable(2, 0), &config(1), &r),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            train(&small_spec(), &separable(4, 0), &[], &config(1), &r),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bad_config_rejected() {
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().unwrap_err().is_config());
        }
        assert_eq!(TrainConfig::augmented(AugmentPolicy::default()).epochs, 30);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..config(5)
        };
        let err = train(&small_spec(), &separable(16, 0), &separable(4, 50), &cfg, &BackboneRegistry::desk());
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
    }

    #[test]
    fn early_stop_truncates_history() {
        let cfg = TrainConfig {
            early_stop_patience: Some(1),
            learning_rate: 0.5,
            ..config(30)
        };
        let (_, h) = train(&small_spec(), &separable(16, 0), &separable(4, 50), &cfg, &BackboneRegistry::desk()).unwrap();
        assert!(h.len() < 30 && h.stopped_early);
    }

    #[test]
    fn evaluate_examples() {
        let s = |score, label| ScoredRecord {
            id: "x".into(),
            label,
            score,
        };
        let e = evaluate_scores(vec![s(0.9, true), s(0.9, true)], 0.5).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let e = evaluate_scores(vec![s(0.9, true), s(0.1, true)], 0.5).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert!(matches!(evaluate_scores(vec![], 0.5), Err(Error::Input(_))));
        assert!(evaluate_scores(vec![s(0.9, true)], 1.5).is_err());
    }

    #[test]
    fn history_csv_header() {
        let h = TrainHistory {
            epochs: vec![EpochStats {
                epoch: 1,
                train_loss: 0.5,
                train_accuracy: 0.75,
                val_loss: 0.25,
                val_accuracy: 1.0,
            }],
            stopped_early: false,
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.5,0.75,0.25,1\n"
        );
    }

    #[test]
    fn pretrained_weights_flow_into_transfer_model() {
        let mut registry = BackboneRegistry::desk();
        let provider = registry.default_for(crate::modelkit::BackboneKind::Mobilenet).unwrap();
        let (weights, _) = pretrain_backbone(provider.as_ref(), &separable(8, 0), &separable(2, 50), &config(1)).unwrap();
        let expected = weights.tensors.clone();
        registry.attach_weights(weights).unwrap();
        let spec = registry.build_transfer(crate::modelkit::BackboneKind::Mobilenet, true).unwrap();
        let model = Model::new(&spec, 77, &registry).unwrap();
        assert_eq!(model.weights()[..expected.len()], expected[..]);
        // Same topology either way; only initial values differ.
        let plain = registry.build_transfer(crate::modelkit::BackboneKind::Mobilenet, false).unwrap();
        assert_eq!(plain.layers, spec.layers);
        let random = Model::new(&plain, 77, &registry).unwrap();
        assert_ne!(random.weights()[0], expected[0]);
    }
}
