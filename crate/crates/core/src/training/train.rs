use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::ForwardContext;
use crate::loss::{mse, probabilistic_loss};
use crate::model::{BatchInputs, Model, ModelConfig, ModelPrediction};
use crate::numerics::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
use crate::preprocessing::{effective_gain, GainStats};

/// Optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a lower validation loss.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalisation".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_j: f64,
    pub val_j: f64,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: String,
    pub fold: usize,
    pub seed: u64,
    /// Validation MSE of the restored best checkpoint.
    pub mse: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub curve: Vec<CurvePoint>,
}

/// Per-sample evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub label: f64,
    pub mu: f64,
    pub log_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub rows: Vec<PredictionRow>,
}

/// Gains used for evaluating `samples`: the recorded gain for non-silent
/// maskers and a seeded draw from `N(ν, ζ²)` for silent ones.
pub fn silent_gammas(samples: &[&Sample], stats: Option<&GainStats>, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    samples
        .iter()
        .map(|s| effective_gain(s.is_silent_masker, s.gamma, stats, &mut rng))
        .collect()
}

pub(crate) const EVAL_BATCH: usize = 64;

/// Eval-mode predictions in fixed-size chunks.
pub fn predict(model: &Model, samples: &[&Sample], gammas: &[f64]) -> Result<Vec<ModelPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, g) in samples.chunks(EVAL_BATCH).zip(gammas.chunks(EVAL_BATCH)) {
        out.extend(model.predict_batch(&BatchInputs::from_samples(chunk, g)?)?);
    }
    Ok(out)
}

/// Mean of each participant dimension over `samples`.
pub fn participant_means(samples: &[&Sample]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::Config("no samples".into()))?;
    let m = first.participant.len();
    let mut sum = vec![0.0; m];
    for s in samples {
        if s.participant.len() != m {
            return Err(Error::dim("participant vectors differ in length"));
        }
        for (acc, v) in sum.iter_mut().zip(s.participant.data()) {
            *acc += v;
        }
    }
    Ok(sum.into_iter().map(|v| v / samples.len() as f64).collect())
}

/// Eval-mode MSE and per-sample outputs; late fusion reports the adapter
/// output. Silent-masker gains come from the model's stored gain statistics
/// and `seed`.
pub fn evaluate(model: &Model, samples: &[&Sample], seed: u64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let fusion = model.config().fusion;
    let gammas = silent_gammas(samples, model.metadata.gain_stats.as_ref(), seed)?;
    let preds = predict(model, samples, &gammas)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let m = mse(&preds, &labels, fusion)?;
    let rows = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let d = p.distribution(fusion)?;
            Ok(PredictionRow {
                id: s.id.clone(),
                label: s.label,
                mu: d.mu,
                log_sigma: d.log_sigma,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation { mse: m, rows })
}

fn validation_loss(model: &Model, samples: &[&Sample], gammas: &[f64]) -> Result<(f64, f64)> {
    let fusion = model.config().fusion;
    let preds = predict(model, samples, gammas)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let dists = preds.iter().map(|p| p.distribution(fusion)).collect::<Result<Vec<_>>>()?;
    Ok((probabilistic_loss(&dists, &labels)?, mse(&preds, &labels, fusion)?))
}

/// Batches of `size` indices; a trailing singleton joins the previous batch
/// because training-mode batch normalisation needs two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch}: non-finite {what}")),
        other => other,
    }
}

/// Trains a fresh model with mini-batch Adam on the probabilistic loss.
///
/// `seed` fixes initialisation, shuffling, dropout and silent-gain draws.
/// The parameters with the lowest validation loss are restored at the end,
/// and training stops early after `patience` epochs without improvement.
pub fn train(
    config: &ModelConfig,
    train_set: &[&Sample],
    val_set: &[&Sample],
    seed: u64,
    fold: usize,
    tc: &TrainConfig,
) -> Result<(RunResult, Model)> {
    tc.validate()?;
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::Config(format!(
            "need at least 2 training and 1 validation samples, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut model = Model::new(config.clone(), seed)?;
    let stats = GainStats::from_gains(train_set.iter().map(|s| (s.gamma, s.is_silent_masker)));
    model.metadata.seed = Some(seed);
    model.metadata.fold = Some(fold);
    model.metadata.gain_stats = stats;
    model.metadata.participant_means = Some(participant_means(train_set)?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let val_gammas = silent_gammas(val_set, stats.as_ref(), seed)?;
    let labels: Vec<f64> = train_set.iter().map(|s| s.label).collect();
    let mut adam: Vec<AdamState> = model
        .params()
        .iter()
        .map(|p| AdamState::for_param(p, tc.learning_rate))
        .collect();

    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let gammas: Vec<f64> = train_set
            .iter()
            .map(|s| effective_gain(s.is_silent_masker, s.gamma, stats.as_ref(), &mut rng))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for batch in batches(&order, tc.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| train_set[i]).collect();
            let g: Vec<f64> = batch.iter().map(|&i| gammas[i]).collect();
            let y: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let x = BatchInputs::from_samples(&samples, &g)?;
            let mut ctx = ForwardContext::train(&mut rng);
            let (graph, j) = model
                .objective(model.params(), &x, &y, &mut ctx)
                .map_err(|e| diverged(e, epoch))?;
            let loss = graph.value(j).data()[0];
            let grads = graph.backward(j).map_err(|e| diverged(e, epoch))?;
            model.apply_batch_stats(&ctx);
            drop(ctx);
            let params = model.params_mut();
            params.zero_grads();
            params.accumulate(&grads);
            for (p, state) in params.iter_mut().zip(adam.iter_mut()) {
                adam_step(p, state)?;
            }
            total += loss * batch.len() as f64;
        }
        let train_j = total / train_set.len() as f64;
        let (val_j, _) = validation_loss(&model, val_set, &val_gammas).map_err(|e| diverged(e, epoch))?;
        if !train_j.is_finite() || !val_j.is_finite() {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: train J {train_j}, validation J {val_j}"
            )));
        }
        curve.push(CurvePoint { epoch, train_j, val_j });
        log::debug!("{} fold {fold} seed {seed} epoch {epoch}: train J {train_j:.5} val J {val_j:.5}", config.variant());
        match &best {
            Some((b, _, _)) if val_j >= *b => {}
            _ => best = Some((val_j, epoch, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= tc.patience {
            break;
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    let (_, val_mse) = validation_loss(&best_model, val_set, &val_gammas)?;
    let result = RunResult {
        config: config.variant().to_string(),
        fold,
        seed,
        mse: val_mse,
        epochs_run: curve.len(),
        best_epoch,
        curve,
    };
    Ok((result, best_model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::model::{Fusion, Variant};

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn defaults_follow_the_published_optimiser() {
        let tc = TrainConfig::default();
        assert_eq!(tc.learning_rate, 1e-4);
        assert_eq!((tc.batch_size, tc.max_epochs, tc.patience), (32, 100, 10));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
        assert_eq!(serde_json::from_str::<TrainConfig>(r#"{"batch_size": 8}"#).unwrap().batch_size, 8);
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            max_epochs: 3,
            patience: 10,
        }
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let d = generate_synthetic_dataset(30, 2, &ModelConfig::miniature()).unwrap();
        let (tr, va) = crate::data::kfold_split(&d.samples, 0).unwrap();
        let cfg = ModelConfig::miniature().with_variant(Variant {
            fusion: Fusion::Late,
            include_participant: true,
            include_visual: false,
        });
        let (a, ma) = train(&cfg, &tr, &va, 5, 0, &quick()).unwrap();
        let (b, _) = train(&cfg, &tr, &va, 5, 0, &quick()).unwrap();
        assert_eq!(a, b);
        assert!(a.mse >= 0.0 && a.epochs_run <= 3);
        let best_val = a.curve.iter().map(|c| c.val_j).fold(f64::INFINITY, f64::min);
        assert_eq!(a.curve[a.best_epoch - 1].val_j, best_val);
        let e = evaluate(&ma, &va, 5).unwrap();
        assert_eq!(e.mse.to_bits(), a.mse.to_bits());
        assert_eq!(e.rows.len(), va.len());
        assert_eq!(ma.metadata.participant_means.as_ref().unwrap().len(), 5);
    }

    #[test]
    fn divergence_is_reported() {
        let d = generate_synthetic_dataset(20, 2, &ModelConfig::miniature()).unwrap();
        let (tr, va) = crate::data::kfold_split(&d.samples, 0).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e300,
            ..quick()
        };
        let err = train(&ModelConfig::miniature(), &tr, &va, 1, 0, &tc).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err:?}");
    }

    #[test]
    fn silent_gains_are_seeded_and_recorded_gains_pass_through() {
        let d = generate_synthetic_dataset(40, 4, &ModelConfig::miniature()).unwrap();
        let refs: Vec<&Sample> = d.samples.iter().collect();
        let stats = GainStats { nu: -0.5, zeta: 0.5 };
        let a = silent_gammas(&refs, Some(&stats), 1).unwrap();
        assert_eq!(a, silent_gammas(&refs, Some(&stats), 1).unwrap());
        for (s, g) in refs.iter().zip(&a) {
            if !s.is_silent_masker {
                assert_eq!(*g, s.gamma);
            }
        }
    }
}
