//! Scene ingestion, minibatch training and validation scoring.

use std::time::Instant;

use cooptraj_tensor::{AdamW, AdamWConfig, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assoc::{associate_uncorrected, correct_scene, AssocConfig, AssocError, IdentityMap};
use crate::config::{ModelConfig, TrainingConfig};
use crate::eval::{min_ade, min_fde, EvalCase, EvalError};
use crate::geometry::to_global;
use crate::model::{Model, ModelError, TargetPrediction};
use crate::prepare::{prepare_scene, MapRegistry, PrepareError, PreparedScene};
use crate::scene::Scene;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Assoc(#[from] AssocError),
    #[error(transparent)]
    Prepare(#[from] PrepareError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training set is empty")]
    EmptyDataset,
}

/// A scene after identity handling, ready for the network.
#[derive(Debug, Clone)]
pub struct Ingested {
    /// The scene the network sees (corrected when correction is on).
    pub scene: Scene,
    pub identity: IdentityMap,
    pub prepared: PreparedScene,
}

/// Correct identities (unless ablated) and precompute network inputs.
pub fn ingest(
    scene: &Scene,
    assoc: &AssocConfig,
    cfg: &ModelConfig,
    maps: &mut MapRegistry,
) -> Result<Ingested, TrainError> {
    let (scene, identity) = if cfg.ablation.use_mvcm {
        correct_scene(scene, assoc)?
    } else {
        (scene.clone(), associate_uncorrected(scene, assoc)?)
    };
    let prepared = prepare_scene(&scene, &identity, cfg, maps)?;
    Ok(Ingested {
        scene,
        identity,
        prepared,
    })
}

pub fn ingest_all(scenes: &[Scene], assoc: &AssocConfig, cfg: &ModelConfig) -> Result<Vec<Ingested>, TrainError> {
    let mut maps = MapRegistry::default();
    scenes.iter().map(|s| ingest(s, assoc, cfg, &mut maps)).collect()
}

/// Cosine decay from `lr` to `lr * min_lr_ratio` over `total` steps.
pub fn lr_at(cfg: &TrainingConfig, step: usize, total: usize) -> f64 {
    let p = if total <= 1 { 0.0 } else { step.min(total - 1) as f64 / (total - 1) as f64 };
    let lo = cfg.lr * cfg.min_lr_ratio;
    lo + 0.5 * (cfg.lr - lo) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub propose: f64,
    pub refine: f64,
    pub cls: f64,
    pub grad_norm: f64,
    pub val_min_ade: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub parameters: usize,
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
    pub initial_val_min_ade: Option<f64>,
    pub final_val_min_ade: Option<f64>,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainingConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainingConfig) -> Self {
        let opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            model,
            cfg,
            opt,
            rng,
            step: 0,
        }
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch)
    }

    /// One optimizer step on `batch`; returns the summed loss terms and the
    /// pre-clip gradient norm, or `None` when nothing was supervised.
    pub fn step(&mut self, batch: &[&PreparedScene], lr: f64) -> Result<Option<([f64; 4], f64)>, TrainError> {
        let mut tape = Tape::new();
        let mut cache = self.model.new_cache();
        let mut total = None;
        let mut sums = [0.0; 4];
        let mut n = 0usize;
        for scene in batch {
            if let Some((l, b)) = self.model.loss(&mut tape, scene, &mut cache)? {
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l).map_err(ModelError::from)?,
                });
                sums[0] += b.total;
                sums[1] += b.propose;
                sums[2] += b.refine;
                sums[3] += b.cls;
                n += 1;
            }
        }
        let Some(total) = total else {
            return Ok(None);
        };
        let loss = tape.scale(total, 1.0 / n as f64);
        if !tape.scalar(loss).is_finite() {
            return Err(ModelError::NonFinite("loss").into());
        }
        let grads = tape.backward(loss).map_err(ModelError::from)?;
        let store = &mut self.model.store;
        store.zero_grad();
        grads.accumulate_into(store);
        let norm = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(ModelError::NonFinite("gradient").into());
        }
        if let Some(clip) = self.cfg.grad_clip {
            if norm > clip {
                store.scale_grads(clip / norm);
            }
        }
        self.opt.config.lr = lr;
        self.opt.step(store);
        self.step += 1;
        Ok(Some((sums.map(|s| s / n as f64), norm)))
    }

    pub fn train_epoch(&mut self, epoch: usize, data: &[PreparedScene], total_steps: usize) -> Result<EpochStats, TrainError> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = [0.0; 4];
        let mut norm = 0.0;
        let mut batches = 0usize;
        let mut lr = self.cfg.lr;
        for chunk in order.chunks(self.cfg.batch) {
            lr = lr_at(&self.cfg, self.step, total_steps);
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &data[i]).collect();
            if let Some((terms, g)) = self.step(&batch, lr)? {
                for (a, t) in acc.iter_mut().zip(terms) {
                    *a += t;
                }
                norm += g;
                batches += 1;
            }
        }
        let b = batches.max(1) as f64;
        Ok(EpochStats {
            epoch,
            lr,
            loss: acc[0] / b,
            propose: acc[1] / b,
            refine: acc[2] / b,
            cls: acc[3] / b,
            grad_norm: norm / b,
            val_min_ade: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Train for the configured number of epochs, scoring `val` after each
    /// epoch when given.
    pub fn fit(
        &mut self,
        train: &[PreparedScene],
        val: Option<&[PreparedScene]>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<TrainReport, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let start = Instant::now();
        let total = self.cfg.epochs * self.batches_per_epoch(train.len());
        let initial = val.map(|v| validation_min_ade(&self.model, v)).transpose()?;
        let mut epochs = Vec::new();
        for epoch in 1..=self.cfg.epochs {
            let mut stats = self.train_epoch(epoch, train, total)?;
            if let Some(v) = val {
                stats.val_min_ade = Some(validation_min_ade(&self.model, v)?);
            }
            on_epoch(&stats);
            epochs.push(stats);
        }
        Ok(TrainReport {
            parameters: self.model.parameter_count(),
            steps: self.step,
            final_val_min_ade: epochs.last().and_then(|e| e.val_min_ade).or(initial),
            initial_val_min_ade: initial,
            epochs,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Evaluation cases using the ground truth stored in the prepared scene.
pub fn prepared_cases(model: &Model, scene: &PreparedScene) -> Result<Vec<EvalCase>, TrainError> {
    let preds = model.predict(scene)?;
    Ok(preds
        .into_iter()
        .zip(&scene.decoder.targets)
        .map(|(p, t)| EvalCase {
            scenario_id: scene.scenario_id.clone(),
            agent_count: scene.agent_count,
            target: p.target,
            hypotheses: p.modes,
            truth: t.truth.iter().map(|g| g.map(|g| to_global(&t.origin, g))).collect(),
        })
        .collect())
}

/// Mean minADE over every target with at least one valid future frame.
pub fn validation_min_ade(model: &Model, scenes: &[PreparedScene]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scenes {
        for c in prepared_cases(model, s)? {
            if c.truth.iter().any(Option::is_some) {
                sum += min_ade(&c.hypotheses, &c.truth)?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyBatch.into());
    }
    Ok(sum / n as f64)
}

/// Truth for a prediction made on a perturbed scene, taken from the clean
/// scene: the clean track whose first future state equals the perturbed
/// target's. Future frames are never perturbed, so the match is exact.
pub fn clean_truth(clean: &Scene, seen: &Scene, pred: &TargetPrediction) -> Option<Vec<Option<[f64; 2]>>> {
    let now = seen.current_frame();
    let horizon = pred.modes.first().map_or(0, Vec::len);
    let probe = seen.ego_tracks.get(&pred.target)?.at(now + 1)?;
    let track = clean.ego_tracks.values().find(|t| t.at(now + 1) == Some(probe))?;
    Some((1..=horizon).map(|k| track.at(now + k).map(|s| s.position)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub min_ade: f64,
    pub min_fde: f64,
    pub cases: usize,
}

/// minADE / minFDE of `model` on ingested perturbed scenes, scored against
/// the matching clean scenes.
pub fn score_against_clean(model: &Model, data: &[(Ingested, &Scene)]) -> Result<Scores, TrainError> {
    let (mut ade, mut fde, mut n) = (0.0, 0.0, 0usize);
    for (ing, clean) in data {
        for p in model.predict(&ing.prepared)? {
            let Some(truth) = clean_truth(clean, &ing.scene, &p) else {
                continue;
            };
            if truth.iter().all(Option::is_none) {
                continue;
            }
            ade += min_ade(&p.modes, &truth)?;
            fde += min_fde(&p.modes, &truth)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyBatch.into());
    }
    Ok(Scores {
        min_ade: ade / n as f64,
        min_fde: fde / n as f64,
        cases: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, GeneratorConfig};

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainingConfig {
            lr: 1e-3,
            min_lr_ratio: 0.1,
            ..TrainingConfig::default()
        };
        assert!((lr_at(&cfg, 0, 11) - 1e-3).abs() < 1e-18);
        assert!((lr_at(&cfg, 10, 11) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 5, 11) - 5.5e-4).abs() < 1e-15);
    }

    fn tiny() -> (ModelConfig, Vec<PreparedScene>) {
        let mut cfg = ModelConfig::toy();
        cfg.decoder.horizon = 10;
        cfg.decoder.chunks = 2;
        let gen = GeneratorConfig {
            agents: 4,
            ..GeneratorConfig::default()
        };
        let scenes: Vec<Scene> = (0..2).map(|s| generate_synthetic(&gen, s).unwrap().scene).collect();
        let data = ingest_all(&scenes, &AssocConfig::default(), &cfg).unwrap();
        (cfg, data.into_iter().map(|i| i.prepared).collect())
    }

    #[test]
    fn steps_on_one_batch_reduce_its_loss() {
        let (cfg, data) = tiny();
        let tc = TrainingConfig {
            lr: 3e-3,
            batch: 2,
            ..TrainingConfig::default()
        };
        let mut t = Trainer::new(Model::new(&cfg).unwrap(), tc);
        let batch: Vec<&PreparedScene> = data.iter().collect();
        let first = t.step(&batch, 3e-3).unwrap().unwrap().0[0];
        let mut last = first;
        for _ in 0..30 {
            last = t.step(&batch, 3e-3).unwrap().unwrap().0[0];
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data) = tiny();
        let tc = TrainingConfig {
            epochs: 2,
            batch: 1,
            ..TrainingConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(Model::new(&cfg).unwrap(), tc.clone());
            t.fit(&data, None, |_| {}).unwrap().epochs.last().unwrap().loss
        };
        assert_eq!(run(), run());
    }
}
