//! Episodic training of the deviation encoder and fixed-reference
//! inference.
//!
//! Each episode contributes focal + dice on the patch score map, BCE on the
//! image score and the dual loss, all with unit weights. A batch averages
//! the losses and gradients of independent episodes before one AdamW step.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, Episode, EpisodeManifest, EpisodeShape, FeatureError, FeatureSet};
use crate::ide::{self, Checkpoint, IdeConfig, IdeError, IdeParams, Mode};
use crate::nve::{self, NveConfig, NveError};
use crate::scoring::{self, Model, PreparedReferences, ReferenceContext, ScoreConfig, ScoreError, ScoreMap};
use crate::tensor::{AdamW, AdamWConfig, LrSchedule, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("episode {epoch}/{index} (query {query}): {source}")]
    Episode {
        epoch: usize,
        index: usize,
        query: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("non-finite loss in episode {epoch}/{index} (query {query})")]
    NonFinite { epoch: usize, index: usize, query: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Nve(#[from] NveError),
    #[error(transparent)]
    Ide(#[from] IdeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(rename = "L1")]
    pub normal_shots: usize,
    #[serde(rename = "L2")]
    pub abnormal_shots: usize,
    /// Permit `L1 <= L2`.
    pub allow_unordered_shots: bool,
    pub queries_per_epoch: usize,
    /// Draw the training queries once instead of every epoch.
    pub fixed_query_set: bool,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub bce_eps: f64,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of `base_lr`.
    pub floor_fraction: f64,
    pub optimizer: AdamWConfig,
    pub nve: NveConfig,
    pub ide: IdeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            normal_shots: 4,
            abnormal_shots: 1,
            allow_unordered_shots: false,
            queries_per_epoch: 500,
            fixed_query_set: false,
            seed: 0,
            lambda1: 1.0,
            lambda2: 0.8,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1e-5,
            bce_eps: 1e-6,
            base_lr: 1e-3,
            warmup_start_lr: 1e-5,
            warmup_epochs: 2,
            floor_fraction: 0.01,
            optimizer: AdamWConfig::default(),
            nve: NveConfig::default(),
            ide: IdeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            normals: self.normal_shots,
            abnormals: self.abnormal_shots,
            allow_unordered: self.allow_unordered_shots,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.queries_per_epoch == 0 {
            return bad("epochs, batch_size and queries_per_epoch must be positive");
        }
        self.shape().validate()?;
        for (name, v) in [("dice_eps", self.dice_eps), ("bce_eps", self.bce_eps)] {
            if !(v > 0.0 && v < 1e-3) {
                return Err(TrainError::Config(format!("{name}={v} must lie in (0, 1e-3)")));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return bad("focal_alpha must lie in [0, 1] and focal_gamma be non-negative");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.base_lr < 0.0 || self.warmup_start_lr < 0.0 || !(0.0..=1.0).contains(&self.floor_fraction) {
            return bad("learning rates must be non-negative and floor_fraction in [0, 1]");
        }
        self.ide.validate()?;
        self.nve.validate(self.ide.channels)?;
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_start_lr: self.warmup_start_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            floor_fraction: self.floor_fraction,
            steps_per_epoch,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.queries_per_epoch.div_ceil(self.batch_size)
    }
}

/// The four loss components of one episode or a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub focal: f64,
    pub dice: f64,
    pub bce: f64,
    pub dual: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.focal + self.dice + self.bce + self.dual
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
}

/// Tab-separated `step lr focal dice bce dual total` lines.
pub fn trace_tsv(rows: &[TraceRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{}\t{:e}\t{:.8}\t{:.8}\t{:.8}\t{:.8}\t{:.8}",
            r.step,
            r.lr,
            l.focal,
            l.dice,
            l.bce,
            l.dual,
            l.total()
        );
    }
    out
}

/// Mean total loss per epoch, in epoch order.
pub fn epoch_means(rows: &[TraceRow]) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.loss.total()).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

impl TrainOutput {
    pub fn model(&self, config: IdeConfig) -> Model {
        Model {
            config,
            params: self.checkpoint.params.clone(),
        }
    }
}

/// Losses and parameter gradients of one episode.
pub struct EpisodeResult {
    pub loss: LossParts,
    pub grads: Vec<Vec<f32>>,
}

/// Forward and backward pass of one episode. Features and NVE outputs enter
/// the tape as constants, so only encoder parameters receive gradients.
pub fn episode_step(
    params: &IdeParams,
    cfg: &TrainConfig,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult> {
    let refs = &episode.references;
    let prepared = PreparedReferences::new(refs, &cfg.nve)?;
    let input = prepared.encoder_input::<f32>(&cfg.ide, refs)?;
    let query = nve::deviation_field(&episode.query.features, &prepared.pool, &cfg.nve)?;

    let mut tape = Tape::<f32>::new();
    let vars = params.bind(&mut tape, true);
    let out = ide::forward(&mut tape, &cfg.ide, &vars, &input, Mode::Train(rng))?;
    let dist: Vec<f32> = query.nearest_dist.iter().map(|&d| d as f32).collect();
    let patch = scoring::patch_scores_on_tape(&mut tape, out.deviations, &query.denoised, &dist)?;
    let n = episode.query.mask.len();
    let image = tape.topk_mean(patch, scoring::top_count(n))?;

    let mask = &episode.query.mask;
    let focal = tape.focal_loss(patch, mask, cfg.focal_alpha, cfg.focal_gamma, cfg.bce_eps)?;
    let dice = tape.dice_loss(patch, mask, cfg.dice_eps)?;
    let bce = tape.bce_loss(image, episode.query.label.is_abnormal(), cfg.bce_eps)?;
    let dual = ide::dual_loss(
        &mut tape,
        out.deviations,
        &prepared.abnormal.denoised,
        &refs.abnormal_mask,
        cfg.lambda1,
        cfg.lambda2,
    )?;
    let a = tape.add(focal, dice)?;
    let b = tape.add(bce, dual.total)?;
    let total = tape.add(a, b)?;

    let scalar = |v| tape.value(v).data()[0] as f64;
    let loss = LossParts {
        focal: scalar(focal),
        dice: scalar(dice),
        bce: scalar(bce),
        dual: scalar(dual.total),
    };
    if !scalar(total).is_finite() {
        return Err(TrainError::Tensor(TensorError::NonFinite { op: "episode_loss" }));
    }
    tape.backward(total)?;
    Ok(EpisodeResult {
        loss,
        grads: vars.grads(&tape),
    })
}

/// Deterministic stream for one purpose within one run.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const QUERY_STREAM: u64 = 1 << 40;
const EPISODE_STREAM: u64 = 2 << 40;
const DROPOUT_STREAM: u64 = 3 << 40;

/// `queries_per_epoch` distinct queries, or repeated shuffled passes over a
/// smaller pool (each repeat still gets fresh references).
fn epoch_queries(feasible: &[usize], cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let draw = if cfg.fixed_query_set { 0 } else { epoch as u64 };
    let mut rng = stream_rng(cfg.seed, QUERY_STREAM + draw);
    let mut out = Vec::with_capacity(cfg.queries_per_epoch);
    while out.len() < cfg.queries_per_epoch {
        let count = (cfg.queries_per_epoch - out.len()).min(feasible.len());
        out.extend(sample(&mut rng, feasible.len(), count).into_iter().map(|i| feasible[i]));
    }
    out
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(pool: &FeatureSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    let params = IdeParams::init(&cfg.ide, cfg.seed)?;
    train_from(pool, cfg, params)
}

pub fn train_from(pool: &FeatureSet, cfg: &TrainConfig, mut params: IdeParams) -> Result<TrainOutput> {
    cfg.validate()?;
    if pool.channels() != cfg.ide.channels {
        return Err(TrainError::Config(format!(
            "features have C={}, encoder expects {}",
            pool.channels(),
            cfg.ide.channels
        )));
    }
    let shape = cfg.shape();
    let feasible = features::feasible_queries(pool, &shape);
    if feasible.is_empty() {
        return Err(TrainError::Config(
            "no query admits an episode with the requested shot counts".into(),
        ));
    }
    let steps = cfg.steps_per_epoch();
    let schedule = cfg.schedule(steps);
    let mut optimizer = AdamW::new(cfg.optimizer, &params.sizes());
    let mut trace = Vec::with_capacity(schedule.total_steps());

    for epoch in 0..cfg.epochs {
        let queries = epoch_queries(&feasible, cfg, epoch);
        for (b, batch) in queries.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps + b;
            let lr = schedule.lr_at(step)?;
            let results: Vec<EpisodeResult> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &q)| {
                    let index = b * cfg.batch_size + j;
                    let tag = ((epoch as u64) << 20) + index as u64;
                    let wrap = |e: TrainError| match e {
                        TrainError::Tensor(TensorError::NonFinite { .. }) => {
                            TrainError::NonFinite { epoch, index, query: q }
                        }
                        other => TrainError::Episode {
                            epoch,
                            index,
                            query: q,
                            source: Box::new(other),
                        },
                    };
                    let mut rng = stream_rng(cfg.seed, EPISODE_STREAM + tag);
                    let episode = features::episode_for_query(pool, q, &shape, &mut rng)
                        .map_err(|e| wrap(e.into()))?;
                    let mut drop = stream_rng(cfg.seed, DROPOUT_STREAM + tag);
                    episode_step(&params, cfg, &episode, &mut drop).map_err(wrap)
                })
                .collect::<Result<_>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut mean = LossParts::default();
            let mut grads: Vec<Vec<f64>> = params.sizes().iter().map(|&n| vec![0.0; n]).collect();
            for r in &results {
                mean.focal += r.loss.focal * scale;
                mean.dice += r.loss.dice * scale;
                mean.bce += r.loss.bce * scale;
                mean.dual += r.loss.dual * scale;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x as f64 * scale);
                }
            }
            let grads: Vec<Vec<f32>> = grads
                .into_iter()
                .map(|g| g.into_iter().map(|x| x as f32).collect())
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            let mut blocks: Vec<&mut [f32]> = params.blocks_mut().iter_mut().map(Tensor::data_mut).collect();
            optimizer.step(&mut blocks, &grad_refs, lr)?;
            log::debug!("step {step} lr {lr:.3e} loss {:.5}", mean.total());
            trace.push(TraceRow {
                step,
                epoch,
                lr,
                loss: mean,
            });
        }
        if let Some(last) = trace.last() {
            log::info!("epoch {} done, last batch loss {:.5}", epoch + 1, last.loss.total());
        }
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            heads: cfg.ide.heads,
            params,
            optimizer: Some(optimizer),
        },
        trace,
    })
}

/// Scores every query of `manifest` against its fixed references. The
/// model is only read.
pub fn infer(
    dataset: &FeatureSet,
    manifest: &EpisodeManifest,
    model: Option<&Model>,
    nve_cfg: &NveConfig,
    score_cfg: &ScoreConfig,
) -> Result<Vec<(usize, ScoreMap)>> {
    let ids = manifest.query_ids(dataset)?;
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let refs = manifest.references(dataset)?;
    let ctx = ReferenceContext::build(&refs, model, nve_cfg, score_cfg)?;
    let queries: Vec<Tensor<f32>> = ids.iter().map(|&i| dataset.image_tensor(i)).collect();
    let maps = ctx.score_all(&queries)?;
    Ok(ids.into_iter().zip(maps).collect())
}
