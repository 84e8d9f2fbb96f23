//! Two-stage training.
//!
//! Stage 1 fits encoder and decoder as an autoencoder on single images.
//! Stage 2 keeps both frozen and fits only the fusion blocks on pairs. Runs
//! are single-threaded and fully determined by the config seed.

mod adam;
mod config;
mod experiments;
mod log;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::{GrayImage, ImageError, ImagePair};
use crate::losses::{l_ae_terms, l_fuse_terms, LossTerms};
use crate::metrics::{evaluate_fusion, MetricError, MetricReport};
use crate::model::{
    forward_ae, fuse_images, fuse_pyramids, save_weights, Bound, FeaturePyramid, ModelError, ModelWeights, Stage,
};
use crate::tensor::{Tape, Tensor, TensorError};

pub use adam::{adam_step, Adam, Moments, BETA1, BETA2, EPSILON};
pub use config::{LrSchedule, TrainConfig, TrainStage};
pub use experiments::{bias_experiment, sweep, BiasReport, BIAS_HEADER, BiasRow, SweepAxis, SweepRow, SweepTable, SWEEP_HEADER};
pub use log::{EpochRecord, LossRecord, TrainLog, LOG_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    EmptyDataset,
    #[error("non-finite {what} at epoch {epoch}; last good checkpoint is from epoch {last_good_epoch}")]
    NonFinite {
        what: String,
        epoch: usize,
        last_good_epoch: usize,
        last_good: Box<ModelWeights>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// What stage 2 optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionObjective {
    /// Feature loss plus dual-input structural loss.
    Fuse,
    /// `l_pixel(f, vis) + alpha * l_ssim(f, vis)`: the single-input loss
    /// applied to the fused image against the visible band only.
    VisibleOnly,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: TrainLog,
}

/// Both bands of every pair, as stage-1 reconstruction targets.
pub fn stage1_images(pairs: &[ImagePair]) -> Vec<GrayImage> {
    pairs
        .iter()
        .flat_map(|p| [p.visible.clone(), p.infrared.clone()])
        .collect()
}

fn check_dims(cfg: &TrainConfig, dims: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    for (w, h) in dims {
        if (w, h) != (cfg.model.width, cfg.model.height) {
            return Err(TrainError::Config(format!(
                "{w}x{h} image does not match model input {}x{}",
                cfg.model.width, cfg.model.height
            )));
        }
    }
    Ok(())
}

fn expect_stage(cfg: &TrainConfig, stage: TrainStage) -> Result<()> {
    if cfg.stage != stage {
        return Err(TrainError::Config(format!("config is for stage {:?}, expected {stage:?}", cfg.stage)));
    }
    Ok(())
}

fn terms_record(tape: &Tape, t: &LossTerms) -> LossRecord {
    let v = |x| tape.value(x).item().unwrap_or(f64::NAN);
    LossRecord {
        loss: v(t.total),
        primary: v(t.primary),
        structural: v(t.structural),
    }
}

type SampleLoss<'a> = dyn Fn(&mut Tape, &Bound, usize) -> Result<LossTerms> + 'a;

/// Mean loss over all samples at fixed weights.
fn dataset_loss(weights: &ModelWeights, n: usize, sample: &SampleLoss) -> Result<LossRecord> {
    let mut acc = LossRecord::default();
    for i in 0..n {
        let mut tape = Tape::new();
        let b = weights.bind(&mut tape, |_| false);
        let t = sample(&mut tape, &b, i)?;
        acc.add(&terms_record(&tape, &t));
    }
    Ok(acc.scaled(1.0 / n as f64))
}

fn non_finite(what: &str, epoch: usize, last_good: &(usize, ModelWeights)) -> TrainError {
    TrainError::NonFinite {
        what: what.to_string(),
        epoch,
        last_good_epoch: last_good.0,
        last_good: Box::new(last_good.1.clone()),
    }
}

/// Shared mini-batch loop. Batch gradients are the mean of per-sample
/// gradients; only parameters whose stage passes `trainable` are updated.
fn run(
    cfg: &TrainConfig,
    mut weights: ModelWeights,
    trainable: fn(Stage) -> bool,
    n: usize,
    sample: &SampleLoss,
    checkpoint: Option<&Path>,
    mut log: TrainLog,
) -> Result<TrainOutcome> {
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new();
    let mut last_good = (0usize, weights.clone());

    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        let lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch);
        order.shuffle(&mut rng);
        let mut sum = LossRecord::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let mut tape = Tape::new();
                let b = weights.bind(&mut tape, trainable);
                let terms = sample(&mut tape, &b, i)?;
                let rec = terms_record(&tape, &terms);
                if !rec.loss.is_finite() {
                    return Err(non_finite("loss", epoch, &last_good));
                }
                sum.add(&rec);
                let mut g = tape.backward(terms.total)?;
                for (name, var) in b.leaves(&tape) {
                    let Some(gv) = g.take(var) else { continue };
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, x) in acc.data_mut().iter_mut().zip(gv.data()) {
                                *a += x;
                            }
                        }
                        None => {
                            grads.insert(name.to_string(), gv);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                *g = g.map(|v| v * scale);
            }
            if grads.values().any(|g| !g.is_finite()) {
                return Err(non_finite("gradient", epoch, &last_good));
            }
            adam.step(&mut weights, &grads, lr)?;
            if grads.keys().any(|k| !weights.params[k].value.is_finite()) {
                return Err(non_finite("parameter", epoch, &last_good));
            }
        }
        let mean = sum.scaled(1.0 / n as f64);
        let is_checkpoint = epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs;
        let checkpoint_loss = if is_checkpoint {
            let full = dataset_loss(&weights, n, sample)?;
            if let Some(path) = checkpoint {
                save_weights(&weights, path)?;
            }
            last_good = (epoch, weights.clone());
            Some(full.loss)
        } else {
            None
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean,
            checkpoint_loss,
        });
        log.wall_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome { weights, log })
}

fn ae_sample<'a>(images: &'a [Tensor], cfg: &'a TrainConfig) -> impl Fn(&mut Tape, &Bound, usize) -> Result<LossTerms> + 'a {
    move |tape, b, i| {
        let x = tape.constant(images[i].clone());
        let y = forward_ae(tape, b, x)?;
        Ok(l_ae_terms(tape, y, x, &cfg.loss)?)
    }
}

/// Trains encoder and decoder from a fresh initialization.
///
/// Weights are written to `checkpoint` (atomically, last one wins) every
/// `checkpoint_every` epochs and after the final epoch.
pub fn train_stage1(cfg: &TrainConfig, images: &[GrayImage], checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    expect_stage(cfg, TrainStage::Autoencoder)?;
    check_dims(cfg, images.iter().map(|i| i.dims()))?;
    let tensors: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    let weights = ModelWeights::init(&cfg.model, cfg.seed)?;
    let sample = ae_sample(&tensors, cfg);
    run(
        cfg,
        weights,
        |s| s != Stage::Fusion,
        tensors.len(),
        &sample,
        checkpoint,
        TrainLog::default(),
    )
}

/// Mean autoencoder loss of `weights` over `images`.
pub fn ae_loss(cfg: &TrainConfig, weights: &ModelWeights, images: &[GrayImage]) -> Result<LossRecord> {
    let tensors: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    if tensors.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sample = ae_sample(&tensors, cfg);
    dataset_loss(weights, tensors.len(), &sample)
}

/// Encoder outputs of one pair under frozen weights.
struct CachedPair {
    vis: Tensor,
    ir: Tensor,
    vis_features: Vec<Tensor>,
    ir_features: Vec<Tensor>,
}

fn cache_pairs(weights: &ModelWeights, pairs: &[ImagePair]) -> Result<Vec<CachedPair>> {
    pairs
        .iter()
        .map(|p| {
            let mut tape = Tape::new();
            let b = weights.bind(&mut tape, |_| false);
            let (vis, ir) = (p.visible.to_tensor(), p.infrared.to_tensor());
            let v = tape.constant(vis.clone());
            let i = tape.constant(ir.clone());
            let vf = crate::model::encode(&mut tape, &b, v)?;
            let irf = crate::model::encode(&mut tape, &b, i)?;
            Ok(CachedPair {
                vis,
                ir,
                vis_features: vf.values(&tape),
                ir_features: irf.values(&tape),
            })
        })
        .collect()
}

fn fusion_sample<'a>(
    cache: &'a [CachedPair],
    cfg: &'a TrainConfig,
    objective: FusionObjective,
) -> impl Fn(&mut Tape, &Bound, usize) -> Result<LossTerms> + 'a {
    move |tape, b, i| {
        let c = &cache[i];
        let constants = |tape: &mut Tape, ts: &[Tensor]| FeaturePyramid {
            scales: ts.iter().map(|t| tape.constant(t.clone())).collect(),
        };
        let vp = constants(tape, &c.vis_features);
        let ip = constants(tape, &c.ir_features);
        let vis = tape.constant(c.vis.clone());
        let out = fuse_pyramids(tape, b, vp, ip)?;
        let terms = match objective {
            FusionObjective::Fuse => {
                let ir = tape.constant(c.ir.clone());
                l_fuse_terms(
                    tape,
                    out.fused,
                    vis,
                    ir,
                    &out.fused_pyramid,
                    &out.vis_pyramid,
                    &out.ir_pyramid,
                    &cfg.loss,
                )?
            }
            FusionObjective::VisibleOnly => l_ae_terms(tape, out.fused, vis, &cfg.loss)?,
        };
        Ok(terms)
    }
}

fn stage2_start(cfg: &TrainConfig, pairs: &[ImagePair], stage1: &ModelWeights) -> Result<ModelWeights> {
    cfg.validate()?;
    expect_stage(cfg, TrainStage::Fusion)?;
    check_dims(cfg, pairs.iter().map(|p| p.dims()))?;
    stage1.validate()?;
    Ok(stage1.with_fresh_fusion(&cfg.model, cfg.seed)?)
}

/// Trains freshly initialized fusion blocks on top of frozen stage-1
/// encoder and decoder.
pub fn train_stage2(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    stage1: &ModelWeights,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    train_stage2_with(cfg, pairs, stage1, FusionObjective::Fuse, checkpoint)
}

pub fn train_stage2_with(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    stage1: &ModelWeights,
    objective: FusionObjective,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let weights = stage2_start(cfg, pairs, stage1)?;
    let cache = cache_pairs(&weights, pairs)?;
    let sample = fusion_sample(&cache, cfg, objective);
    let log = TrainLog {
        initial: Some(dataset_loss(&weights, cache.len(), &sample)?),
        ..TrainLog::default()
    };
    run(cfg, weights, |s| s == Stage::Fusion, cache.len(), &sample, checkpoint, log)
}

/// Mean stage-2 loss of `weights` over `pairs`.
pub fn fusion_loss(
    cfg: &TrainConfig,
    weights: &ModelWeights,
    pairs: &[ImagePair],
    objective: FusionObjective,
) -> Result<LossRecord> {
    let cache = cache_pairs(weights, pairs)?;
    if cache.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sample = fusion_sample(&cache, cfg, objective);
    dataset_loss(weights, cache.len(), &sample)
}

pub fn fuse_pair(weights: &ModelWeights, pair: &ImagePair) -> Result<GrayImage> {
    let out = fuse_images(weights, &pair.visible.to_tensor(), &pair.infrared.to_tensor())?;
    Ok(GrayImage::from_tensor(&out)?)
}

/// Fuses every pair and scores it against its sources.
pub fn evaluate(weights: &ModelWeights, pairs: &[ImagePair], bins: usize) -> Result<MetricReport> {
    let rows = pairs
        .iter()
        .map(|p| Ok(evaluate_fusion(&fuse_pair(weights, p)?, p, bins)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(rows))
}
