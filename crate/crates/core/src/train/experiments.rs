use std::collections::HashMap;
use std::fmt::Write as _;

use super::{evaluate, fuse_pair, train_stage2_with, FusionObjective, Result, TrainConfig, TrainError, TrainLog};
use crate::image::{split_dataset, ImagePair};
use crate::metrics::{mutual_information, ssim, ImageMetrics, SsimParams, DEFAULT_BINS};
use crate::model::ModelWeights;

/// One seed of the loss comparison. Arm A trains with the dual-input fusion
/// loss, arm B with the single-input loss against the visible band.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub seed: u64,
    /// Mean MI(fused, infrared) over the test split.
    pub mi_a: f64,
    pub mi_b: f64,
    /// Mean SSIM(fused, infrared) over the test split.
    pub ssim_a: f64,
    pub ssim_b: f64,
    pub log_a: TrainLog,
    pub log_b: TrainLog,
}

impl BiasRow {
    pub fn a_wins(&self) -> bool {
        self.mi_a > self.mi_b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
}

pub const BIAS_HEADER: &str = "seed,mi_fuse,mi_visible_only,ssim_fuse,ssim_visible_only";

impl BiasReport {
    /// Seeds on which arm A has strictly higher MI.
    pub fn wins(&self) -> usize {
        self.rows.iter().filter(|r| r.a_wins()).count()
    }

    /// Strict majority of seeds favour arm A.
    pub fn majority(&self) -> bool {
        2 * self.wins() > self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BIAS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.seed, r.mi_a, r.mi_b, r.ssim_a, r.ssim_b);
        }
        out
    }
}

fn select<'a>(pairs: &'a [ImagePair], ids: &[String]) -> Vec<ImagePair> {
    let by_id: HashMap<&'a str, &'a ImagePair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
}

/// Mean MI and SSIM of fused outputs against the infrared band.
fn infrared_scores(weights: &ModelWeights, pairs: &[ImagePair]) -> Result<(f64, f64)> {
    let (mut mi, mut s) = (0.0, 0.0);
    for p in pairs {
        let f = fuse_pair(weights, p)?;
        let (w, h) = f.dims();
        mi += mutual_information(&f, &p.infrared, DEFAULT_BINS)?;
        s += ssim(&f, &p.infrared, &SsimParams::fitting(w, h))?;
    }
    let n = pairs.len() as f64;
    Ok((mi / n, s / n))
}

/// For each seed: split the pairs, train both arms on the train split from
/// the same stage-1 weights and the same fusion initialization, then score
/// them on the test split.
pub fn bias_experiment(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    stage1: &ModelWeights,
    seeds: &[u64],
) -> Result<BiasReport> {
    if seeds.is_empty() {
        return Err(TrainError::Config("bias experiment needs at least one seed".into()));
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let split = split_dataset(&ids, seed)?;
        let train = select(pairs, &split.train);
        let test = select(pairs, &split.test);
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let a = train_stage2_with(&cfg, &train, stage1, FusionObjective::Fuse, None)?;
        let b = train_stage2_with(&cfg, &train, stage1, FusionObjective::VisibleOnly, None)?;
        let (mi_a, ssim_a) = infrared_scores(&a.weights, &test)?;
        let (mi_b, ssim_b) = infrared_scores(&b.weights, &test)?;
        rows.push(BiasRow {
            seed,
            mi_a,
            mi_b,
            ssim_a,
            ssim_b,
            log_a: a.log,
            log_b: b.log,
        });
    }
    Ok(BiasReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Layers,
    Batch,
    Lr,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Layers => "layers",
            SweepAxis::Batch => "batch",
            SweepAxis::Lr => "lr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layers" => Some(SweepAxis::Layers),
            "batch" => Some(SweepAxis::Batch),
            "lr" => Some(SweepAxis::Lr),
            _ => None,
        }
    }

    fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(TrainError::Config(format!("{} must be a positive integer, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::Layers => cfg.model.layers = count()?,
            SweepAxis::Batch => cfg.batch_size = count()?,
            SweepAxis::Lr => cfg.learning_rate = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// Aggregate over the evaluation pairs.
    pub metrics: ImageMetrics,
    /// Set on a layers row whose SSIM drops below the previous row's.
    pub flagged: bool,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str = "axis,value,entropy,scd,mi,ssim,flag";

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                self.axis.name(),
                r.value,
                m.entropy,
                m.scd,
                m.mi,
                m.ssim,
                if r.flagged { "non-monotone" } else { "" }
            );
        }
        out
    }
}

/// One stage-2 run per value, all with the base seed, sorted by value.
///
/// With ten or more pairs the runs train on the seeded train split and are
/// scored on its test split; smaller sets are used for both.
pub fn sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    pairs: &[ImagePair],
    stage1: &ModelWeights,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let (train, test) = if pairs.len() >= 10 {
        let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        let split = split_dataset(&ids, base.seed)?;
        (select(pairs, &split.train), select(pairs, &split.test))
    } else {
        (pairs.to_vec(), pairs.to_vec())
    };
    let configs = sorted
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<SweepRow> = Vec::with_capacity(sorted.len());
    for (cfg, &value) in configs.iter().zip(&sorted) {
        let out = train_stage2_with(cfg, &train, stage1, FusionObjective::Fuse, None)?;
        let metrics = evaluate(&out.weights, &test, DEFAULT_BINS)?
            .aggregate()
            .ok_or(TrainError::EmptyDataset)?;
        let flagged = axis == SweepAxis::Layers && rows.last().is_some_and(|p| metrics.ssim < p.metrics.ssim);
        rows.push(SweepRow {
            value,
            metrics,
            flagged,
            log: out.log,
        });
    }
    Ok(SweepTable { axis, rows })
}
