//! Subcommand implementations behind the `fuseformer` binary.
//!
//! Exit codes: 0 ok, 1 failed property (selftest, gradient check, diverged
//! training), 2 I/O or unreadable file, 3 shape or configuration error,
//! 4 partial evaluation.

use std::path::{Path, PathBuf};

use fuseformer::image::{
    encode_pgm, load_manifest, load_pairs, load_pgm, split_dataset, synth_pairs, GrayImage, ImageError, ImagePair,
};
use fuseformer::io::write_atomic;
use fuseformer::metrics::{evaluate_fusion, ImageMetrics, MetricError, MetricReport, REPORT_HEADER};
use fuseformer::model::{load_weights, ModelError, ModelWeights};
use fuseformer::train::{
    ae_loss, bias_experiment, fuse_pair, fusion_loss, stage1_images, sweep, train_stage1, train_stage2, FusionObjective,
    SweepAxis, TrainConfig, TrainError, TrainStage,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        let code = match e {
            ImageError::Io { .. }
            | ImageError::Malformed(_)
            | ImageError::Truncated { .. }
            | ImageError::ZeroMaxval => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Io { .. } | ModelError::Format(_) | ModelError::Checksum { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Image(i) => i.into(),
            TrainError::Io { .. } => Self::io(e.to_string()),
            TrainError::NonFinite { .. } => Self {
                code: EXIT_PROPERTY,
                message: e.to_string(),
            },
            _ => Self::config(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Worker count: `FUSEFORMER_THREADS` if set to a positive integer, else
/// the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("FUSEFORMER_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Loads a config file, or defaults when `path` is `None`, and applies the
/// command-line seed.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, stage: TrainStage) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Pairs named by the config manifest, or synthetic pairs from the seed.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Vec<ImagePair>> {
    match &cfg.manifest {
        Some(m) => Ok(load_pairs(&load_manifest(m)?)?),
        None => {
            if cfg.model.width != cfg.model.height {
                return Err(CliError::config("synthetic pairs are square; set width = height"));
            }
            Ok(synth_pairs(cfg.synthetic_pairs, cfg.model.width, cfg.seed)?)
        }
    }
}

/// Train and validation pairs. Sets of ten or more are split with the
/// config seed; smaller sets train on everything and skip validation.
pub fn train_validation(cfg: &TrainConfig, pairs: Vec<ImagePair>) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    if pairs.len() < 10 {
        return Ok((pairs, Vec::new()));
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let split = split_dataset(&ids, cfg.seed)?;
    let pick = |want: &[String]| -> Vec<ImagePair> {
        want.iter()
            .filter_map(|id| pairs.iter().find(|p| &p.id == id).cloned())
            .collect()
    };
    Ok((pick(&split.train), pick(&split.validation)))
}

pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub validation_loss: Option<f64>,
}

pub fn cmd_train_ae(cfg: &TrainConfig, out: &Path, log: Option<&Path>) -> Result<TrainSummary> {
    let (train, validation) = train_validation(cfg, load_dataset(cfg)?)?;
    let mut outcome = train_stage1(cfg, &stage1_images(&train), Some(out))?;
    if !validation.is_empty() {
        outcome.log.validation = Some(ae_loss(cfg, &outcome.weights, &stage1_images(&validation))?);
    }
    if let Some(path) = log {
        write_file(path, outcome.log.to_csv().as_bytes())?;
    }
    Ok(TrainSummary {
        epochs: outcome.log.epochs.len(),
        final_loss: outcome.log.final_loss(),
        validation_loss: outcome.log.validation.map(|v| v.loss),
    })
}

pub fn cmd_train_fusion(
    cfg: &TrainConfig,
    stage1: &Path,
    out: &Path,
    log: Option<&Path>,
    report: Option<&Path>,
) -> Result<TrainSummary> {
    let s1 = load_weights(stage1)?;
    let (train, validation) = train_validation(cfg, load_dataset(cfg)?)?;
    let mut outcome = train_stage2(cfg, &train, &s1, Some(out))?;
    if !validation.is_empty() {
        outcome.log.validation = Some(fusion_loss(cfg, &outcome.weights, &validation, FusionObjective::Fuse)?);
    }
    if let Some(path) = log {
        write_file(path, outcome.log.to_csv().as_bytes())?;
    }
    if let Some(path) = report {
        let rep = fuseformer::train::evaluate(&outcome.weights, &validation, fuseformer::metrics::DEFAULT_BINS)?;
        write_file(path, rep.to_csv().as_bytes())?;
    }
    Ok(TrainSummary {
        epochs: outcome.log.epochs.len(),
        final_loss: outcome.log.final_loss(),
        validation_loss: outcome.log.validation.map(|v| v.loss),
    })
}

/// `fused.pgm` -> `fused.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub struct FuseOutputs {
    pub fused: GrayImage,
    pub metrics: ImageMetrics,
    pub sidecar: PathBuf,
    pub diff_vis: PathBuf,
    pub diff_ir: PathBuf,
}

/// Fuses one pair and writes the fused PGM, a metrics sidecar
/// (`<stem>.metrics.csv`) and the difference images `<stem>.diff_vis.pgm`
/// and `<stem>.diff_ir.pgm`. Metrics are computed on the image as saved.
pub fn cmd_fuse(weights: &Path, vis: &Path, ir: &Path, out: &Path, maxval: u32) -> Result<FuseOutputs> {
    let w = load_weights(weights)?;
    let pair = ImagePair::new(id_of(out), load_pgm(vis)?, load_pgm(ir)?)?;
    check_model_dims(&w, pair.dims())?;
    let bytes = encode_pgm(&fuse_pair(&w, &pair)?, maxval)?;
    let fused = fuseformer::image::decode_pgm(&bytes)?;
    write_file(out, &bytes)?;
    let metrics = evaluate_fusion(&fused, &pair, fuseformer::metrics::DEFAULT_BINS)?;
    let sidecar = sibling(out, "metrics.csv");
    write_file(&sidecar, MetricReport::new(vec![metrics.clone()]).to_csv().as_bytes())?;
    let diff_vis = sibling(out, "diff_vis.pgm");
    let diff_ir = sibling(out, "diff_ir.pgm");
    write_file(&diff_vis, &encode_pgm(&fused.abs_diff(&pair.visible)?, maxval)?)?;
    write_file(&diff_ir, &encode_pgm(&fused.abs_diff(&pair.infrared)?, maxval)?)?;
    Ok(FuseOutputs {
        fused,
        metrics,
        sidecar,
        diff_vis,
        diff_ir,
    })
}

fn id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fused".into())
}

fn check_model_dims(w: &ModelWeights, (width, height): (usize, usize)) -> Result<()> {
    if (width, height) != (w.config.width, w.config.height) {
        return Err(CliError::config(format!(
            "images are {width}x{height}, weights expect {}x{}",
            w.config.width, w.config.height
        )));
    }
    Ok(())
}

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Manifest ids without `<fused-dir>/<id>.pgm`.
    pub missing: Vec<String>,
}

/// Scores `<fused_dir>/<id>.pgm` against each manifest pair, in manifest
/// order. Pairs are scored on up to [`thread_cap`] threads.
pub fn evaluate_dir(manifest: &Path, fused_dir: &Path, bins: usize, threads: usize) -> Result<EvalOutcome> {
    let entries = load_manifest(manifest)?;
    let (present, missing): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|e| fused_dir.join(format!("{}.pgm", e.id)).is_file());
    let missing = missing.into_iter().map(|e| e.id).collect();

    let score = |e: &fuseformer::image::ManifestEntry| -> Result<ImageMetrics> {
        let pair = ImagePair::new(e.id.clone(), load_pgm(&e.visible)?, load_pgm(&e.infrared)?)?;
        let fused = load_pgm(fused_dir.join(format!("{}.pgm", e.id)))?;
        Ok(evaluate_fusion(&fused, &pair, bins)?)
    };
    let threads = threads.max(1).min(present.len().max(1));
    let chunk = present.len().div_ceil(threads).max(1);
    let rows: Vec<Result<ImageMetrics>> = std::thread::scope(|s| {
        let handles: Vec<_> = present
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(score).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    });
    Ok(EvalOutcome {
        report: MetricReport::new(rows.into_iter().collect::<Result<Vec<_>>>()?),
        missing,
    })
}

/// Writes the report (header only when nothing was scored) and returns the
/// exit code: 4 if any pair was missing or nothing was scored.
pub fn cmd_eval(manifest: &Path, fused_dir: &Path, out: &Path, bins: usize) -> Result<(EvalOutcome, i32)> {
    let outcome = evaluate_dir(manifest, fused_dir, bins, thread_cap())?;
    let csv = if outcome.report.rows.is_empty() {
        format!("{REPORT_HEADER}\n")
    } else {
        outcome.report.to_csv()
    };
    write_file(out, csv.as_bytes())?;
    let code = if outcome.missing.is_empty() && !outcome.report.rows.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    };
    Ok((outcome, code))
}

pub fn cmd_bias(cfg: &TrainConfig, stage1: &Path, seeds: &[u64], out: &Path) -> Result<fuseformer::train::BiasReport> {
    let s1 = load_weights(stage1)?;
    let pairs = load_dataset(cfg)?;
    let report = bias_experiment(cfg, &pairs, &s1, seeds)?;
    write_file(out, report.to_csv().as_bytes())?;
    Ok(report)
}

pub fn cmd_sweep(
    cfg: &TrainConfig,
    stage1: &Path,
    axis: &str,
    values: &[f64],
    out: &Path,
) -> Result<fuseformer::train::SweepTable> {
    let axis = SweepAxis::parse(axis).ok_or_else(|| CliError::config(format!("unknown sweep axis '{axis}'")))?;
    let s1 = load_weights(stage1)?;
    let pairs = load_dataset(cfg)?;
    let table = sweep(cfg, axis, values, &pairs, &s1)?;
    write_file(out, table.to_csv().as_bytes())?;
    Ok(table)
}
