//! Plain-text training configuration.
//!
//! One `key = value` per line; `#` starts a comment. Unknown keys are
//! rejected. Keys and defaults:
//!
//! | key               | default    | meaning                                        |
//! |-------------------|------------|------------------------------------------------|
//! | `stage`           | `ae`       | `ae` (autoencoder) or `fusion`                 |
//! | `epochs`          | `200`      | passes over the training split, >= 1          |
//! | `batch_size`      | `4`        | samples per optimizer step, >= 1               |
//! | `learning_rate`   | `0.001`    | initial Adam step size, > 0                    |
//! | `lr_schedule`     | `step:0.5:50` | `constant` or `step:<factor>:<every>`       |
//! | `checkpoint_every`| `25`       | epochs between checkpoints (final always kept) |
//! | `seed`            | `0`        | drives init, shuffling, splits and synthesis   |
//! | `alpha`           | `10`       | SSIM term weight                               |
//! | `omega_m`         | `1,1,1`    | per-scale feature weights, one per scale       |
//! | `omega_vi`        | `0.6`      | visible share of the feature target            |
//! | `omega_ir`        | `0.4`      | infrared share of the feature target           |
//! | `num_scales`      | `3`        | pyramid depth                                  |
//! | `channels`        | `8,16,32`  | channels per scale                             |
//! | `heads`           | `2`        | attention heads                                |
//! | `layers`          | `2`        | attention pairs per modality per fusion block  |
//! | `height`, `width` | `32`       | model input size                               |
//! | `manifest`        | none       | pair manifest; relative to the config file     |
//! | `synthetic_pairs` | `40`       | pairs to synthesize when no manifest is given  |

use std::path::{Path, PathBuf};

use super::TrainError;
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Autoencoder,
    Fusion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    StepDecay { factor: f64, every: usize },
}

impl LrSchedule {
    /// Learning rate for 1-based `epoch`.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => {
                base * factor.powi(((epoch.max(1) - 1) / every) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub manifest: Option<PathBuf>,
    pub synthetic_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: TrainStage::Autoencoder,
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::StepDecay {
                factor: 0.5,
                every: 50,
            },
            checkpoint_every: 25,
            seed: 0,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            manifest: None,
            synthetic_pairs: 40,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if let LrSchedule::StepDecay { factor, every } = self.lr_schedule {
            if every == 0 || !(factor > 0.0) {
                return bad("step schedule needs factor > 0 and every >= 1".into());
            }
        }
        self.loss.validate().map_err(TrainError::Config)?;
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.loss.omega_m.len() != self.model.num_scales {
            return bad(format!(
                "{} omega_m values for {} scales",
                self.loss.omega_m.len(),
                self.model.num_scales
            ));
        }
        Ok(())
    }

    /// Parses config text; relative `manifest` paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        let mut omega_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| TrainError::Config(format!("line {}: {m}", i + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let res: Result<(), String> = (|| {
                match key {
                    "stage" => {
                        cfg.stage = match value {
                            "ae" => TrainStage::Autoencoder,
                            "fusion" => TrainStage::Fusion,
                            _ => return Err(format!("stage must be ae or fusion, got '{value}'")),
                        }
                    }
                    "epochs" => cfg.epochs = parse_num(key, value)?,
                    "batch_size" => cfg.batch_size = parse_num(key, value)?,
                    "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                    "lr_schedule" => cfg.lr_schedule = parse_schedule(value)?,
                    "checkpoint_every" => cfg.checkpoint_every = parse_num(key, value)?,
                    "seed" => cfg.seed = parse_num(key, value)?,
                    "alpha" => cfg.loss.alpha = parse_num(key, value)?,
                    "omega_m" => {
                        cfg.loss.omega_m = parse_list(key, value)?;
                        omega_set = true;
                    }
                    "omega_vi" => cfg.loss.omega_vi = parse_num(key, value)?,
                    "omega_ir" => cfg.loss.omega_ir = parse_num(key, value)?,
                    "num_scales" => cfg.model.num_scales = parse_num(key, value)?,
                    "channels" => cfg.model.channels = parse_list(key, value)?,
                    "heads" => cfg.model.heads = parse_num(key, value)?,
                    "layers" => cfg.model.layers = parse_num(key, value)?,
                    "height" => cfg.model.height = parse_num(key, value)?,
                    "width" => cfg.model.width = parse_num(key, value)?,
                    "manifest" => cfg.manifest = Some(base.join(value)),
                    "synthetic_pairs" => cfg.synthetic_pairs = parse_num(key, value)?,
                    _ => return Err(format!("unknown key '{key}'")),
                }
                Ok(())
            })();
            res.map_err(err)?;
        }
        if !omega_set {
            cfg.loss.omega_m = vec![1.0; cfg.model.num_scales];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }
}

fn parse_schedule(value: &str) -> Result<LrSchedule, String> {
    if value == "constant" {
        return Ok(LrSchedule::Constant);
    }
    let parts: Vec<&str> = value.split(':').collect();
    match parts[..] {
        ["step", factor, every] => Ok(LrSchedule::StepDecay {
            factor: parse_num("lr_schedule factor", factor)?,
            every: parse_num("lr_schedule every", every)?,
        }),
        _ => Err(format!("lr_schedule must be 'constant' or 'step:<factor>:<every>', got '{value}'")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = TrainConfig::parse("", Path::new("")).unwrap();
        assert_eq!(cfg, TrainConfig::default());

        let text = "# fusion run\nstage = fusion\nepochs=10 # short\nlr_schedule = constant\n\
                    channels = 4, 8\nnum_scales = 2\nheight = 16\nwidth = 16\nmanifest = data/m.txt\n";
        let cfg = TrainConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.stage, TrainStage::Fusion);
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.lr_schedule, LrSchedule::Constant);
        assert_eq!(cfg.model.channels, vec![4, 8]);
        assert_eq!(cfg.loss.omega_m, vec![1.0, 1.0]);
        assert_eq!(cfg.manifest, Some(PathBuf::from("/cfg/data/m.txt")));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "epochs = 0",
            "batch_size = 0",
            "learning_rate = -1",
            "colour = red",
            "stage = both",
            "lr_schedule = step:0.5",
            "epochs 3",
            "channels = 8,16",
            "omega_m = 1,1",
        ] {
            assert!(
                matches!(TrainConfig::parse(text, Path::new("")), Err(TrainError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn step_decay_halves() {
        let s = LrSchedule::StepDecay { factor: 0.5, every: 50 };
        assert_eq!(s.rate(1e-3, 1), 1e-3);
        assert_eq!(s.rate(1e-3, 50), 1e-3);
        assert_eq!(s.rate(1e-3, 51), 5e-4);
        assert_eq!(s.rate(1e-3, 101), 2.5e-4);
        assert_eq!(LrSchedule::Constant.rate(0.1, 500), 0.1);
    }
}
