use std::fmt::Write as _;

/// A loss value with its two components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossRecord {
    pub loss: f64,
    /// Pixel loss (stage 1) or feature loss (stage 2).
    pub primary: f64,
    /// Unweighted structural term.
    pub structural: f64,
}

impl LossRecord {
    pub(crate) fn add(&mut self, o: &LossRecord) {
        self.loss += o.loss;
        self.primary += o.primary;
        self.structural += o.structural;
    }

    pub(crate) fn scaled(&self, s: f64) -> LossRecord {
        LossRecord {
            loss: self.loss * s,
            primary: self.primary * s,
            structural: self.structural * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's samples, each taken before its batch's update.
    pub mean: LossRecord,
    /// Mean loss over all samples at the weights saved after this epoch.
    pub checkpoint_loss: Option<f64>,
}

/// Per-epoch training history.
///
/// Wall-clock times are kept alongside but never written to the CSV, so
/// that equal seeds give byte-identical logs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Loss before the first update (stage 2 only).
    pub initial: Option<LossRecord>,
    pub epochs: Vec<EpochRecord>,
    pub validation: Option<LossRecord>,
    pub wall_seconds: Vec<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,loss,primary,structural,checkpoint_loss";

impl TrainLog {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Loss at the last checkpoint.
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.checkpoint_loss)
    }

    /// Rows `initial`, `1..=epochs`, `validation`; floats use shortest
    /// round-trip formatting so values parse back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        let summary = |out: &mut String, label: &str, r: &LossRecord| {
            let _ = writeln!(out, "{label},,{},{},{},", r.loss, r.primary, r.structural);
        };
        if let Some(r) = &self.initial {
            summary(&mut out, "initial", r);
        }
        for e in &self.epochs {
            let ck = e.checkpoint_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{ck}",
                e.epoch, e.lr, e.mean.loss, e.mean.primary, e.mean.structural
            );
        }
        if let Some(r) = &self.validation {
            summary(&mut out, "validation", r);
        }
        out
    }

    /// Mean loss over a centred window of `width` epochs.
    pub fn smoothed(&self, width: usize) -> Vec<f64> {
        let v: Vec<f64> = self.epochs.iter().map(|e| e.mean.loss).collect();
        let half = width / 2;
        (0..v.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + width - half).min(v.len());
                v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    }
}
