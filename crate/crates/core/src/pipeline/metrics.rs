use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,valid_acc,epoch_seconds,trainable_params";

/// One log row. Row 0 is the state before any training (no loss, zero
/// time); row `e` is the state after `e` epochs, with `lr` the schedule
/// value `cosine_lr(e)` that the next epoch trains with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub valid_acc: f64,
    pub epoch_seconds: f64,
    pub trainable_params: usize,
}

/// Validation state on both sides of the skip transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionCheck {
    pub epoch: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    /// Largest absolute logit change over the validation set.
    pub max_logit_diff: f64,
    pub rebuilt_layers: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
    pub transition: Option<TransitionCheck>,
    pub diverged: bool,
}

impl MetricsLog {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.valid_acc)
    }

    pub fn total_seconds(&self) -> f64 {
        self.rows.iter().map(|r| r.epoch_seconds).sum()
    }

    pub fn transition_epoch(&self) -> Option<usize> {
        self.transition.as_ref().map(|t| t.epoch)
    }

    /// Trainable parameters averaged over the trained epochs.
    pub fn mean_trainable_params(&self) -> f64 {
        let trained = &self.rows[1.min(self.rows.len())..];
        if trained.is_empty() {
            return self.rows.first().map_or(0.0, |r| r.trainable_params as f64);
        }
        trained.iter().map(|r| r.trainable_params as f64).sum::<f64>() / trained.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
        if header != METRICS_HEADER {
            return Err(Error::Input(format!("metrics header {header:?}, expected {METRICS_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for row in r.deserialize() {
            rows.push(row?);
        }
        Ok(Self {
            rows,
            transition: None,
            diverged: false,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// `(epoch, valid_acc)` pairs for plotting.
    pub fn accuracy_curve(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.epoch as f64, r.valid_acc)).collect()
    }
}

/// Two-column plot-data CSV.
pub fn write_xy<W: Write>(x_name: &str, y_name: &str, points: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([x_name, y_name])?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
