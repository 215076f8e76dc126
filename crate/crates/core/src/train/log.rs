use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub mse: f64,
    pub kd: f64,
    pub total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub selected_epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub selected_checksum: Option<String>,
}

impl TrainLog {
    pub fn selected(&self) -> Option<&EpochRecord> {
        let e = self.selected_epoch?;
        self.epochs.iter().find(|r| r.epoch == e)
    }

    pub fn summary(&self) -> TrainSummary {
        let sel = self.selected();
        TrainSummary {
            steps: self.steps.len(),
            selected_epoch: self.selected_epoch,
            val_accuracy: sel.map(|r| r.val_accuracy),
            selected_checksum: sel.map(|r| r.checksum.clone()),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.steps.is_empty() {
            w.write_record([
                "step",
                "epoch",
                "ce",
                "mse",
                "kd",
                "total",
                "lr",
                "grad_norm",
            ])
            .map_err(csv_err)?;
        }
        for s in &self.steps {
            w.serialize(s).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let log = TrainLog {
            steps: vec![StepRecord {
                step: 0,
                epoch: 0,
                ce: 1.5,
                mse: 0.25,
                kd: 0.0,
                total: 9.0,
                lr: 1e-4,
                grad_norm: 2.0,
            }],
            epochs: vec![],
            selected_epoch: None,
        };
        let csv = log.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,ce,mse,kd,total,lr,grad_norm"
        );
        assert_eq!(lines.next().unwrap(), "0,0,1.5,0.25,0.0,9.0,0.0001,2.0");
        assert!(TrainLog::default().to_csv().unwrap().starts_with("step,"));
    }
}
