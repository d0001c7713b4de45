//! Per-update metrics: JSON-lines records plus a summary CSV.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub update: u64,
    pub mean_meta_loss: f64,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
    pub grad_norm: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Data(format!("metrics encode: {e}")))
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Data(format!("metrics decode: {e}")))
    }

    /// Copy with wall time zeroed: the deterministic portion of the record.
    pub fn deterministic(&self) -> MetricsRecord {
        MetricsRecord { wall_time_s: 0.0, ..self.clone() }
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("update,mean_meta_loss,test_accuracy,wall_time_s,grad_norm\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.update, r.mean_meta_loss, r.test_accuracy, r.wall_time_s, r.grad_norm
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_round_trip() {
        let r = MetricsRecord {
            update: 3,
            mean_meta_loss: 1.25,
            test_accuracy: 0.5625,
            wall_time_s: 0.75,
            grad_norm: 2.5,
        };
        let line = r.to_json_line().unwrap();
        assert_eq!(MetricsRecord::from_json_line(&line).unwrap(), r);
        assert_eq!(r.deterministic().wall_time_s, 0.0);
    }
}
