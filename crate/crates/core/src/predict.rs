//! Prediction files and their evaluation against scenes.
//!
//! Predictions are JSON lines, one scene per line, in the target frame:
//!
//! ```text
//! {"schema":"recoat-pred/1","scenario_id":"…","trajectories":[[[x,y],…],…],"probs":[…]}
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_error, RecoatError, Result};
use crate::metrics::EvalRecord;
use crate::net::{PredictionSet, RecoatNet, SceneInputs};
use crate::scene::Scene;

pub const PREDICTION_SCHEMA: &str = "recoat-pred/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub schema: String,
    pub scenario_id: String,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub probs: Vec<f64>,
}

impl PredictionLine {
    pub fn new(scenario_id: &str, pred: &PredictionSet) -> Self {
        Self {
            schema: PREDICTION_SCHEMA.to_string(),
            scenario_id: scenario_id.to_string(),
            trajectories: pred.trajectories.clone(),
            probs: pred.probs.clone(),
        }
    }

    pub fn prediction(&self) -> PredictionSet {
        PredictionSet { trajectories: self.trajectories.clone(), probs: self.probs.clone() }
    }
}

/// Inference in fixed-size chunks, in input order.
pub fn predict_all(net: &RecoatNet, inputs: &[SceneInputs], chunk: usize) -> Result<Vec<PredictionLine>> {
    let mut out = Vec::with_capacity(inputs.len());
    for part in inputs.chunks(chunk.max(1)) {
        let refs: Vec<&SceneInputs> = part.iter().collect();
        for (s, p) in part.iter().zip(net.predict_batch(&refs)?) {
            out.push(PredictionLine::new(&s.scenario_id, &p));
        }
    }
    Ok(out)
}

pub fn predictions_jsonl(lines: &[PredictionLine]) -> Result<String> {
    let mut s = String::new();
    for l in lines {
        let json = serde_json::to_string(l).map_err(|e| RecoatError::InvalidInput(format!("cannot serialize prediction: {e}")))?;
        let _ = writeln!(s, "{json}");
    }
    Ok(s)
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    std::fs::write(path, predictions_jsonl(lines)?).map_err(io_error(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: PredictionLine = serde_json::from_str(l)
                .map_err(|e| RecoatError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if line.schema != PREDICTION_SCHEMA {
                return Err(RecoatError::SchemaVersion { found: line.schema, expected: PREDICTION_SCHEMA });
            }
            line.prediction().validate()?;
            Ok(line)
        })
        .collect()
}

/// Pairs predictions with their scenes by scenario id, in prediction order.
pub fn eval_records(predictions: &[PredictionLine], scenes: &[Scene]) -> Result<Vec<EvalRecord>> {
    let by_id: HashMap<&str, &Scene> = scenes.iter().map(|s| (s.scenario_id.as_str(), s)).collect();
    predictions
        .iter()
        .map(|p| {
            let scene = by_id
                .get(p.scenario_id.as_str())
                .ok_or_else(|| RecoatError::InvalidInput(format!("no scene for prediction `{}`", p.scenario_id)))?;
            let local = scene.to_target_frame()?;
            let record = EvalRecord {
                scenario_id: p.scenario_id.clone(),
                pred: p.prediction(),
                gt_future: local.target_future.clone(),
                others_future: local.neighbors.iter().filter_map(|n| n.future.clone()).collect(),
            };
            record.validate()?;
            Ok(record)
        })
        .collect()
}
