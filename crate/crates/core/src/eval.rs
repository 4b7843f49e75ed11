//! One-pass evaluation: precision over center error, success over overlap.

use serde::Serialize;

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const PRECISION_THRESHOLDS: usize = 51;
pub const SUCCESS_THRESHOLDS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalCurves {
    /// Fraction of frames with center error `<= t` for `t = 0..=50` pixels.
    pub precision: Vec<f64>,
    /// Fraction of frames with IoU `>= i/20` for `i = 0..=20`.
    pub success: Vec<f64>,
    pub auc: f64,
    pub prec_at_20: f64,
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / 20.0
}

pub fn evaluate(pred: &[BBox], gt: &[BBox]) -> Result<EvalCurves> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let n = pred.len() as f64;
    let cle: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let iou: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let precision: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|t| cle.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
        .collect();
    let success: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let t = success_threshold(i);
            iou.iter().filter(|&&o| o >= t).count() as f64 / n
        })
        .collect();
    let auc = success.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok(EvalCurves {
        prec_at_20: precision[20],
        precision,
        success,
        auc,
    })
}

impl EvalCurves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("curve,threshold,value\n");
        for (t, v) in self.precision.iter().enumerate() {
            s.push_str(&format!("precision,{t},{v}\n"));
        }
        for (i, v) in self.success.iter().enumerate() {
            s.push_str(&format!("success,{},{v}\n", success_threshold(i)));
        }
        s
    }
}
