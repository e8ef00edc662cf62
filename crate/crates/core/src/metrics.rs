//! Normalised mean squared error and negative log predictive density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Mean squared error over the mean squared deviation of `y_true` from its
/// own mean.
pub fn nmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    if y_true.len() < 2 {
        return Err(Error::Metric("NMSE needs at least two test points".into()));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let denom = y_true.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if denom == 0.0 {
        return Err(Error::Metric("NMSE undefined for constant targets".into()));
    }
    let mse = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / n;
    Ok(mse / denom)
}

/// `½ mean((y − ŷ)² / σ̂² + log σ̂² + log 2π)`.
pub fn nlpd(y_true: &[f64], mean: &[f64], variance: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), mean.len())?;
    check_lengths(y_true.len(), variance.len())?;
    if y_true.is_empty() {
        return Err(Error::Metric("NLPD needs at least one test point".into()));
    }
    let mut acc = 0.0;
    for ((y, m), v) in y_true.iter().zip(mean).zip(variance) {
        if !(*v > 0.0) {
            return Err(Error::Metric(format!("predictive variance {v} is not positive")));
        }
        let r = y - m;
        acc += r * r / v + v.ln() + LOG_2PI;
    }
    Ok(0.5 * acc / y_true.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMetrics {
    pub output: usize,
    pub n_test: usize,
    /// Absent when the output has fewer than two test points or constant
    /// targets.
    pub nmse: Option<f64>,
    pub nlpd: f64,
}

/// Pooled metrics over all test points plus a per-output breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nmse: f64,
    pub nlpd: f64,
    pub n_test: usize,
    pub per_output: Vec<OutputMetrics>,
}

/// One scored test point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPoint {
    pub output: usize,
    pub truth: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn evaluate(points: &[ScoredPoint]) -> Result<EvalReport> {
    let y: Vec<f64> = points.iter().map(|p| p.truth).collect();
    let m: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let v: Vec<f64> = points.iter().map(|p| p.variance).collect();
    let pooled_nmse = nmse(&y, &m)?;
    let pooled_nlpd = nlpd(&y, &m, &v)?;
    let mut outputs: Vec<usize> = points.iter().map(|p| p.output).collect();
    outputs.sort_unstable();
    outputs.dedup();
    let per_output = outputs
        .into_iter()
        .map(|d| {
            let sel: Vec<&ScoredPoint> = points.iter().filter(|p| p.output == d).collect();
            let y: Vec<f64> = sel.iter().map(|p| p.truth).collect();
            let m: Vec<f64> = sel.iter().map(|p| p.mean).collect();
            let v: Vec<f64> = sel.iter().map(|p| p.variance).collect();
            Ok(OutputMetrics {
                output: d,
                n_test: sel.len(),
                nmse: nmse(&y, &m).ok(),
                nlpd: nlpd(&y, &m, &v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        nmse: pooled_nmse,
        nlpd: pooled_nlpd,
        n_test: points.len(),
        per_output,
    })
}
