//! Spearman rank correlation and Fisher-z aggregation across actions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ActionClass;
use crate::error::{Error, Result};

/// Correlations this close to ±1 are clamped before `atanh`.
pub const FISHER_CLAMP: f64 = 1.0 - 1e-12;

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(Error::DegenerateMetric(format!(
            "need at least 2 samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
        .ok_or_else(|| Error::DegenerateMetric("zero-variance input".into()))
}

/// `tanh(mean(atanh(ρᵢ)))`.
pub fn fisher_avg(rhos: &[f64]) -> Result<f64> {
    if rhos.is_empty() {
        return Err(Error::DegenerateMetric("no correlations to average".into()));
    }
    let mut sum = 0.0;
    for &r in rhos {
        if !(r.abs() <= 1.0) {
            return Err(Error::Argument(format!("correlation {r} outside [-1, 1]")));
        }
        sum += r.clamp(-FISHER_CLAMP, FISHER_CLAMP).atanh();
    }
    Ok((sum / rhos.len() as f64).tanh())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEval {
    pub action: ActionClass,
    pub rho: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_action: Vec<ActionEval>,
    pub avg_rho: f64,
}

pub fn build_report(per_action: &[(ActionClass, Vec<f64>, Vec<f64>)]) -> Result<EvalReport> {
    let per_action = per_action
        .iter()
        .map(|(action, pred, truth)| {
            Ok(ActionEval {
                action: *action,
                rho: spearman(pred, truth)?,
                n: pred.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rhos: Vec<f64> = per_action.iter().map(|a| a.rho).collect();
    let avg_rho = fisher_avg(&rhos)?;
    Ok(EvalReport { per_action, avg_rho })
}

impl EvalReport {
    pub fn rho(&self, action: ActionClass) -> Option<f64> {
        self.per_action.iter().find(|a| a.action == action).map(|a| a.rho)
    }

    /// `action,n,rho` rows followed by an `AVERAGE` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,n,rho\n");
        for a in &self.per_action {
            out.push_str(&format!("{},{},{:?}\n", a.action, a.n, a.rho));
        }
        let total: usize = self.per_action.iter().map(|a| a.n).sum();
        out.push_str(&format!("AVERAGE,{},{:?}\n", total, self.avg_rho));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
