//! Per-method summary of trial reports.

use serde::{Deserialize, Serialize};

use crate::error::{CelcError, Result};
use crate::harness::sweep::{median, Method, TrialRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_trials: usize,
    pub n_used: usize,
    pub mean_epsilon: Option<f64>,
    pub median_epsilon: Option<f64>,
    pub mean_phi: Option<f64>,
    pub median_phi: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One row per method, in method order. Every method must cover the same number of trials.
pub fn compare_methods(records: &[TrialRecord]) -> Result<Vec<MethodSummary>> {
    if records.is_empty() {
        return Err(CelcError::EmptyInput("no trial records".into()));
    }
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let counts: Vec<usize> = methods
        .iter()
        .map(|m| records.iter().filter(|r| r.method == *m).count())
        .collect();
    if counts.iter().any(|c| *c != counts[0]) {
        let detail: Vec<String> = methods.iter().zip(&counts).map(|(m, c)| format!("{}={c}", m.tag())).collect();
        return Err(CelcError::Mismatch(format!("methods cover different trial counts: {}", detail.join(", "))));
    }
    Ok(methods
        .iter()
        .zip(&counts)
        .map(|(m, n)| {
            let used: Vec<&TrialRecord> = records.iter().filter(|r| r.method == *m && r.is_valid()).collect();
            let eps: Vec<f64> = used.iter().filter_map(|r| r.epsilon).collect();
            let phi: Vec<f64> = used.iter().filter_map(|r| r.phi).collect();
            MethodSummary {
                method: *m,
                n_trials: *n,
                n_used: used.len(),
                mean_epsilon: mean(&eps),
                median_epsilon: median(&eps),
                mean_phi: mean(&phi),
                median_phi: median(&phi),
            }
        })
        .collect())
}
