//! Confidence-threshold calibration against compute budgets.
//!
//! All calibration works on [`InferenceTrace`]s: full-network evaluation
//! records holding every classifier's prediction and confidence per sample.
//! Since the exit rule only compares confidences against the threshold, the
//! behavior of any threshold is a pure function of a trace, and the set of
//! behaviorally distinct thresholds is exactly the set of observed confidence
//! values. Calibration therefore scans that finite set instead of bisecting.

use crate::error::{Error, Result};
use crate::scheduler::{select_exit, InferenceTrace};

/// Mean per-sample MACs if every sample follows the exit rule at `epsilon`.
pub fn expected_cost(trace: &InferenceTrace, epsilon: f32) -> f64 {
    if trace.samples.is_empty() {
        return 0.0;
    }
    let total: u64 = trace
        .samples
        .iter()
        .map(|s| trace.classifier_costs[select_exit(&s.confidences, epsilon) - 1])
        .sum();
    total as f64 / trace.samples.len() as f64
}

/// Accuracy under the exit rule at `epsilon`.
pub fn adaptive_accuracy(trace: &InferenceTrace, epsilon: f32) -> f64 {
    if trace.samples.is_empty() {
        return 0.0;
    }
    let hits = trace
        .samples
        .iter()
        .filter(|s| {
            let k = select_exit(&s.confidences, epsilon);
            s.predictions[k - 1] == s.label
        })
        .count();
    hits as f64 / trace.samples.len() as f64
}

/// Per-classifier exit fractions under the exit rule at `epsilon`.
pub fn exit_histogram(trace: &InferenceTrace, epsilon: f32) -> Vec<f64> {
    let mut counts = vec![0usize; trace.num_classifiers()];
    for s in &trace.samples {
        counts[select_exit(&s.confidences, epsilon) - 1] += 1;
    }
    let n = trace.samples.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Largest threshold whose expected cost stays within `budget_macs`,
/// found by exact scan over every behaviorally distinct threshold.
///
/// Expected cost is non-decreasing in the threshold, so the chosen value is
/// the one that runs the deepest (most accurate) classifiers affordable.
/// Returns the threshold and its expected cost on this trace.
pub fn threshold_for_budget(trace: &InferenceTrace, budget_macs: f64) -> Result<(f32, f64)> {
    if trace.samples.is_empty() {
        return Err(Error::Data("cannot calibrate on an empty trace".into()));
    }
    let minimum = trace.classifier_costs[0];
    if budget_macs < minimum as f64 {
        return Err(Error::InfeasibleBudget {
            requested: budget_macs as u64,
            minimum,
        });
    }
    // Candidates: every observed confidence (each is the largest threshold
    // producing its exit assignment), plus one value above all of them for
    // the never-exit-early extreme.
    let mut candidates: Vec<f32> = trace
        .samples
        .iter()
        .flat_map(|s| s.confidences.iter().copied())
        .collect();
    candidates.push(0.0);
    candidates.push(f32::INFINITY);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut best: Option<(f32, f64)> = None;
    for &eps in &candidates {
        let cost = expected_cost(trace, eps);
        if cost <= budget_macs {
            best = Some((eps, cost));
        } else {
            break;
        }
    }
    best.ok_or_else(|| Error::InfeasibleBudget { requested: budget_macs as u64, minimum })
}

/// Outcome of calibrating on one trace and evaluating on another.
#[derive(Debug, Clone)]
pub struct BudgetReport {
    pub budget_macs: f64,
    pub epsilon: f32,
    /// Expected cost on the calibration trace.
    pub calibration_cost: f64,
    /// Realized mean cost on the evaluation trace.
    pub realized_cost: f64,
    pub accuracy: f64,
    pub exit_fractions: Vec<f64>,
}

/// Calibrate the threshold on `val` and apply it to `test`.
pub fn evaluate_budgeted(
    val: &InferenceTrace,
    test: &InferenceTrace,
    budget_macs: f64,
) -> Result<BudgetReport> {
    if val.classifier_costs != test.classifier_costs {
        return Err(Error::Usage(
            "calibration and evaluation traces come from different networks".into(),
        ));
    }
    let (epsilon, calibration_cost) = threshold_for_budget(val, budget_macs)?;
    Ok(BudgetReport {
        budget_macs,
        epsilon,
        calibration_cost,
        realized_cost: expected_cost(test, epsilon),
        accuracy: adaptive_accuracy(test, epsilon),
        exit_fractions: exit_histogram(test, epsilon),
    })
}

/// Accuracy/cost pairs of each classifier under always-exit-here evaluation.
pub fn anytime_curve(trace: &InferenceTrace) -> Vec<(u64, f64)> {
    (1..=trace.num_classifiers())
        .map(|k| (trace.classifier_costs[k - 1], trace.accuracy_at(k)))
        .collect()
}

pub fn anytime_curve_csv(trace: &InferenceTrace) -> String {
    let mut out = String::from("classifier,macs,accuracy\n");
    for (k, (cost, acc)) in anytime_curve(trace).iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", k + 1, cost, acc));
    }
    out
}

pub fn budget_report_csv(reports: &[BudgetReport]) -> String {
    let mut out = String::from("budget_macs,epsilon,calibration_cost,realized_cost,accuracy\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.budget_macs, r.epsilon, r.calibration_cost, r.realized_cost, r.accuracy
        ));
    }
    out
}
