//! Instance, bag and preference evaluation metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggConfig;
use crate::data::{Dataset, LabelKind, PreferencePair};
use crate::error::{Error, Result};
use crate::model::ScorerModel;
use crate::training::predict;
use crate::PROB_EPS;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{a} scores for {b} labels")));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC-ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of mid-ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += mid_rank * pos_in_group as f64;
        start = end;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Area under the precision-recall curve with step interpolation (average
/// precision). Tied scores form a single threshold.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::InvalidArgument(
            "AUC-PR needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let new_tp = order[start..end].iter().filter(|&&i| labels[i]).count();
        tp += new_tp;
        seen += end - start;
        if new_tp > 0 {
            area += (new_tp as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
        start = end;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Nothing was predicted positive; `precision` is reported as 0.
    pub precision_undefined: bool,
    /// No actual positives; `recall` is reported as 0.
    pub recall_undefined: bool,
}

/// Confusion-matrix rates with `score >= threshold` predicted positive.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    check_lengths(scores.len(), labels.len())?;
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ThresholdMetrics {
        accuracy: ratio(tp + tn, scores.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    })
}

/// Mean absolute error and mean squared error.
pub fn regression_metrics(preds: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    check_lengths(preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = preds.len() as f64;
    let (abs, sq) = preds.iter().zip(labels).fold((0.0, 0.0), |(a, s), (p, l)| {
        (a + (p - l).abs(), s + (p - l) * (p - l))
    });
    Ok((abs / n, sq / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub pairs: usize,
    pub accuracy: f64,
    /// Pairs whose aggregate predictions were exactly equal (counted wrong).
    pub ties: usize,
}

/// Fraction of pairs `(a, b, y)` with `sign(pred_a - pred_b) == y`.
pub fn preference_accuracy_from_predictions(
    bag_preds: &[f64],
    pairs: &[(usize, usize, f64)],
) -> PreferenceReport {
    let mut correct = 0usize;
    let mut ties = 0usize;
    for &(a, b, y) in pairs {
        match bag_preds[a].partial_cmp(&bag_preds[b]) {
            Some(Ordering::Greater) if y > 0.0 => correct += 1,
            Some(Ordering::Less) if y < 0.0 => correct += 1,
            Some(Ordering::Equal) => ties += 1,
            _ => {}
        }
    }
    PreferenceReport {
        pairs: pairs.len(),
        accuracy: if pairs.is_empty() {
            0.0
        } else {
            correct as f64 / pairs.len() as f64
        },
        ties,
    }
}

/// Aggregate prediction per bag. Probability approximations see scores
/// clamped to `[ε, 1-ε]`.
pub fn bag_predictions(scores: &[Vec<f64>], agg: &AggConfig, kind: LabelKind) -> Result<Vec<f64>> {
    let clamp = kind.is_binary() && agg.approx.needs_probabilities();
    scores
        .iter()
        .map(|s| {
            if clamp {
                let c: Vec<f64> = s.iter().map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
                agg.aggregate(&c).map(|a| a.value)
            } else {
                agg.aggregate(s).map(|a| a.value)
            }
        })
        .collect()
}

pub fn preference_accuracy(
    model: &ScorerModel,
    ds: &Dataset,
    pairs: &[PreferencePair],
    agg: &AggConfig,
) -> Result<PreferenceReport> {
    let resolved = ds.resolve_pairs(pairs)?;
    let preds = bag_predictions(&predict(model, ds)?, agg, ds.label_kind)?;
    Ok(preference_accuracy_from_predictions(&preds, &resolved))
}

/// Metrics over scored items with known labels. Classification fields are
/// filled for binary labels; `mae`/`mse` always.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub count: usize,
    pub positives: Option<usize>,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mae: f64,
    pub mse: f64,
}

fn label_report(scores: &[f64], labels: &[f64], binary: bool) -> Result<LabelReport> {
    let (mae, mse) = regression_metrics(scores, labels)?;
    let mut report = LabelReport {
        count: scores.len(),
        mae,
        mse,
        ..Default::default()
    };
    if binary && labels.iter().all(|&l| l == 0.0 || l == 1.0) {
        let flags: Vec<bool> = labels.iter().map(|&l| l == 1.0).collect();
        report.positives = Some(flags.iter().filter(|&&f| f).count());
        report.auc_roc = auc_roc(scores, &flags).ok();
        report.auc_pr = auc_pr(scores, &flags).ok();
        let t = threshold_metrics(scores, &flags, 0.5)?;
        report.accuracy = Some(t.accuracy);
        report.precision = Some(t.precision);
        report.recall = Some(t.recall);
    }
    Ok(report)
}

/// Full evaluation: instance-level (requires gold labels), bag-level (when
/// bag labels exist) and preference accuracy (when pairs are given).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<LabelReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bag: Option<LabelReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preference: Option<PreferenceReport>,
}

impl EvalReport {
    pub const TABLE_COLUMNS: [&'static str; 12] = [
        "instances",
        "auc_roc",
        "auc_pr",
        "accuracy",
        "precision",
        "recall",
        "mae",
        "mse",
        "bag_auc_roc",
        "bag_mae",
        "preference_pairs",
        "preference_accuracy",
    ];

    pub fn table_header() -> String {
        Self::TABLE_COLUMNS.join("\t")
    }

    /// One tab-separated row aligned with [`Self::table_header`]; missing values are empty.
    pub fn table_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let i = self.instance.as_ref();
        let b = self.bag.as_ref();
        let p = self.preference.as_ref();
        [
            i.map(|r| r.count.to_string()).unwrap_or_default(),
            f(i.and_then(|r| r.auc_roc)),
            f(i.and_then(|r| r.auc_pr)),
            f(i.and_then(|r| r.accuracy)),
            f(i.and_then(|r| r.precision)),
            f(i.and_then(|r| r.recall)),
            f(i.map(|r| r.mae)),
            f(i.map(|r| r.mse)),
            f(b.and_then(|r| r.auc_roc)),
            f(b.map(|r| r.mae)),
            p.map(|r| r.pairs.to_string()).unwrap_or_default(),
            f(p.map(|r| r.accuracy)),
        ]
        .join("\t")
    }
}

/// Evaluates precomputed instance scores, grouped by bag.
pub fn evaluate_scores(
    ds: &Dataset,
    scores: &[Vec<f64>],
    agg: &AggConfig,
    pairs: &[PreferencePair],
) -> Result<EvalReport> {
    let binary = ds.label_kind.is_binary();
    let mut report = EvalReport::default();

    let golds: Option<Vec<f64>> = ds.instances().map(|i| i.gold_label).collect();
    if let Some(golds) = golds {
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        report.instance = Some(label_report(&flat, &golds, binary)?);
    }

    let bag_preds = bag_predictions(scores, agg, ds.label_kind)?;
    let bag_labels: Option<Vec<f64>> = ds.bags.iter().map(|b| b.label).collect();
    if let Some(labels) = bag_labels {
        report.bag = Some(label_report(&bag_preds, &labels, binary)?);
    }

    if !pairs.is_empty() {
        let resolved = ds.resolve_pairs(pairs)?;
        report.preference = Some(preference_accuracy_from_predictions(&bag_preds, &resolved));
    }
    Ok(report)
}

pub fn evaluate_model(
    model: &ScorerModel,
    ds: &Dataset,
    agg: &AggConfig,
    pairs: &[PreferencePair],
) -> Result<EvalReport> {
    evaluate_scores(ds, &predict(model, ds)?, agg, pairs)
}
