//! Max-likelihood, bag-consistent pseudo-labels.
//!
//! Instances are treated as independent Bernoulli draws with success
//! probability equal to the model score. For a MIN bag labeled 0 the most
//! likely labeling with at least one zero is the 0.5-threshold labeling,
//! unless that labeling is all ones, in which case the lowest-scoring
//! instance is flipped to 0. A MIN bag labeled 1 forces every instance to 1.
//! MAX is the mirror image.

use serde::Serialize;

use crate::data::{AggKind, Dataset, LabelKind};
use crate::error::{Error, Result};
use crate::model::ScorerModel;
use crate::training::predict;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BagPseudoLabels {
    pub labels: Vec<u8>,
    /// Position of the instance whose thresholded label was overridden.
    pub flipped: Option<usize>,
    /// Probability of `labels` under the independent-Bernoulli model.
    pub likelihood: f64,
}

/// Likelihood of a 0/1 configuration given per-instance probabilities.
pub fn likelihood(scores: &[f64], labels: &[u8]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&p, &l)| if l == 1 { p } else { 1.0 - p })
        .product()
}

/// Pseudo-labels for one bag. Scores are probabilities; `bag_label` is 0 or 1.
pub fn pslab_bag(scores: &[f64], bag_label: f64, agg: AggKind) -> Result<BagPseudoLabels> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bag_label != 0.0 && bag_label != 1.0 {
        return Err(Error::NotApplicable(format!(
            "bag label {bag_label} is not binary"
        )));
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("score {s} is not a probability")));
    }
    // `forced` is the label every instance takes when the bag label pins it;
    // otherwise at least one instance must carry `witness`.
    let (forced, witness) = match agg {
        AggKind::Min => (1u8, 0u8),
        AggKind::Max => (0u8, 1u8),
        AggKind::Avg => {
            return Err(Error::NotApplicable(
                "pseudo-labeling is not defined for AVG aggregation".into(),
            ))
        }
    };
    let y = bag_label as u8;
    let mut flipped = None;
    let labels = if y == forced {
        vec![forced; scores.len()]
    } else {
        let mut labels: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
        if !labels.contains(&witness) {
            // Cheapest flip: lowest score under MIN, highest under MAX; earliest on ties.
            let pick = scores.iter().enumerate().fold(0, |best, (i, &s)| {
                let better = match agg {
                    AggKind::Min => s < scores[best],
                    _ => s > scores[best],
                };
                if better {
                    i
                } else {
                    best
                }
            });
            labels[pick] = witness;
            flipped = Some(pick);
        }
        labels
    };
    Ok(BagPseudoLabels {
        likelihood: likelihood(scores, &labels),
        labels,
        flipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supervision {
    BagLabels,
    PreferenceOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Applicability {
    Applicable,
    NotApplicable(String),
}

/// Pseudo-labeling needs binary labels, probability outputs and MIN/MAX bags.
pub fn pslab_applicability(label_kind: LabelKind, agg: AggKind, supervision: Supervision) -> Applicability {
    if supervision == Supervision::PreferenceOnly {
        return Applicability::NotApplicable(
            "only preference labels are available, so there is no bag label to stay consistent with".into(),
        );
    }
    if let LabelKind::Integer(l) = label_kind {
        if l > 1 {
            return Applicability::NotApplicable(format!(
                "predictions are values in [0, {l}], not label probabilities"
            ));
        }
    }
    if agg == AggKind::Avg {
        return Applicability::NotApplicable("AVG aggregation has no max-likelihood rule".into());
    }
    Applicability::Applicable
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRecord {
    pub bag_id: String,
    pub flipped_instance_id: Option<String>,
    pub likelihood: f64,
}

/// Replaces every instance's gold label with its pseudo-label.
/// Bag labels, embeddings and priors are preserved.
pub fn pslab_dataset(ds: &Dataset, model: &ScorerModel) -> Result<(Dataset, Vec<AuditRecord>)> {
    if let Applicability::NotApplicable(reason) =
        pslab_applicability(ds.label_kind, ds.agg(), Supervision::BagLabels)
    {
        return Err(Error::NotApplicable(reason));
    }
    let scores = predict(model, ds)?;
    let mut out = ds.clone();
    let mut audit = Vec::with_capacity(ds.bags.len());
    for (bag, s) in out.bags.iter_mut().zip(&scores) {
        let label = bag.label.ok_or_else(|| Error::MissingBagLabel(bag.id.clone()))?;
        let pl = pslab_bag(s, label, bag.agg)?;
        for (inst, l) in bag.instances.iter_mut().zip(&pl.labels) {
            inst.gold_label = Some(f64::from(*l));
        }
        audit.push(AuditRecord {
            bag_id: bag.id.clone(),
            flipped_instance_id: pl.flipped.map(|i| bag.instances[i].id.clone()),
            likelihood: pl.likelihood,
        });
    }
    out.validate()?;
    Ok((out, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over all 2^k labelings consistent with the bag label.
    fn brute_force_best(scores: &[f64], y: u8, agg: AggKind) -> f64 {
        let k = scores.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << k) {
            let labels: Vec<u8> = (0..k).map(|i| ((mask >> i) & 1) as u8).collect();
            let agg_label = match agg {
                AggKind::Min => *labels.iter().min().unwrap(),
                _ => *labels.iter().max().unwrap(),
            };
            if agg_label == y {
                best = best.max(likelihood(scores, &labels));
            }
        }
        best
    }

    #[test]
    fn min_zero_needs_flip() {
        let pl = pslab_bag(&[0.9, 0.8, 0.6], 0.0, AggKind::Min).unwrap();
        assert_eq!(pl.labels, vec![1, 1, 0]);
        assert_eq!(pl.flipped, Some(2));
        assert!((pl.likelihood - 0.9 * 0.8 * 0.4).abs() < 1e-15);
        assert!((brute_force_best(&[0.9, 0.8, 0.6], 0, AggKind::Min) - 0.288).abs() < 1e-15);
    }

    #[test]
    fn min_zero_threshold_already_valid() {
        let pl = pslab_bag(&[0.9, 0.3], 0.0, AggKind::Min).unwrap();
        assert_eq!(pl.labels, vec![1, 0]);
        assert_eq!(pl.flipped, None);
        assert_eq!(pl.likelihood, brute_force_best(&[0.9, 0.3], 0, AggKind::Min));
    }

    #[test]
    fn min_one_forces_all_ones() {
        let pl = pslab_bag(&[0.1, 0.2, 0.9], 1.0, AggKind::Min).unwrap();
        assert_eq!(pl.labels, vec![1, 1, 1]);
    }

    #[test]
    fn ties_flip_earliest() {
        let pl = pslab_bag(&[0.7, 0.6, 0.6], 0.0, AggKind::Min).unwrap();
        assert_eq!(pl.labels, vec![1, 0, 1]);
        let pl = pslab_bag(&[0.5, 0.9], 0.0, AggKind::Min).unwrap();
        assert_eq!(pl.labels, vec![0, 1]);
    }

    #[test]
    fn rejects_unsupported() {
        assert!(pslab_bag(&[0.5], 0.5, AggKind::Min).is_err());
        assert!(matches!(
            pslab_bag(&[0.5], 1.0, AggKind::Avg),
            Err(Error::NotApplicable(_))
        ));
        assert!(pslab_bag(&[], 1.0, AggKind::Min).is_err());
    }

    #[test]
    fn applicability() {
        assert!(matches!(
            pslab_applicability(LabelKind::Integer(4), AggKind::Max, Supervision::BagLabels),
            Applicability::NotApplicable(_)
        ));
        assert!(matches!(
            pslab_applicability(LabelKind::Binary, AggKind::Avg, Supervision::PreferenceOnly),
            Applicability::NotApplicable(_)
        ));
        assert_eq!(
            pslab_applicability(LabelKind::Binary, AggKind::Min, Supervision::BagLabels),
            Applicability::Applicable
        );
    }

    proptest! {
        #[test]
        fn optimal_and_consistent(scores in prop::collection::vec(0.0f64..1.0, 1..=12), y in 0u8..2, max in any::<bool>()) {
            let agg = if max { AggKind::Max } else { AggKind::Min };
            let pl = pslab_bag(&scores, f64::from(y), agg).unwrap();
            let agg_label = if max { *pl.labels.iter().max().unwrap() } else { *pl.labels.iter().min().unwrap() };
            prop_assert_eq!(agg_label, y);
            let best = brute_force_best(&scores, y, agg);
            prop_assert!(pl.likelihood >= best * (1.0 - 1e-12));
            prop_assert_eq!(pslab_bag(&scores, f64::from(y), agg).unwrap(), pl);
        }

        #[test]
        fn max_mirrors_min(scores in prop::collection::vec(0.0f64..1.0, 1..=12), y in 0u8..2) {
            let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let mx = pslab_bag(&scores, f64::from(y), AggKind::Max).unwrap();
            let mn = pslab_bag(&flipped, f64::from(1 - y), AggKind::Min).unwrap();
            // Exact 0.5 scores break the mirror (both sides label 1 at the threshold).
            prop_assume!(scores.iter().all(|&s| s != 0.5));
            let mirrored: Vec<u8> = mn.labels.iter().map(|l| 1 - l).collect();
            prop_assert_eq!(mx.labels, mirrored);
        }
    }
}
