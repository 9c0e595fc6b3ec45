//! Seeded synthetic datasets with planted instance labels.
//!
//! Instance embeddings are standard normal. Labels come from a hidden linear
//! rule `w·x + b > 0` (binary) or from equal-mass buckets of `w·x` (integer),
//! then are corrupted with probability `noise`. Bag labels are the exact
//! aggregate of the planted labels, so every generated dataset is consistent.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AggKind, Bag, Dataset, Instance, LabelKind, PreferencePair};
use crate::error::{Error, Result};

/// Share of clean MIN bags labeled 1. Keeping it below one half keeps the
/// instance positive rate moderate, so label noise does not swamp the
/// negatives.
const MIN_BAG_POSITIVE_RATE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_bags: usize,
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    pub d: usize,
    pub agg: AggKind,
    pub label_kind: LabelKind,
    /// Probability that a planted label is corrupted.
    pub noise: f64,
    /// Informativeness of the priors. The external prior is the normalized
    /// gold label shrunk toward 0.5 by `1 - prior_quality`; each bag's context
    /// embedding has cosine `prior_quality` with the hidden rule direction.
    pub prior_quality: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_bags: 100,
            bag_size_min: 2,
            bag_size_max: 8,
            d: 16,
            agg: AggKind::Min,
            label_kind: LabelKind::Binary,
            noise: 0.0,
            prior_quality: 1.0,
        }
    }
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_bags == 0 {
            return bad("n_bags must be at least 1");
        }
        if self.bag_size_min < 1 || self.bag_size_max < self.bag_size_min {
            return bad("bag size range must satisfy 1 <= min <= max");
        }
        if self.d < 2 {
            return bad("d must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.prior_quality) {
            return bad("noise and prior_quality must lie in [0, 1]");
        }
        if let LabelKind::Integer(0) = self.label_kind {
            return bad("integer labels need L >= 1");
        }
        Ok(())
    }

    /// Instance positive rate for the planted rule. A clean MIN bag of mean
    /// size is positive with probability [`MIN_BAG_POSITIVE_RATE`]; MAX mirrors it.
    fn planted_positive_rate(&self) -> f64 {
        let mean_size = (self.bag_size_min + self.bag_size_max) as f64 / 2.0;
        let t = MIN_BAG_POSITIVE_RATE;
        match self.agg {
            AggKind::Min => t.powf(1.0 / mean_size),
            AggKind::Max => 1.0 - t.powf(1.0 / mean_size),
            AggKind::Avg => 0.5,
        }
    }
}

fn unit_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Unit vector whose cosine with the unit vector `rule` is exactly `quality`.
fn context_direction(rng: &mut ChaCha8Rng, rule: &[f64], quality: f64) -> Vec<f64> {
    let d = rule.len();
    loop {
        let mut jitter = unit_normal(rng, d);
        let along: f64 = jitter.iter().zip(rule).map(|(j, w)| j * w).sum();
        jitter.iter_mut().zip(rule).for_each(|(j, w)| *j -= along * w);
        let norm = jitter.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        let side = (1.0 - quality * quality).sqrt() / norm;
        return rule
            .iter()
            .zip(&jitter)
            .map(|(w, j)| quality * w + side * j)
            .collect();
    }
}

/// Value at quantile `q` of an already sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

/// Generates a dataset with gold labels, external priors and bag context
/// embeddings populated. Identical configs give identical datasets.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rule = unit_normal(&mut rng, cfg.d);

    let mut embeddings: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.n_bags);
    for _ in 0..cfg.n_bags {
        let size = rng.random_range(cfg.bag_size_min..=cfg.bag_size_max);
        embeddings.push(
            (0..size)
                .map(|_| (0..cfg.d).map(|_| rng.sample(StandardNormal)).collect())
                .collect(),
        );
    }

    let margin = |x: &[f64]| rule.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    let mut sorted: Vec<f64> = embeddings.iter().flatten().map(|x| margin(x)).collect();
    sorted.sort_by(f64::total_cmp);

    let labeler: Box<dyn Fn(f64) -> f64> = match cfg.label_kind {
        LabelKind::Binary => {
            let bias = -quantile(&sorted, 1.0 - cfg.planted_positive_rate());
            Box::new(move |m| if m + bias > 0.0 { 1.0 } else { 0.0 })
        }
        LabelKind::Integer(l) => {
            let cuts: Vec<f64> = (1..=l)
                .map(|j| quantile(&sorted, f64::from(j) / f64::from(l + 1)))
                .collect();
            Box::new(move |m| cuts.iter().filter(|&&c| m > c).count() as f64)
        }
    };

    let max_label = cfg.label_kind.max_label();
    let mut bags = Vec::with_capacity(cfg.n_bags);
    for (b, bag_embeddings) in embeddings.into_iter().enumerate() {
        let mut instances = Vec::with_capacity(bag_embeddings.len());
        for (i, x) in bag_embeddings.into_iter().enumerate() {
            let mut label = labeler(margin(&x));
            if rng.random::<f64>() < cfg.noise {
                label = match cfg.label_kind {
                    LabelKind::Binary => 1.0 - label,
                    LabelKind::Integer(l) => {
                        let other = rng.random_range(0..l);
                        let other = f64::from(other);
                        if other >= label {
                            other + 1.0
                        } else {
                            other
                        }
                    }
                };
            }
            let prior = cfg.prior_quality * (label / max_label) + (1.0 - cfg.prior_quality) * 0.5;
            instances.push(Instance {
                id: format!("b{b}_s{i}"),
                embedding: x,
                gold_label: Some(label),
                external_prior: Some(prior),
            });
        }
        let golds: Vec<f64> = instances.iter().filter_map(|i| i.gold_label).collect();
        let context = context_direction(&mut rng, &rule, cfg.prior_quality);
        bags.push(Bag {
            id: format!("b{b}"),
            label: Some(cfg.agg.exact(&golds)),
            agg: cfg.agg,
            context_embedding: Some(context),
            instances,
        });
    }
    Dataset::new(cfg.d, cfg.label_kind, bags)
}

/// Samples `n_pairs` preference pairs between bags with distinct labels.
/// `label = 1` when `bag_a` has the larger bag label.
pub fn derive_preferences(ds: &Dataset, n_pairs: usize, seed: u64) -> Result<Vec<PreferencePair>> {
    let labeled: Vec<(usize, f64)> = ds
        .bags
        .iter()
        .enumerate()
        .map(|(i, b)| {
            b.label
                .map(|l| (i, l))
                .ok_or_else(|| Error::MissingBagLabel(b.id.clone()))
        })
        .collect::<Result<_>>()?;
    let first = labeled[0].1;
    if labeled.iter().all(|&(_, l)| l == first) {
        return Err(Error::InvalidArgument(
            "all bags share one label; no preference pairs exist".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let &(a, ya) = labeled.choose(&mut rng).unwrap();
        let &(b, yb) = labeled.choose(&mut rng).unwrap();
        if ya == yb {
            continue;
        }
        pairs.push(PreferencePair {
            bag_a: ds.bags[a].id.clone(),
            bag_b: ds.bags[b].id.clone(),
            label: if ya > yb { 1 } else { -1 },
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_consistency;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SynthConfig {
            seed: 7,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&cfg).unwrap()
        );
        let other = SynthConfig {
            seed: 8,
            ..Default::default()
        };
        assert_ne!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn generated_data_is_consistent() {
        for agg in [AggKind::Min, AggKind::Max, AggKind::Avg] {
            for kind in [LabelKind::Binary, LabelKind::Integer(4)] {
                let cfg = SynthConfig {
                    agg,
                    label_kind: kind,
                    noise: 0.2,
                    ..Default::default()
                };
                let ds = generate_synthetic(&cfg).unwrap();
                assert!(validate_consistency(&ds).unwrap().is_consistent());
            }
        }
    }

    #[test]
    fn perfect_prior_equals_gold() {
        let ds = generate_synthetic(&SynthConfig {
            noise: 0.0,
            prior_quality: 1.0,
            ..Default::default()
        })
        .unwrap();
        for inst in ds.instances() {
            assert_eq!(inst.external_prior, inst.gold_label);
        }
    }

    #[test]
    fn bag_label_rates_follow_target() {
        for (agg, expected_ones) in [(AggKind::Min, 0.3), (AggKind::Max, 0.7)] {
            let ds = generate_synthetic(&SynthConfig {
                n_bags: 1000,
                agg,
                ..Default::default()
            })
            .unwrap();
            let ones = ds.bags.iter().filter(|b| b.label == Some(1.0)).count() as f64 / 1000.0;
            assert!(
                (ones - expected_ones).abs() < 0.08,
                "{agg}: positive bag share {ones}"
            );
        }
    }

    #[test]
    fn integer_levels_all_used() {
        let ds = generate_synthetic(&SynthConfig {
            label_kind: LabelKind::Integer(4),
            agg: AggKind::Max,
            ..Default::default()
        })
        .unwrap();
        let mut seen = [0usize; 5];
        for inst in ds.instances() {
            seen[inst.gold_label.unwrap() as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }

    #[test]
    fn rejects_bad_ranges() {
        for cfg in [
            SynthConfig {
                bag_size_min: 0,
                ..Default::default()
            },
            SynthConfig {
                bag_size_min: 5,
                bag_size_max: 4,
                ..Default::default()
            },
            SynthConfig {
                d: 1,
                ..Default::default()
            },
            SynthConfig {
                noise: 1.5,
                ..Default::default()
            },
        ] {
            assert!(generate_synthetic(&cfg).is_err());
        }
    }

    #[test]
    fn preferences_follow_bag_labels() {
        let ds = generate_synthetic(&SynthConfig {
            agg: AggKind::Avg,
            ..Default::default()
        })
        .unwrap();
        let pairs = derive_preferences(&ds, 200, 3).unwrap();
        let idx = ds.bag_index();
        for p in &pairs {
            let ya = ds.bags[idx[p.bag_a.as_str()]].label.unwrap();
            let yb = ds.bags[idx[p.bag_b.as_str()]].label.unwrap();
            assert_eq!(p.label == 1, ya > yb);
        }
    }
}
