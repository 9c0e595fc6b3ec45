//! Bags, instances and datasets.
//!
//! A [`Dataset`] is immutable once validated: every bag is non-empty, bag
//! instance ids are disjoint, embeddings share one dimension and all labels
//! lie in the declared label set.

mod io;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, load_preferences, write_dataset, write_preferences};
pub use synth::{derive_preferences, generate_synthetic, SynthConfig};

/// Aggregation relating instance labels to the bag label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Min,
    Max,
    Avg,
}

impl AggKind {
    /// Exact aggregate of a non-empty label slice.
    pub fn exact(self, labels: &[f64]) -> f64 {
        match self {
            AggKind::Min => labels.iter().copied().fold(f64::INFINITY, f64::min),
            AggKind::Max => labels.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            AggKind::Avg => labels.iter().sum::<f64>() / labels.len() as f64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Min => "min",
            AggKind::Max => "max",
            AggKind::Avg => "avg",
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(AggKind::Min),
            "max" => Ok(AggKind::Max),
            "avg" => Ok(AggKind::Avg),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Instance label set: `{0, 1}` or `{0, 1, ..., L}`.
///
/// Textual form is `binary` or `integer:L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LabelKind {
    Binary,
    Integer(u32),
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelKind::Binary => f.write_str("binary"),
            LabelKind::Integer(l) => write!(f, "integer:{l}"),
        }
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("label kind must be `binary` or `integer:L`, got {s:?}"));
        match s.split_once(':') {
            None if s == "binary" => Ok(LabelKind::Binary),
            Some(("integer", l)) => match l.parse::<u32>() {
                Ok(l) if l >= 1 => Ok(LabelKind::Integer(l)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for LabelKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LabelKind> for String {
    fn from(k: LabelKind) -> String {
        k.to_string()
    }
}

impl LabelKind {
    /// Largest label value; bag labels live in `[0, max_label]`.
    pub fn max_label(self) -> f64 {
        match self {
            LabelKind::Binary => 1.0,
            LabelKind::Integer(l) => f64::from(l),
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, LabelKind::Binary)
    }

    pub fn is_instance_label(self, v: f64) -> bool {
        v.fract() == 0.0 && (0.0..=self.max_label()).contains(&v)
    }

    pub fn is_bag_label(self, v: f64) -> bool {
        v.is_finite() && (0.0..=self.max_label()).contains(&v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub embedding: Vec<f64>,
    pub gold_label: Option<f64>,
    pub external_prior: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub instances: Vec<Instance>,
    pub agg: AggKind,
    pub label: Option<f64>,
    pub context_embedding: Option<Vec<f64>>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Gold labels of every instance, or `None` if any is missing.
    pub fn gold_labels(&self) -> Option<Vec<f64>> {
        self.instances.iter().map(|i| i.gold_label).collect()
    }

    /// Mean of the instance embeddings.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let d = self.instances[0].embedding.len();
        let mut out = vec![0.0; d];
        for inst in &self.instances {
            for (o, x) in out.iter_mut().zip(&inst.embedding) {
                *o += x;
            }
        }
        let n = self.instances.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Preference between two bags: `label = 1` when `bag_a` is labeled higher
/// than `bag_b`, `-1` otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub bag_a: String,
    pub bag_b: String,
    pub label: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub label_kind: LabelKind,
    pub bags: Vec<Bag>,
    pub preferences: Vec<PreferencePair>,
}

impl Dataset {
    /// Builds a dataset and checks every structural invariant.
    pub fn new(d: usize, label_kind: LabelKind, bags: Vec<Bag>) -> Result<Self> {
        let ds = Dataset {
            d,
            label_kind,
            bags,
            preferences: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Attaches preference pairs after checking that their ids resolve.
    pub fn with_preferences(mut self, pairs: Vec<PreferencePair>) -> Result<Self> {
        let ids: HashSet<&str> = self.bags.iter().map(|b| b.id.as_str()).collect();
        for p in &pairs {
            check_pair(p, &ids)?;
        }
        self.preferences = pairs;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidDataset(
                "embedding dimension must be positive".into(),
            ));
        }
        if let LabelKind::Integer(0) = self.label_kind {
            return Err(Error::InvalidDataset("integer label kind needs L >= 1".into()));
        }
        let Some(first) = self.bags.first() else {
            return Err(Error::InvalidDataset("dataset has no bags".into()));
        };
        let agg = first.agg;
        let mut bag_ids = HashSet::new();
        let mut instance_ids = HashSet::new();
        for bag in &self.bags {
            if !bag_ids.insert(bag.id.as_str()) {
                return Err(Error::DuplicateBag(bag.id.clone()));
            }
            if bag.agg != agg {
                return Err(Error::InvalidDataset(format!(
                    "bag {:?} uses {} but the dataset uses {}",
                    bag.id, bag.agg, agg
                )));
            }
            if bag.instances.is_empty() {
                return Err(Error::InvalidDataset(format!("bag {:?} is empty", bag.id)));
            }
            if let Some(label) = bag.label {
                if !self.label_kind.is_bag_label(label) {
                    return Err(Error::BagLabelOutOfRange {
                        bag: bag.id.clone(),
                        label,
                        max: self.label_kind.max_label(),
                    });
                }
            }
            if let Some(ctx) = &bag.context_embedding {
                check_embedding(&format!("context of bag {}", bag.id), ctx, self.d)?;
            }
            for inst in &bag.instances {
                if !instance_ids.insert(inst.id.as_str()) {
                    return Err(Error::DuplicateInstance(inst.id.clone()));
                }
                check_embedding(&inst.id, &inst.embedding, self.d)?;
                if let Some(g) = inst.gold_label {
                    if !self.label_kind.is_instance_label(g) {
                        return Err(Error::InvalidDataset(format!(
                            "instance {:?}: gold label {g} not in the label set",
                            inst.id
                        )));
                    }
                }
                if let Some(p) = inst.external_prior {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidDataset(format!(
                            "instance {:?}: external prior {p} outside [0, 1]",
                            inst.id
                        )));
                    }
                }
            }
        }
        for p in &self.preferences {
            check_pair(p, &bag_ids)?;
        }
        Ok(())
    }

    /// Aggregation shared by all bags.
    pub fn agg(&self) -> AggKind {
        self.bags[0].agg
    }

    pub fn num_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.bags.iter().flat_map(|b| b.instances.iter())
    }

    /// Map from bag id to position in `bags`.
    pub fn bag_index(&self) -> HashMap<&str, usize> {
        self.bags
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect()
    }

    /// Resolves preference pairs to `(index_a, index_b, label)` triples.
    pub fn resolve_pairs(&self, pairs: &[PreferencePair]) -> Result<Vec<(usize, usize, f64)>> {
        let index = self.bag_index();
        pairs
            .iter()
            .map(|p| {
                let a = *index
                    .get(p.bag_a.as_str())
                    .ok_or_else(|| Error::UnknownBag(p.bag_a.clone()))?;
                let b = *index
                    .get(p.bag_b.as_str())
                    .ok_or_else(|| Error::UnknownBag(p.bag_b.clone()))?;
                Ok((a, b, f64::from(p.label)))
            })
            .collect()
    }

    /// Splits off the last `n_tail` bags into a second dataset. Preference
    /// pairs stay with the half that contains both of their bags.
    pub fn split_tail(mut self, n_tail: usize) -> Result<(Dataset, Dataset)> {
        if n_tail == 0 || n_tail >= self.bags.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} tail bags from {}",
                n_tail,
                self.bags.len()
            )));
        }
        let tail = self.bags.split_off(self.bags.len() - n_tail);
        let head_ids: HashSet<&str> = self.bags.iter().map(|b| b.id.as_str()).collect();
        let (head_pairs, tail_pairs): (Vec<_>, Vec<_>) = std::mem::take(&mut self.preferences)
            .into_iter()
            .filter(|p| head_ids.contains(p.bag_a.as_str()) == head_ids.contains(p.bag_b.as_str()))
            .partition(|p| head_ids.contains(p.bag_a.as_str()));
        let head = Dataset::new(self.d, self.label_kind, self.bags)?.with_preferences(head_pairs)?;
        let tail = Dataset::new(self.d, self.label_kind, tail)?.with_preferences(tail_pairs)?;
        Ok((head, tail))
    }
}

fn check_embedding(owner: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            instance: owner.to_string(),
            expected: d,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidDataset(format!(
            "{owner}: non-finite embedding value"
        )));
    }
    Ok(())
}

fn check_pair(p: &PreferencePair, ids: &HashSet<&str>) -> Result<()> {
    if p.bag_a == p.bag_b {
        return Err(Error::InvalidDataset(format!(
            "preference pair compares bag {:?} with itself",
            p.bag_a
        )));
    }
    if p.label != 1 && p.label != -1 {
        return Err(Error::InvalidDataset(format!(
            "preference label {} is not +1 or -1",
            p.label
        )));
    }
    for id in [&p.bag_a, &p.bag_b] {
        if !ids.contains(id.as_str()) {
            return Err(Error::UnknownBag(id.clone()));
        }
    }
    Ok(())
}

/// A bag whose gold-label aggregate disagrees with its bag label.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub bag_id: String,
    pub bag_label: f64,
    pub aggregated_gold: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub bags_checked: usize,
    pub violations: Vec<Violation>,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `agg(gold labels) == bag label` on every labeled bag.
///
/// Bags without a bag label are skipped. Every instance must carry a gold label.
pub fn validate_consistency(ds: &Dataset) -> Result<ConsistencyReport> {
    let mut report = ConsistencyReport::default();
    for bag in &ds.bags {
        let golds = bag.gold_labels().ok_or_else(|| {
            let missing = bag.instances.iter().find(|i| i.gold_label.is_none()).unwrap();
            Error::MissingGoldLabel(missing.id.clone())
        })?;
        let Some(label) = bag.label else { continue };
        report.bags_checked += 1;
        let aggregated = bag.agg.exact(&golds);
        if (aggregated - label).abs() > 1e-9 {
            report.violations.push(Violation {
                bag_id: bag.id.clone(),
                bag_label: label,
                aggregated_gold: aggregated,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, gold: f64) -> Instance {
        Instance {
            id: id.into(),
            embedding: vec![0.0, 1.0],
            gold_label: Some(gold),
            external_prior: None,
        }
    }

    fn bag(id: &str, agg: AggKind, label: f64, golds: &[f64]) -> Bag {
        Bag {
            id: id.into(),
            instances: golds
                .iter()
                .enumerate()
                .map(|(i, &g)| inst(&format!("{id}_{i}"), g))
                .collect(),
            agg,
            label: Some(label),
            context_embedding: None,
        }
    }

    #[test]
    fn max_violation_detected() {
        let ds = Dataset::new(
            2,
            LabelKind::Binary,
            vec![bag("b", AggKind::Max, 1.0, &[0.0, 0.0])],
        )
        .unwrap();
        let report = validate_consistency(&ds).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].bag_id, "b");
    }

    #[test]
    fn integer_max_consistent() {
        let ds = Dataset::new(
            2,
            LabelKind::Integer(4),
            vec![bag("b", AggKind::Max, 4.0, &[2.0, 4.0])],
        )
        .unwrap();
        assert!(validate_consistency(&ds).unwrap().is_consistent());
    }

    #[test]
    fn missing_gold_is_an_error() {
        let mut b = bag("b", AggKind::Min, 0.0, &[0.0, 1.0]);
        b.instances[1].gold_label = None;
        let ds = Dataset::new(2, LabelKind::Binary, vec![b]).unwrap();
        assert!(matches!(
            validate_consistency(&ds),
            Err(Error::MissingGoldLabel(id)) if id == "b_1"
        ));
    }

    #[test]
    fn rejects_structural_violations() {
        let mut empty = bag("e", AggKind::Min, 0.0, &[0.0]);
        empty.instances.clear();
        assert!(Dataset::new(2, LabelKind::Binary, vec![empty]).is_err());

        let a = bag("a", AggKind::Min, 0.0, &[0.0]);
        let mut b = bag("b", AggKind::Min, 0.0, &[0.0]);
        b.instances[0].id = "a_0".into();
        assert!(matches!(
            Dataset::new(2, LabelKind::Binary, vec![a.clone(), b]),
            Err(Error::DuplicateInstance(_))
        ));

        let out_of_range = bag("c", AggKind::Min, 2.0, &[0.0]);
        assert!(matches!(
            Dataset::new(2, LabelKind::Binary, vec![out_of_range]),
            Err(Error::BagLabelOutOfRange { .. })
        ));

        let mixed = bag("m", AggKind::Max, 0.0, &[0.0]);
        assert!(Dataset::new(2, LabelKind::Binary, vec![a, mixed]).is_err());
    }

    #[test]
    fn preference_pairs_must_resolve() {
        let ds = Dataset::new(
            2,
            LabelKind::Binary,
            vec![
                bag("a", AggKind::Avg, 0.5, &[0.0, 1.0]),
                bag("b", AggKind::Avg, 0.0, &[0.0]),
            ],
        )
        .unwrap();
        let good = PreferencePair {
            bag_a: "a".into(),
            bag_b: "b".into(),
            label: 1,
        };
        let bad = PreferencePair {
            bag_a: "a".into(),
            bag_b: "zz".into(),
            label: 1,
        };
        let selfp = PreferencePair {
            bag_a: "a".into(),
            bag_b: "a".into(),
            label: 1,
        };
        assert!(ds.clone().with_preferences(vec![good]).is_ok());
        assert!(matches!(
            ds.clone().with_preferences(vec![bad]),
            Err(Error::UnknownBag(_))
        ));
        assert!(ds.with_preferences(vec![selfp]).is_err());
    }

    #[test]
    fn exact_aggregates() {
        assert_eq!(AggKind::Min.exact(&[1.0, 1.0, 0.0]), 0.0);
        assert_eq!(AggKind::Max.exact(&[2.0, 4.0]), 4.0);
        assert!((AggKind::Avg.exact(&[0.2, 0.4, 0.6]) - 0.4).abs() < 1e-15);
    }
}
