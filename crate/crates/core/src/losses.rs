//! Loss terms and their weighted combination.
//!
//! Each term is first written over plain instance scores (`*_term`
//! functions returning the value and `∂loss/∂score`), then [`LossSetup`]
//! wires the terms to a model: forward every instance in the batch, sum the
//! weighted score gradients, and backpropagate once per instance.
//!
//! Classification terms use soft-target cross-entropy with predictions
//! clamped to `[ε, 1-ε]`; regression terms (integer labels in `[0, L]`) use
//! squared error against targets scaled to `[0, L]`.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggConfig;
use crate::data::{AggKind, Dataset, LabelKind};
use crate::error::{Error, Result};
use crate::model::{GradientTape, ScorerModel};
use crate::priors::{PairMatrix, Priors};
use crate::PROB_EPS;

/// Mixture weights `λ` (bag or preference), `λ1` (cosine prior), `λ2`
/// (correlation prior) and `λ3` (external prior). They sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bag: f64,
    pub cosine: f64,
    pub correlation: f64,
    #[serde(default)]
    pub external: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::bag_only()
    }
}

impl LossWeights {
    pub fn new(bag: f64, cosine: f64, correlation: f64, external: f64) -> Result<Self> {
        let w = LossWeights {
            bag,
            cosine,
            correlation,
            external,
        };
        w.check()?;
        Ok(w)
    }

    pub fn bag_only() -> Self {
        LossWeights {
            bag: 1.0,
            cosine: 0.0,
            correlation: 0.0,
            external: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.bag, self.cosine, self.correlation, self.external]
    }

    pub fn check(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights {w:?} must lie in [0, 1]"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "loss weights sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

/// `-(p ln q + (1-p) ln(1-q))` with `q` clamped to `[ε, 1-ε]`, and `∂/∂q`
/// (zero where the clamp is active).
pub fn cross_entropy(target: f64, pred: f64) -> (f64, f64) {
    let q = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let value = -(target * q.ln() + (1.0 - target) * (1.0 - q).ln());
    let grad = if q == pred {
        -target / q + (1.0 - target) / (1.0 - q)
    } else {
        0.0
    };
    (value, grad)
}

/// `(target - pred)²` and `∂/∂pred`.
pub fn squared_error(target: f64, pred: f64) -> (f64, f64) {
    let diff = pred - target;
    (diff * diff, 2.0 * diff)
}

fn pointwise(kind: LabelKind, target: f64, pred: f64) -> (f64, f64) {
    match kind {
        LabelKind::Binary => cross_entropy(target, pred),
        LabelKind::Integer(_) => squared_error(target, pred),
    }
}

/// A term's value and its gradient with respect to every score, shaped like the input.
#[derive(Clone, Debug, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl TermValue {
    fn zeros_like(scores: &[Vec<f64>]) -> Self {
        TermValue {
            value: 0.0,
            grads: scores.iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }
}

/// Aggregates one bag, clamping scores into `(0, 1)` first when the
/// approximation needs probabilities. Gradients through an active clamp are zero.
fn aggregate_bag(scores: &[f64], agg: &AggConfig, kind: LabelKind) -> Result<(f64, Vec<f64>)> {
    let clamp = kind.is_binary() && agg.kind != AggKind::Avg && agg.approx.needs_probabilities();
    if !clamp {
        let a = agg.aggregate(scores)?;
        return Ok((a.value, a.grad));
    }
    let clamped: Vec<f64> = scores.iter().map(|s| s.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
    let a = agg.aggregate(&clamped)?;
    let grad = a
        .grad
        .iter()
        .zip(scores.iter().zip(&clamped))
        .map(|(g, (s, c))| if s == c { *g } else { 0.0 })
        .collect();
    Ok((a.value, grad))
}

fn check_prediction(kind: LabelKind, value: f64) -> Result<()> {
    let hi = kind.max_label();
    if !value.is_finite() || value < -1e-9 || value > hi + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "aggregate prediction {value} outside [0, {hi}]"
        )));
    }
    Ok(())
}

/// Mean over bags of `L_bag(y_B, probAGG(scores_B))`.
pub fn bag_term(labels: &[f64], scores: &[Vec<f64>], agg: &AggConfig, kind: LabelKind) -> Result<TermValue> {
    let mut out = TermValue::zeros_like(scores);
    if scores.is_empty() {
        return Ok(out);
    }
    let n = scores.len() as f64;
    for ((label, s), g) in labels.iter().zip(scores).zip(&mut out.grads) {
        let (pred, agg_grad) = aggregate_bag(s, agg, kind)?;
        check_prediction(kind, pred)?;
        let (v, dv) = pointwise(kind, *label, pred);
        out.value += v / n;
        for (gi, ai) in g.iter_mut().zip(&agg_grad) {
            *gi += dv * ai / n;
        }
    }
    Ok(out)
}

/// Mean over instances of `L(target_x, score_x)`; targets are already on the
/// prediction scale.
pub fn pointwise_term(targets: &[Vec<f64>], scores: &[Vec<f64>], kind: LabelKind) -> TermValue {
    let mut out = TermValue::zeros_like(scores);
    let n: usize = scores.iter().map(Vec::len).sum();
    if n == 0 {
        return out;
    }
    let n = n as f64;
    for ((t, s), g) in targets.iter().zip(scores).zip(&mut out.grads) {
        for ((ti, si), gi) in t.iter().zip(s).zip(g.iter_mut()) {
            let (v, dv) = pointwise(kind, *ti, *si);
            out.value += v / n;
            *gi += dv / n;
        }
    }
    out
}

/// Instance prior loss; priors in `[0, 1]` are scaled by `L` for regression.
pub fn instance_prior_term(priors: &[Vec<f64>], scores: &[Vec<f64>], kind: LabelKind) -> TermValue {
    let scale = kind.max_label();
    let targets: Vec<Vec<f64>> = priors
        .iter()
        .map(|p| p.iter().map(|v| v * scale).collect())
        .collect();
    pointwise_term(&targets, scores, kind)
}

/// Mean over ordered within-bag pairs `x ≠ z` of `L(p_xz, M(x)·M(z))`.
pub fn pair_prior_term(matrices: &[&PairMatrix], scores: &[Vec<f64>], kind: LabelKind) -> TermValue {
    let mut out = TermValue::zeros_like(scores);
    let pairs: usize = scores.iter().map(|s| s.len() * s.len().saturating_sub(1)).sum();
    if pairs == 0 {
        return out;
    }
    let n = pairs as f64;
    let scale = kind.max_label() * kind.max_label();
    for ((m, s), g) in matrices.iter().zip(scores).zip(&mut out.grads) {
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i == j {
                    continue;
                }
                let (v, dv) = pointwise(kind, m.get(i, j) * scale, s[i] * s[j]);
                out.value += v / n;
                g[i] += dv * s[j] / n;
                g[j] += dv * s[i] / n;
            }
        }
    }
    out
}

/// Mean over pairs of `y · ln(ỹ_b / ỹ_a)` with aggregates clamped to
/// `[ε, 1-ε]` (scaled by `L` for regression). `pairs` index into `scores`.
pub fn preference_term(
    pairs: &[(usize, usize, f64)],
    scores: &[Vec<f64>],
    agg: &AggConfig,
    kind: LabelKind,
) -> Result<TermValue> {
    let mut out = TermValue::zeros_like(scores);
    if pairs.is_empty() {
        return Ok(out);
    }
    let aggregates = scores
        .iter()
        .map(|s| aggregate_bag(s, agg, kind))
        .collect::<Result<Vec<_>>>()?;
    let scale = kind.max_label();
    let (lo, hi) = (PROB_EPS * scale, (1.0 - PROB_EPS) * scale);
    let n = pairs.len() as f64;
    for &(a, b, y) in pairs {
        let log_of = |idx: usize, sign: f64, out: &mut TermValue| {
            let (raw, grad) = &aggregates[idx];
            let v = raw.clamp(lo, hi);
            if v == *raw {
                let d = sign * y / v / n;
                for (gi, ai) in out.grads[idx].iter_mut().zip(grad) {
                    *gi += d * ai;
                }
            }
            v.ln()
        };
        let la = log_of(a, -1.0, &mut out);
        let lb = log_of(b, 1.0, &mut out);
        out.value += y * (lb - la) / n;
    }
    Ok(out)
}

/// Which labels drive the primary (`λ`-weighted) term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Bag labels through the aggregation approximation.
    BagLabels,
    /// Preference labels between pairs of bags.
    Preference,
    /// Gold (or pseudo) instance labels.
    InstanceLabels,
}

/// Bags (by dataset index) or preference pairs (by index into the pair list).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Batch {
    Bags(Vec<usize>),
    Pairs(Vec<usize>),
}

/// Per-term values of one loss evaluation. Terms with zero weight are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bag: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supervised: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<f64>,
}

/// Everything needed to evaluate the total loss of a model on a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossSetup<'a> {
    pub ds: &'a Dataset,
    pub priors: &'a Priors,
    /// Resolved preference pairs `(bag_a, bag_b, ±1)`.
    pub pairs: &'a [(usize, usize, f64)],
    pub weights: LossWeights,
    pub agg: AggConfig,
    pub objective: Objective,
}

impl<'a> LossSetup<'a> {
    /// Fails when a term with nonzero weight has no data behind it.
    pub fn check(&self) -> Result<()> {
        self.weights.check()?;
        self.agg.check_for(self.ds.label_kind)?;
        let w = &self.weights;
        if w.cosine > 0.0 && self.priors.cosine.is_none() {
            return Err(Error::UnavailableTerm("cosine prior"));
        }
        if w.correlation > 0.0 && self.priors.correlation.is_none() {
            return Err(Error::UnavailableTerm("correlation prior"));
        }
        if w.external > 0.0 && self.priors.external.is_none() {
            return Err(Error::UnavailableTerm("external prior"));
        }
        if w.bag > 0.0 {
            match self.objective {
                Objective::BagLabels => {
                    if let Some(b) = self.ds.bags.iter().find(|b| b.label.is_none()) {
                        return Err(Error::MissingBagLabel(b.id.clone()));
                    }
                }
                Objective::Preference => {
                    if self.pairs.is_empty() {
                        return Err(Error::UnavailableTerm("preference"));
                    }
                }
                Objective::InstanceLabels => {
                    if let Some(i) = self.ds.instances().find(|i| i.gold_label.is_none()) {
                        return Err(Error::MissingGoldLabel(i.id.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Total loss on `batch` and its parameter gradient.
    pub fn evaluate(&self, model: &ScorerModel, batch: &Batch) -> Result<(LossBreakdown, GradientTape)> {
        let (bags, local_pairs) = self.batch_bags(batch);
        let ds = self.ds;
        let kind = ds.label_kind;

        let mut scores = Vec::with_capacity(bags.len());
        let mut caches = Vec::with_capacity(bags.len());
        for &b in &bags {
            let mut s = Vec::with_capacity(ds.bags[b].len());
            let mut c = Vec::with_capacity(ds.bags[b].len());
            for inst in &ds.bags[b].instances {
                let (score, cache) = model.forward_cached(&inst.embedding)?;
                s.push(score);
                c.push(cache);
            }
            scores.push(s);
            caches.push(c);
        }

        let mut grads: Vec<Vec<f64>> = scores.iter().map(|s| vec![0.0; s.len()]).collect();
        let mut breakdown = LossBreakdown::default();
        let mut add = |weight: f64, term: TermValue| -> f64 {
            for (g, t) in grads.iter_mut().zip(&term.grads) {
                for (gi, ti) in g.iter_mut().zip(t) {
                    *gi += weight * ti;
                }
            }
            term.value
        };
        let w = self.weights;

        if w.bag > 0.0 {
            match self.objective {
                Objective::BagLabels => {
                    let labels: Vec<f64> = bags
                        .iter()
                        .map(|&b| {
                            ds.bags[b]
                                .label
                                .ok_or_else(|| Error::MissingBagLabel(ds.bags[b].id.clone()))
                        })
                        .collect::<Result<_>>()?;
                    let term = bag_term(&labels, &scores, &self.agg, kind)?;
                    breakdown.bag = Some(add(w.bag, term));
                }
                Objective::Preference => {
                    let term = preference_term(&local_pairs, &scores, &self.agg, kind)?;
                    breakdown.preference = Some(add(w.bag, term));
                }
                Objective::InstanceLabels => {
                    let golds: Vec<Vec<f64>> = bags
                        .iter()
                        .map(|&b| {
                            ds.bags[b]
                                .instances
                                .iter()
                                .map(|i| i.gold_label.ok_or_else(|| Error::MissingGoldLabel(i.id.clone())))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<_>>()?;
                    breakdown.supervised = Some(add(w.bag, pointwise_term(&golds, &scores, kind)));
                }
            }
        }
        if w.cosine > 0.0 {
            let prior = self
                .priors
                .cosine
                .as_ref()
                .ok_or(Error::UnavailableTerm("cosine prior"))?;
            let p: Vec<Vec<f64>> = bags.iter().map(|&b| prior.per_bag[b].clone()).collect();
            breakdown.cosine = Some(add(w.cosine, instance_prior_term(&p, &scores, kind)));
        }
        if w.correlation > 0.0 {
            let prior = self
                .priors
                .correlation
                .as_ref()
                .ok_or(Error::UnavailableTerm("correlation prior"))?;
            let m: Vec<&PairMatrix> = bags.iter().map(|&b| &prior.per_bag[b]).collect();
            breakdown.correlation = Some(add(w.correlation, pair_prior_term(&m, &scores, kind)));
        }
        if w.external > 0.0 {
            let prior = self
                .priors
                .external
                .as_ref()
                .ok_or(Error::UnavailableTerm("external prior"))?;
            let p: Vec<Vec<f64>> = bags.iter().map(|&b| prior.per_bag[b].clone()).collect();
            breakdown.external = Some(add(w.external, instance_prior_term(&p, &scores, kind)));
        }

        breakdown.total = w.bag
            * breakdown
                .bag
                .or(breakdown.preference)
                .or(breakdown.supervised)
                .unwrap_or(0.0)
            + w.cosine * breakdown.cosine.unwrap_or(0.0)
            + w.correlation * breakdown.correlation.unwrap_or(0.0)
            + w.external * breakdown.external.unwrap_or(0.0);

        let mut tape = model.new_tape();
        for ((&b, g), c) in bags.iter().zip(&grads).zip(&caches) {
            for ((inst, gi), ci) in ds.bags[b].instances.iter().zip(g).zip(c) {
                model.backward(&mut tape, *gi, &inst.embedding, ci);
            }
        }
        Ok((breakdown, tape))
    }

    /// Unique bags touched by the batch in first-seen order, plus the batch's
    /// preference pairs re-indexed into that list.
    fn batch_bags(&self, batch: &Batch) -> (Vec<usize>, Vec<(usize, usize, f64)>) {
        match batch {
            Batch::Bags(b) => (b.clone(), Vec::new()),
            Batch::Pairs(idx) => {
                let mut bags: Vec<usize> = Vec::new();
                let local = |b: usize, bags: &mut Vec<usize>| match bags.iter().position(|&x| x == b) {
                    Some(p) => p,
                    None => {
                        bags.push(b);
                        bags.len() - 1
                    }
                };
                let pairs = idx
                    .iter()
                    .map(|&i| {
                        let (a, b, y) = self.pairs[i];
                        (local(a, &mut bags), local(b, &mut bags), y)
                    })
                    .collect();
                (bags, pairs)
            }
        }
    }
}
