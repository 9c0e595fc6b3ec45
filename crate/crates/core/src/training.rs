//! Seeded minibatch training for bag labels, preference labels, instance
//! labels and the response-level baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggConfig, Approx};
use crate::data::{AggKind, Bag, Dataset, Instance};
use crate::error::{Error, Result};
use crate::losses::{Batch, LossBreakdown, LossSetup, LossWeights, Objective};
use crate::model::{GradientTape, Head, ScorerModel};
use crate::priors::Priors;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Mutable optimizer state for one parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    optimizer: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, n_params: usize) -> Self {
        OptimizerState {
            optimizer,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        match self.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Bag labels (optionally with priors).
    Bag,
    /// Preference labels between bags (optionally with priors).
    Preference,
    /// Baseline: train on bag-mean embeddings against bag labels.
    ResponseLevel,
    /// Baseline and retraining stage: gold or pseudo instance labels.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to `ceil(units / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub weights: LossWeights,
    pub approx: Approx,
    pub sharpness: f64,
    pub hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Bag,
            batch_size: 32,
            epochs: 20,
            steps_per_epoch: None,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            weights: LossWeights::bag_only(),
            approx: Approx::Hard,
            sharpness: 8.0,
            hidden: [64, 32],
        }
    }
}

impl TrainConfig {
    pub fn agg_for(&self, ds: &Dataset) -> AggConfig {
        AggConfig {
            kind: ds.agg(),
            approx: self.approx,
            sharpness: self.sharpness,
        }
    }

    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate must be non-negative".into(),
            ));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::InvalidArgument("invalid Adam hyperparameters".into()));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden sizes must be positive".into()));
        }
        self.weights.check()
    }

    /// The prior sources this configuration's weights require.
    pub fn needed_priors(&self, ds: &Dataset) -> Result<Priors> {
        if self.mode == TrainMode::ResponseLevel {
            return Ok(Priors::default());
        }
        Priors::compute(
            ds,
            self.weights.cosine > 0.0,
            self.weights.correlation > 0.0,
            self.weights.external > 0.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub term_breakdown: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Line-delimited JSON, one record per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ScorerModel,
    pub log: TrainLog,
}

fn objective_for(mode: TrainMode) -> Objective {
    match mode {
        TrainMode::Bag | TrainMode::ResponseLevel => Objective::BagLabels,
        TrainMode::Preference => Objective::Preference,
        TrainMode::Supervised => Objective::InstanceLabels,
    }
}

/// Trains a scorer according to `cfg.mode`. `priors` must hold every prior
/// source with nonzero weight (see [`TrainConfig::needed_priors`]).
pub fn train(ds: &Dataset, cfg: &TrainConfig, priors: &Priors) -> Result<TrainOutcome> {
    cfg.check()?;
    if cfg.mode == TrainMode::ResponseLevel {
        return train_response_level(ds, cfg);
    }
    let pairs = if cfg.mode == TrainMode::Preference {
        ds.resolve_pairs(&ds.preferences)?
    } else {
        Vec::new()
    };
    let setup = LossSetup {
        ds,
        priors,
        pairs: &pairs,
        weights: cfg.weights,
        agg: cfg.agg_for(ds),
        objective: objective_for(cfg.mode),
    };
    setup.check()?;
    let units = match cfg.mode {
        TrainMode::Preference => pairs.len(),
        _ => ds.bags.len(),
    };
    run(ds, cfg, &setup, units)
}

/// Baseline that never sees instances during training: each bag becomes one
/// instance whose embedding is the bag mean, labeled with the bag label.
pub fn train_response_level(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let responses = response_dataset(ds)?;
    let cfg = TrainConfig {
        mode: TrainMode::Bag,
        weights: LossWeights::bag_only(),
        ..cfg.clone()
    };
    train(&responses, &cfg, &Priors::default())
}

/// Trains on instance labels; the retraining stage after pseudo-labeling uses
/// this with pseudo-labels in the gold-label slot.
pub fn train_supervised(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: TrainMode::Supervised,
        ..cfg.clone()
    };
    let priors = cfg.needed_priors(ds)?;
    train(ds, &cfg, &priors)
}

/// One singleton bag per response: mean embedding, bag label, AVG aggregation.
pub fn response_dataset(ds: &Dataset) -> Result<Dataset> {
    let bags = ds
        .bags
        .iter()
        .map(|b| {
            let label = b.label.ok_or_else(|| Error::MissingBagLabel(b.id.clone()))?;
            Ok(Bag {
                id: b.id.clone(),
                instances: vec![Instance {
                    id: b.id.clone(),
                    embedding: b.mean_embedding(),
                    gold_label: None,
                    external_prior: None,
                }],
                agg: AggKind::Avg,
                label: Some(label),
                context_embedding: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(ds.d, ds.label_kind, bags)
}

fn run(ds: &Dataset, cfg: &TrainConfig, setup: &LossSetup<'_>, units: usize) -> Result<TrainOutcome> {
    let q = cfg.batch_size;
    if units == 0 || q > units {
        return Err(Error::InvalidArgument(format!(
            "batch size {q} exceeds the {units} available training units"
        )));
    }
    let head = Head::for_labels(ds.label_kind);
    let mut model = ScorerModel::init(cfg.seed, ds.d, cfg.hidden[0], cfg.hidden[1], head)?;
    let mut opt = OptimizerState::new(cfg.optimizer, model.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a3b_1e5d_0001);
    let steps = cfg.steps_per_epoch.unwrap_or(units.div_ceil(q));
    let mut order: Vec<usize> = (0..units).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for k in 0..steps {
            let picked: Vec<usize> = (0..q).map(|j| order[(k * q + j) % units]).collect();
            let batch = match cfg.mode {
                TrainMode::Preference => Batch::Pairs(picked),
                _ => Batch::Bags(picked),
            };
            let step = log.steps.len();
            let (breakdown, tape) = setup.evaluate(&model, &batch).map_err(|e| match e {
                Error::ScoreOutOfRange { value, .. } if !value.is_finite() => Error::NonFinite {
                    step,
                    detail: format!("model produced score {value}"),
                },
                other => other,
            })?;
            check_finite(step, &breakdown, &tape)?;
            opt.step(model.params_mut(), &tape.grads, cfg.learning_rate);
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: "parameters diverged after the update".into(),
                });
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: breakdown.total,
                term_breakdown: breakdown,
            });
        }
    }
    Ok(TrainOutcome { model, log })
}

fn check_finite(step: usize, breakdown: &LossBreakdown, tape: &GradientTape) -> Result<()> {
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("loss terms {breakdown:?}"),
        });
    }
    if let Some(i) = tape.grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient of parameter {i} is {}", tape.grads[i]),
        });
    }
    Ok(())
}

/// Total loss of `model` over every training unit at once.
pub fn full_loss(
    ds: &Dataset,
    cfg: &TrainConfig,
    priors: &Priors,
    model: &ScorerModel,
) -> Result<LossBreakdown> {
    let pairs = if cfg.mode == TrainMode::Preference {
        ds.resolve_pairs(&ds.preferences)?
    } else {
        Vec::new()
    };
    let setup = LossSetup {
        ds,
        priors,
        pairs: &pairs,
        weights: cfg.weights,
        agg: cfg.agg_for(ds),
        objective: objective_for(cfg.mode),
    };
    setup.check()?;
    let batch = match cfg.mode {
        TrainMode::Preference => Batch::Pairs((0..pairs.len()).collect()),
        _ => Batch::Bags((0..ds.bags.len()).collect()),
    };
    setup.evaluate(model, &batch).map(|(b, _)| b)
}

/// Model scores for every instance, grouped by bag.
pub fn predict(model: &ScorerModel, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.bags
        .iter()
        .map(|b| b.instances.iter().map(|i| model.forward(&i.embedding)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn small_ds() -> Dataset {
        generate_synthetic(&SynthConfig {
            n_bags: 40,
            d: 6,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 3,
            hidden: [8, 4],
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = small_ds();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let out = train(&ds, &cfg, &Priors::default()).unwrap();
        let init = ScorerModel::init(cfg.seed, ds.d, 8, 4, Head::Sigmoid).unwrap();
        assert_eq!(out.model, init);
        assert!(out.log.steps.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = small_ds();
        let a = train(&ds, &small_cfg(), &Priors::default()).unwrap();
        let b = train(&ds, &small_cfg(), &Priors::default()).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.steps.len(), 3 * 5);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = small_ds();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_cfg()
        };
        let out = train_supervised(&ds, &cfg).unwrap();
        let init = ScorerModel::init(cfg.seed, ds.d, 8, 4, Head::Sigmoid).unwrap();
        assert_eq!(out.model.params(), init.params());
    }

    #[test]
    fn adam_closed_form_single_parameter() {
        // f(θ) = θ², θ0 = 1: first Adam step moves by exactly lr (m̂ = g, v̂ = g²).
        let mut state = OptimizerState::new(Optimizer::default(), 1);
        let mut theta = [1.0];
        state.step(&mut theta, &[2.0], 0.1);
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
        // second step: g = 2θ1
        let g2 = 2.0 * theta[0];
        let m = 0.9 * 0.1 * 2.0 + 0.1 * g2;
        let v = 0.999 * 0.001 * 4.0 + 0.001 * g2 * g2;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected2 = theta[0] - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        state.step(&mut theta, &[g2], 0.1);
        assert!((theta[0] - expected2).abs() < 1e-15);
    }

    #[test]
    fn batch_larger_than_dataset_rejected() {
        let ds = small_ds();
        let cfg = TrainConfig {
            batch_size: 41,
            ..small_cfg()
        };
        assert!(train(&ds, &cfg, &Priors::default()).is_err());
    }

    #[test]
    fn missing_labels_rejected() {
        let mut ds = small_ds();
        ds.bags[2].label = None;
        assert!(matches!(
            train(&ds, &small_cfg(), &Priors::default()),
            Err(Error::MissingBagLabel(_))
        ));
        let mut ds = small_ds();
        ds.bags[0].instances[0].gold_label = None;
        assert!(matches!(
            train_supervised(&ds, &small_cfg()),
            Err(Error::MissingGoldLabel(_))
        ));
        let ds = small_ds();
        let cfg = TrainConfig {
            mode: TrainMode::Preference,
            ..small_cfg()
        };
        assert!(train(&ds, &cfg, &Priors::default()).is_err());
    }

    #[test]
    fn unavailable_prior_rejected() {
        let ds = small_ds();
        let cfg = TrainConfig {
            weights: LossWeights::new(0.8, 0.2, 0.0, 0.0).unwrap(),
            ..small_cfg()
        };
        assert!(matches!(
            train(&ds, &cfg, &Priors::default()),
            Err(Error::UnavailableTerm("cosine prior"))
        ));
    }

    #[test]
    fn response_level_on_singletons_matches_supervised() {
        let mut ds = generate_synthetic(&SynthConfig {
            n_bags: 30,
            d: 5,
            bag_size_min: 1,
            bag_size_max: 1,
            ..Default::default()
        })
        .unwrap();
        for bag in &mut ds.bags {
            bag.agg = AggKind::Avg;
        }
        let cfg = TrainConfig {
            batch_size: 5,
            epochs: 2,
            hidden: [6, 3],
            ..Default::default()
        };
        let resp = train_response_level(&ds, &cfg).unwrap();
        let sup = train_supervised(&ds, &cfg).unwrap();
        assert_eq!(resp.model.params(), sup.model.params());
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let ds = small_ds();
        for seed in 0..5 {
            let model = ScorerModel::init(seed, ds.d, 8, 4, Head::Sigmoid).unwrap();
            let priors = Priors::compute(&ds, true, true, true).unwrap();
            let setup = LossSetup {
                ds: &ds,
                priors: &priors,
                pairs: &[],
                weights: LossWeights::new(0.4, 0.2, 0.2, 0.2).unwrap(),
                agg: AggConfig::new(AggKind::Min, Approx::Lse, 4.0).unwrap(),
                objective: Objective::BagLabels,
            };
            let batch = Batch::Bags(vec![seed as usize, 7, 11, 20]);
            let (before, tape) = setup.evaluate(&model, &batch).unwrap();
            let mut stepped = model.clone();
            OptimizerState::new(Optimizer::Sgd, tape.grads.len()).step(
                stepped.params_mut(),
                &tape.grads,
                1e-4,
            );
            let (after, _) = setup.evaluate(&stepped, &batch).unwrap();
            assert!(
                after.total < before.total,
                "seed {seed}: {} -> {}",
                before.total,
                after.total
            );
        }
    }
}
