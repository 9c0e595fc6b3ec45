//! Instance priors `p_x` and pairwise priors `p_xz`.
//!
//! Priors are soft labels in `[0, 1]`. Instance priors come from the cosine
//! similarity of a sentence embedding to its bag's context embedding, or from
//! externally supplied scores; pairwise priors come from the Pearson
//! correlation of two sentence embeddings in the same bag.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    CosineContext,
    PairwiseCorrelation,
    ExternalFile,
}

/// `½ (1 + cos(x, u))`.
pub fn cos_prior(x: &[f64], u: &[f64]) -> Result<f64> {
    if x.len() != u.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine prior on vectors of dimension {} and {}",
            x.len(),
            u.len()
        )));
    }
    let nx = norm(x);
    let nu = norm(u);
    if nx == 0.0 || nu == 0.0 {
        return Err(Error::DegenerateVector("cosine of a zero-norm vector".into()));
    }
    let cos = dot(x, u) / (nx * nu);
    Ok((0.5 * (1.0 + cos)).clamp(0.0, 1.0))
}

/// `½ (1 + ρ(x, z))` with `ρ` the Pearson correlation of the coordinates.
pub fn corr_prior(x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::InvalidArgument(format!(
            "correlation prior on vectors of dimension {} and {}",
            x.len(),
            z.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateVector(
            "correlation needs at least 2 coordinates".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let mz = z.iter().sum::<f64>() / n;
    let (mut sxz, mut sxx, mut szz) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(z) {
        let (da, db) = (a - mx, b - mz);
        sxz += da * db;
        sxx += da * da;
        szz += db * db;
    }
    if sxx == 0.0 || szz == 0.0 {
        return Err(Error::DegenerateVector(
            "correlation with a constant vector".into(),
        ));
    }
    let rho = sxz / (sxx.sqrt() * szz.sqrt());
    Ok((0.5 * (1.0 + rho)).clamp(0.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One prior value per instance, grouped by bag in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrior {
    pub kind: PriorKind,
    pub per_bag: Vec<Vec<f64>>,
}

/// Symmetric `k × k` matrix of pairwise priors for one bag, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMatrix {
    pub size: usize,
    pub values: Vec<f64>,
}

impl PairMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwisePrior {
    pub per_bag: Vec<PairMatrix>,
}

/// Cosine-to-context prior for every instance. Every bag needs a context embedding.
pub fn cosine_context_prior(ds: &Dataset) -> Result<InstancePrior> {
    let per_bag = ds
        .bags
        .iter()
        .map(|bag| {
            let ctx = bag
                .context_embedding
                .as_ref()
                .ok_or_else(|| Error::MissingContext(bag.id.clone()))?;
            bag.instances
                .iter()
                .map(|i| cos_prior(&i.embedding, ctx))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(InstancePrior {
        kind: PriorKind::CosineContext,
        per_bag,
    })
}

/// Within-bag correlation priors; the diagonal is 1.
pub fn correlation_prior(ds: &Dataset) -> Result<PairwisePrior> {
    let per_bag =
        ds.bags
            .iter()
            .map(|bag| {
                let k = bag.len();
                let mut values = vec![1.0; k * k];
                for i in 0..k {
                    for j in (i + 1)..k {
                        let v = corr_prior(&bag.instances[i].embedding, &bag.instances[j].embedding)
                            .map_err(|e| match e {
                                Error::DegenerateVector(m) => {
                                    Error::DegenerateVector(format!("{m} in bag {:?}", bag.id))
                                }
                                other => other,
                            })?;
                        values[i * k + j] = v;
                        values[j * k + i] = v;
                    }
                }
                Ok(PairMatrix { size: k, values })
            })
            .collect::<Result<_>>()?;
    Ok(PairwisePrior { per_bag })
}

/// Priors carried on the instances' `external_prior` field.
pub fn load_external_prior(ds: &Dataset) -> Result<InstancePrior> {
    let per_bag = ds
        .bags
        .iter()
        .map(|bag| {
            bag.instances
                .iter()
                .map(|i| i.external_prior.ok_or_else(|| Error::MissingPrior(i.id.clone())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(InstancePrior {
        kind: PriorKind::ExternalFile,
        per_bag,
    })
}

/// The prior sources a training run uses; `None` for sources it does not need.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Priors {
    pub cosine: Option<InstancePrior>,
    pub correlation: Option<PairwisePrior>,
    pub external: Option<InstancePrior>,
}

impl Priors {
    pub fn compute(ds: &Dataset, cosine: bool, correlation: bool, external: bool) -> Result<Self> {
        Ok(Priors {
            cosine: cosine.then(|| cosine_context_prior(ds)).transpose()?,
            correlation: correlation.then(|| correlation_prior(ds)).transpose()?,
            external: external.then(|| load_external_prior(ds)).transpose()?,
        })
    }
}
