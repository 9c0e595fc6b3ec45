//! Exact and differentiable MIN / MAX / AVG over instance scores.
//!
//! Every function returns the aggregate together with its exact gradient with
//! respect to the input scores. The probability-based approximations
//! (`Mult`, `Isr`, `Nor`, `Gm`) need scores strictly inside `(0, 1)`; `Hard`
//! and `Lse` accept any real scores, which is what integer-valued regression
//! heads produce.
//!
//! MIN and MAX are tied by complementation: for probability approximations
//! `soft_max(p) = 1 - soft_min(1 - p)`. `Lse` satisfies the same identity
//! for arbitrary reals.

use serde::{Deserialize, Serialize};

use crate::data::{AggKind, LabelKind};
use crate::error::{Error, Result};
use crate::PROB_EPS;

/// Differentiable approximation used for MIN and MAX. AVG ignores it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approx {
    /// Exact min/max; the gradient is split equally over the extremal coordinates.
    #[default]
    Hard,
    /// Product of probabilities (noisy-AND).
    Mult,
    /// Log-sum-exp with `1/n` normalization.
    Lse,
    /// Integrated segmented regression: `S / (1 + S)` over odds `S = Σ q/(1-q)`.
    Isr,
    /// Noisy-OR: `1 - Π(1 - q)`.
    Nor,
    /// Generalized mean `(mean q^r)^(1/r)`.
    Gm,
}

impl Approx {
    pub const ALL: [Approx; 6] = [
        Approx::Hard,
        Approx::Mult,
        Approx::Lse,
        Approx::Isr,
        Approx::Nor,
        Approx::Gm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Approx::Hard => "hard",
            Approx::Mult => "mult",
            Approx::Lse => "lse",
            Approx::Isr => "isr",
            Approx::Nor => "nor",
            Approx::Gm => "gm",
        }
    }

    /// Whether the approximation is only defined on probabilities.
    pub fn needs_probabilities(self) -> bool {
        matches!(self, Approx::Mult | Approx::Isr | Approx::Nor | Approx::Gm)
    }
}

impl std::str::FromStr for Approx {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Approx::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown approximation {s:?}")))
    }
}

/// Aggregate value and its gradient with respect to each input score.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggConfig {
    pub kind: AggKind,
    pub approx: Approx,
    /// Sharpness `r` for `Lse` and `Gm`.
    pub sharpness: f64,
}

impl AggConfig {
    pub fn new(kind: AggKind, approx: Approx, sharpness: f64) -> Result<Self> {
        let cfg = AggConfig {
            kind,
            approx,
            sharpness,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sharpness must be positive, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }

    /// Rejects probability approximations on integer-valued (regression) tasks.
    pub fn check_for(&self, label_kind: LabelKind) -> Result<()> {
        self.check()?;
        if self.kind != AggKind::Avg && self.approx.needs_probabilities() && !label_kind.is_binary() {
            return Err(Error::InvalidArgument(format!(
                "{} needs probability scores and cannot aggregate integer labels",
                self.approx.name()
            )));
        }
        Ok(())
    }

    pub fn aggregate(&self, scores: &[f64]) -> Result<Aggregate> {
        match self.kind {
            AggKind::Min => soft_min(scores, self.approx, self.sharpness),
            AggKind::Max => soft_max(scores, self.approx, self.sharpness),
            AggKind::Avg => avg(scores),
        }
    }
}

fn check_probabilities(scores: &[f64], approx: Approx) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if approx.needs_probabilities() {
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, &s)| !(s > 0.0 && s < 1.0)) {
            return Err(Error::ScoreOutOfRange {
                approx: approx.name(),
                index,
                value,
            });
        }
    } else if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::ScoreOutOfRange {
            approx: approx.name(),
            index,
            value,
        });
    }
    Ok(())
}

/// Differentiable approximation of `min(scores)`.
pub fn soft_min(scores: &[f64], approx: Approx, sharpness: f64) -> Result<Aggregate> {
    check_probabilities(scores, approx)?;
    Ok(match approx {
        Approx::Hard => hard(scores, |a, b| a < b),
        Approx::Mult | Approx::Nor => product(scores),
        Approx::Lse => lse_min(scores, sharpness),
        Approx::Isr => complement(scores, isr_max),
        Approx::Gm => complement(scores, |q| gm_max(q, sharpness)),
    })
}

/// Differentiable approximation of `max(scores)`.
pub fn soft_max(scores: &[f64], approx: Approx, sharpness: f64) -> Result<Aggregate> {
    check_probabilities(scores, approx)?;
    Ok(match approx {
        Approx::Hard => hard(scores, |a, b| a > b),
        Approx::Mult | Approx::Nor => noisy_or(scores),
        Approx::Lse => lse_max(scores, sharpness),
        Approx::Isr => isr_max(scores),
        Approx::Gm => gm_max(scores, sharpness),
    })
}

/// Arithmetic mean.
pub fn avg(scores: &[f64]) -> Result<Aggregate> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = scores.len() as f64;
    Ok(Aggregate {
        value: scores.iter().sum::<f64>() / n,
        grad: vec![1.0 / n; scores.len()],
    })
}

/// Exact extremum; `better(a, b)` is true when `a` is strictly more extreme.
fn hard(scores: &[f64], better: impl Fn(f64, f64) -> bool) -> Aggregate {
    let best = scores
        .iter()
        .copied()
        .fold(scores[0], |acc, s| if better(s, acc) { s } else { acc });
    let ties = scores.iter().filter(|&&s| s == best).count() as f64;
    Aggregate {
        value: best,
        grad: scores
            .iter()
            .map(|&s| if s == best { 1.0 / ties } else { 0.0 })
            .collect(),
    }
}

/// `Π p_i`, with leave-one-out products as the gradient.
fn product(p: &[f64]) -> Aggregate {
    let n = p.len();
    let mut prefix = vec![1.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] * p[i];
    }
    let mut grad = vec![0.0; n];
    let mut suffix = 1.0;
    for i in (0..n).rev() {
        grad[i] = prefix[i] * suffix;
        suffix *= p[i];
    }
    Aggregate {
        value: prefix[n],
        grad,
    }
}

fn noisy_or(q: &[f64]) -> Aggregate {
    complement(q, product)
}

/// `1 - f(1 - p)`; the two sign flips cancel in the gradient.
fn complement(p: &[f64], f: impl Fn(&[f64]) -> Aggregate) -> Aggregate {
    let flipped: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
    let inner = f(&flipped);
    Aggregate {
        value: 1.0 - inner.value,
        grad: inner.grad,
    }
}

/// `(1/r) ln(mean exp(r * s))` and its softmax gradient, shifted for stability.
fn lse_max(s: &[f64], r: f64) -> Aggregate {
    let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = s.iter().map(|x| (r * (x - top)).exp()).collect();
    let total: f64 = weights.iter().sum();
    Aggregate {
        value: top + (total / s.len() as f64).ln() / r,
        grad: weights.iter().map(|w| w / total).collect(),
    }
}

/// `-(1/r) ln(mean exp(-r * s))`.
fn lse_min(s: &[f64], r: f64) -> Aggregate {
    let negated: Vec<f64> = s.iter().map(|x| -x).collect();
    let inner = lse_max(&negated, r);
    Aggregate {
        value: -inner.value,
        grad: inner.grad,
    }
}

fn isr_max(q: &[f64]) -> Aggregate {
    let clamped: Vec<f64> = q.iter().map(|x| x.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
    let odds: f64 = clamped.iter().map(|x| x / (1.0 - x)).sum();
    let denom = (1.0 + odds) * (1.0 + odds);
    Aggregate {
        value: odds / (1.0 + odds),
        grad: q
            .iter()
            .zip(&clamped)
            .map(|(raw, c)| {
                if raw != c {
                    0.0
                } else {
                    1.0 / (denom * (1.0 - c) * (1.0 - c))
                }
            })
            .collect(),
    }
}

fn gm_max(q: &[f64], r: f64) -> Aggregate {
    let n = q.len() as f64;
    let mean_pow = q.iter().map(|x| x.powf(r)).sum::<f64>() / n;
    let value = mean_pow.powf(1.0 / r);
    Aggregate {
        value,
        grad: q
            .iter()
            .map(|x| x.powf(r - 1.0) * value.powf(1.0 - r) / n)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hard_min_picks_minimum() {
        let a = soft_min(&[0.3, 0.7], Approx::Hard, 1.0).unwrap();
        assert_eq!(a.value, 0.3);
        assert_eq!(a.grad, vec![1.0, 0.0]);
    }

    #[test]
    fn hard_ties_split_gradient() {
        let a = soft_min(&[0.2, 0.5, 0.2], Approx::Hard, 1.0).unwrap();
        assert_eq!(a.grad, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn hard_max_on_integer_scores() {
        let a = soft_max(&[2.0, 4.0], Approx::Hard, 1.0).unwrap();
        assert_eq!(a.value, 4.0);
        assert_eq!(a.grad, vec![0.0, 1.0]);
    }

    #[test]
    fn mult_is_product() {
        assert!(close(
            soft_min(&[0.9, 0.8], Approx::Mult, 1.0).unwrap().value,
            0.72,
            1e-15
        ));
    }

    #[test]
    fn lse_constant_input_is_exact() {
        assert_eq!(soft_min(&[0.5, 0.5], Approx::Lse, 4.0).unwrap().value, 0.5);
    }

    #[test]
    fn lse_two_point_bound() {
        let v = soft_min(&[0.2, 0.8], Approx::Lse, 4.0).unwrap().value;
        // -(1/4) ln((e^-0.8 + e^-3.2) / 2), evaluated independently
        let expected = -(((-0.8f64).exp() + (-3.2f64).exp()) / 2.0).ln() / 4.0;
        assert!(close(v, expected, 1e-14));
        assert!((0.2..=0.2 + 2f64.ln() / 4.0).contains(&v));
    }

    #[test]
    fn nor_max_of_halves() {
        assert!(close(
            soft_max(&[0.5, 0.5], Approx::Nor, 1.0).unwrap().value,
            0.75,
            1e-15
        ));
    }

    #[test]
    fn avg_cases() {
        let a = avg(&[0.2, 0.4, 0.6]).unwrap();
        assert!(close(a.value, 0.4, 1e-15));
        assert_eq!(avg(&[0.37]).unwrap().value, 0.37);
        assert_eq!(avg(&[1.0; 5]).unwrap().grad, vec![0.2; 5]);
    }

    #[test]
    fn errors() {
        assert!(matches!(soft_min(&[], Approx::Hard, 1.0), Err(Error::EmptyInput)));
        assert!(matches!(avg(&[]), Err(Error::EmptyInput)));
        for approx in [Approx::Mult, Approx::Isr, Approx::Nor, Approx::Gm] {
            assert!(matches!(
                soft_min(&[0.5, 1.0], approx, 2.0),
                Err(Error::ScoreOutOfRange { index: 1, .. })
            ));
        }
        assert!(soft_min(&[2.0, 3.0], Approx::Lse, 2.0).is_ok());
        assert!(AggConfig::new(AggKind::Min, Approx::Lse, 0.0).is_err());
        let cfg = AggConfig::new(AggKind::Max, Approx::Mult, 1.0).unwrap();
        assert!(cfg.check_for(LabelKind::Integer(4)).is_err());
        assert!(cfg.check_for(LabelKind::Binary).is_ok());
    }

    fn probs() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.02f64..0.98, 1..10)
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, p: &[f64], i: usize, h: f64) -> f64 {
        let mut up = p.to_vec();
        let mut down = p.to_vec();
        up[i] += h;
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn singleton_is_exact(p in 0.01f64..0.99, r in 0.5f64..16.0) {
            for approx in Approx::ALL {
                let lo = soft_min(&[p], approx, r).unwrap().value;
                let hi = soft_max(&[p], approx, r).unwrap().value;
                prop_assert!(close(lo, p, 1e-12), "{approx:?} min {lo} vs {p}");
                prop_assert!(close(hi, p, 1e-12), "{approx:?} max {hi} vs {p}");
            }
        }

        #[test]
        fn gradients_match_finite_differences(p in probs(), r in 1.0f64..10.0) {
            for approx in Approx::ALL.into_iter().filter(|a| *a != Approx::Hard) {
                for f in [soft_min, soft_max] {
                    let a = f(&p, approx, r).unwrap();
                    for i in 0..p.len() {
                        let fd = central_diff(|x| f(x, approx, r).unwrap().value, &p, i, 1e-5);
                        let err = (fd - a.grad[i]).abs() / fd.abs().max(a.grad[i].abs()).max(1e-8);
                        prop_assert!(err < 1e-4 || (fd - a.grad[i]).abs() < 1e-9,
                            "{approx:?} coord {i}: analytic {} fd {fd}", a.grad[i]);
                    }
                }
            }
        }

        #[test]
        fn soft_min_is_monotone(p in probs(), r in 1.0f64..10.0, bump in 0.001f64..0.02) {
            for approx in Approx::ALL {
                let base = soft_min(&p, approx, r).unwrap().value;
                for i in 0..p.len() {
                    let mut q = p.clone();
                    q[i] += bump;
                    let v = soft_min(&q, approx, r).unwrap().value;
                    prop_assert!(v >= base - 1e-12, "{approx:?} decreased at {i}");
                }
            }
        }

        #[test]
        fn permutation_invariant(p in probs(), r in 1.0f64..10.0, seed in any::<u64>()) {
            let mut q = p.clone();
            let n = q.len();
            q.rotate_left((seed as usize) % n);
            if seed % 2 == 0 { q.reverse(); }
            for approx in Approx::ALL {
                for f in [soft_min, soft_max] {
                    let a = f(&p, approx, r).unwrap().value;
                    let b = f(&q, approx, r).unwrap().value;
                    prop_assert!(close(a, b, 1e-12));
                }
            }
        }

        #[test]
        fn max_is_complemented_min(p in probs(), r in 1.0f64..10.0) {
            let flipped: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
            for approx in Approx::ALL {
                let mx = soft_max(&p, approx, r).unwrap().value;
                let mn = soft_min(&flipped, approx, r).unwrap().value;
                prop_assert!(close(mx, 1.0 - mn, 1e-12), "{approx:?}");
            }
        }
    }
}
