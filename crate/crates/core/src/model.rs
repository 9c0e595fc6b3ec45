//! Two-hidden-layer MLP instance scorer with hand-written backpropagation.
//!
//! Parameters live in one flat vector so optimizers and checkpoints treat
//! them uniformly. Layout: `W1 (h1×d), b1, W2 (h2×h1), b2, w3 (h2), b3`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelKind;
use crate::error::{Error, Result};

/// Output nonlinearity: `sigmoid` for probabilities, `L·sigmoid` for scores in `(0, L)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    Sigmoid,
    ScaledSigmoid { levels: u32 },
}

impl Head {
    pub fn for_labels(kind: LabelKind) -> Head {
        match kind {
            LabelKind::Binary => Head::Sigmoid,
            LabelKind::Integer(levels) => Head::ScaledSigmoid { levels },
        }
    }

    pub fn scale(self) -> f64 {
        match self {
            Head::Sigmoid => 1.0,
            Head::ScaledSigmoid { levels } => f64::from(levels),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerModel {
    d: usize,
    h1: usize,
    h2: usize,
    head: Head,
    seed: u64,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    squashed: f64,
}

/// Gradient accumulator aligned with a model's flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape {
    pub grads: Vec<f64>,
}

impl GradientTape {
    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().for_each(|g| *g *= factor);
    }
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl ScorerModel {
    /// Seeded init: weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(seed: u64, d: usize, h1: usize, h2: usize, head: Head) -> Result<Self> {
        if d == 0 || h1 == 0 || h2 == 0 {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        let mut model = ScorerModel::zeros(d, h1, h2, head);
        model.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = model.offsets();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut model.params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        fill(o.w1..o.b1, d);
        fill(o.w2..o.b2, h1);
        fill(o.w3..o.b3, h2);
        Ok(model)
    }

    /// All parameters zero; the output is `scale · sigmoid(0)` for every input.
    pub fn zeros(d: usize, h1: usize, h2: usize, head: Head) -> Self {
        let n = Self::param_count(d, h1, h2);
        ScorerModel {
            d,
            h1,
            h2,
            head,
            seed: 0,
            params: vec![0.0; n],
        }
    }

    pub fn param_count(d: usize, h1: usize, h2: usize) -> usize {
        d * h1 + h1 + h1 * h2 + h2 + h2 + 1
    }

    fn offsets(&self) -> Offsets {
        let w1 = 0;
        let b1 = w1 + self.h1 * self.d;
        let w2 = b1 + self.h1;
        let b2 = w2 + self.h2 * self.h1;
        let w3 = b2 + self.h2;
        let b3 = w3 + self.h2;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn hidden_sizes(&self) -> (usize, usize) {
        (self.h1, self.h2)
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn new_tape(&self) -> GradientTape {
        GradientTape {
            grads: vec![0.0; self.params.len()],
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                instance: "model input".into(),
                expected: self.d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.forward_cached(x).map(|(s, _)| s)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(f64, ForwardCache)> {
        self.check_input(x)?;
        let o = self.offsets();
        let p = &self.params;
        let hidden1 = dense_relu(&p[o.w1..o.b1], &p[o.b1..o.w2], x);
        let hidden2 = dense_relu(&p[o.w2..o.b2], &p[o.b2..o.w3], &hidden1);
        let logit = p[o.b3]
            + p[o.w3..o.b3]
                .iter()
                .zip(&hidden2)
                .map(|(w, a)| w * a)
                .sum::<f64>();
        let squashed = sigmoid(logit);
        Ok((
            self.head.scale() * squashed,
            ForwardCache {
                hidden1,
                hidden2,
                squashed,
            },
        ))
    }

    /// Accumulates `upstream · ∂score/∂θ` into `tape`.
    ///
    /// `cache` must come from `forward_cached` on the same `x` and parameters.
    pub fn backward(&self, tape: &mut GradientTape, upstream: f64, x: &[f64], cache: &ForwardCache) {
        debug_assert_eq!(tape.grads.len(), self.params.len());
        if upstream == 0.0 {
            return;
        }
        let o = self.offsets();
        let p = &self.params;
        let g = &mut tape.grads;

        let g_logit = upstream * self.head.scale() * cache.squashed * (1.0 - cache.squashed);
        g[o.b3] += g_logit;
        let mut g_hidden2 = vec![0.0; self.h2];
        for j in 0..self.h2 {
            g[o.w3 + j] += g_logit * cache.hidden2[j];
            if cache.hidden2[j] > 0.0 {
                g_hidden2[j] = g_logit * p[o.w3 + j];
            }
        }

        let mut g_hidden1 = vec![0.0; self.h1];
        for j in 0..self.h2 {
            let gj = g_hidden2[j];
            if gj == 0.0 {
                continue;
            }
            g[o.b2 + j] += gj;
            let row = o.w2 + j * self.h1;
            for k in 0..self.h1 {
                g[row + k] += gj * cache.hidden1[k];
                g_hidden1[k] += gj * p[row + k];
            }
        }

        for k in 0..self.h1 {
            if cache.hidden1[k] <= 0.0 {
                continue;
            }
            let gk = g_hidden1[k];
            g[o.b1 + k] += gk;
            let row = o.w1 + k * self.d;
            for (gw, xv) in g[row..row + self.d].iter_mut().zip(x) {
                *gw += gk * xv;
            }
        }
    }

    const MAGIC: &'static [u8; 8] = b"BAGSCORE";
    const VERSION: u32 = 1;

    /// Little-endian checkpoint: magic, version, sizes, head, seed, then the
    /// flat parameter vector as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * self.params.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        for size in [self.d, self.h1, self.h2] {
            out.extend_from_slice(&(size as u32).to_le_bytes());
        }
        let (tag, levels) = match self.head {
            Head::Sigmoid => (0u32, 1u32),
            Head::ScaledSigmoid { levels } => (1, levels),
        };
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&levels.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(bad("truncated"));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(8)? != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != Self::VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let d = u32_at(take(4)?) as usize;
        let h1 = u32_at(take(4)?) as usize;
        let h2 = u32_at(take(4)?) as usize;
        let tag = u32_at(take(4)?);
        let levels = u32_at(take(4)?);
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let head = match (tag, levels) {
            (0, _) => Head::Sigmoid,
            (1, l) if l >= 1 => Head::ScaledSigmoid { levels: l },
            _ => return Err(bad("unknown head")),
        };
        if d == 0 || h1 == 0 || h2 == 0 || n != Self::param_count(d, h1, h2) {
            return Err(bad("parameter count does not match layer sizes"));
        }
        let raw = take(8 * n)?;
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !cursor.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(ScorerModel {
            d,
            h1,
            h2,
            head,
            seed,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn dense_relu(weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let width = input.len();
    bias.iter()
        .enumerate()
        .map(|(j, b)| {
            let z = b + weights[j * width..(j + 1) * width]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>();
            z.max(0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(seed: u64, d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_model_outputs() {
        let m = ScorerModel::zeros(3, 4, 2, Head::Sigmoid);
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.5);
        let m = ScorerModel::zeros(3, 4, 2, Head::ScaledSigmoid { levels: 4 });
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn param_count_closed_form() {
        assert_eq!(
            ScorerModel::param_count(768, 64, 32),
            768 * 64 + 64 + 64 * 32 + 32 + 32 + 1
        );
        assert_eq!(ScorerModel::param_count(768, 64, 32), 51_329);
        let m = ScorerModel::init(0, 768, 64, 32, Head::Sigmoid).unwrap();
        assert_eq!(m.params().len(), 51_329);
    }

    #[test]
    fn init_is_seeded() {
        let a = ScorerModel::init(5, 8, 4, 3, Head::Sigmoid).unwrap();
        let b = ScorerModel::init(5, 8, 4, 3, Head::Sigmoid).unwrap();
        let c = ScorerModel::init(6, 8, 4, 3, Head::Sigmoid).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let x = random_input(1, 8);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert!(ScorerModel::init(0, 0, 4, 3, Head::Sigmoid).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let m = ScorerModel::init(0, 4, 3, 2, Head::Sigmoid).unwrap();
        assert!(matches!(
            m.forward(&[1.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m.forward(&[1.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    fn fd_check(head: Head, seed: u64) {
        let m = ScorerModel::init(seed, 8, 4, 3, head).unwrap();
        let x = random_input(seed + 100, 8);
        let (_, cache) = m.forward_cached(&x).unwrap();
        let mut tape = m.new_tape();
        m.backward(&mut tape, 1.0, &x, &cache);
        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        for i in 0..m.params().len() {
            let mut up = m.clone();
            up.params_mut()[i] += h;
            let mut down = m.clone();
            down.params_mut()[i] -= h;
            let fd = (up.forward(&x).unwrap() - down.forward(&x).unwrap()) / (2.0 * h);
            let a = tape.grads[i];
            let scale = fd.abs().max(a.abs());
            if scale > 1e-7 {
                max_err = max_err.max((fd - a).abs() / scale);
            } else {
                assert!((fd - a).abs() < 1e-9);
            }
        }
        assert!(max_err < 1e-4, "max relative error {max_err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            fd_check(Head::Sigmoid, seed);
            fd_check(Head::ScaledSigmoid { levels: 4 }, seed);
        }
    }

    #[test]
    fn backward_accumulates_linearly() {
        let m = ScorerModel::init(3, 6, 4, 3, Head::Sigmoid).unwrap();
        let x = random_input(9, 6);
        let (_, cache) = m.forward_cached(&x).unwrap();

        let mut untouched = m.new_tape();
        m.backward(&mut untouched, 0.0, &x, &cache);
        assert!(untouched.grads.iter().all(|&g| g == 0.0));

        let mut twice = m.new_tape();
        m.backward(&mut twice, 0.7, &x, &cache);
        m.backward(&mut twice, 0.7, &x, &cache);
        let mut once = m.new_tape();
        m.backward(&mut once, 1.4, &x, &cache);
        for (a, b) in twice.grads.iter().zip(&once.grads) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ScorerModel::init(11, 5, 4, 3, Head::ScaledSigmoid { levels: 4 }).unwrap();
        let bytes = m.to_bytes();
        let back = ScorerModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(ScorerModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(ScorerModel::from_bytes(&corrupt).is_err());
    }

    #[test]
    fn output_range() {
        for seed in 0..20 {
            let m = ScorerModel::init(seed, 6, 5, 4, Head::ScaledSigmoid { levels: 3 }).unwrap();
            let s = m.forward(&random_input(seed, 6)).unwrap();
            assert!(s > 0.0 && s < 3.0);
        }
    }
}
