//! Frozen stand-in for a pretrained image/text encoder pair.
//!
//! The frame encoder is a fixed projection with orthonormal rows followed by
//! layer normalization. Class "text" features are rows of an
//! [`EmbeddingBank`]. Neither ever receives a gradient.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine, l2_norm, Tape, Tensor, Var};

const UNIT_NORM_TOL: f64 = 1e-9;

pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("vector norm {n}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder {
    raw_dim: usize,
    dim: usize,
    /// `[raw_dim, dim]`, rows orthonormal.
    projection: Tensor,
    norm_gain: Tensor,
    norm_bias: Tensor,
    seed: u64,
}

impl FrozenEncoder {
    pub fn new(raw_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        if raw_dim == 0 || raw_dim > dim {
            return Err(Error::invalid(format!(
                "encoder needs 0 < raw_dim <= dim (got {raw_dim} and {dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(raw_dim);
        while rows.len() < raw_dim {
            let mut v = gaussian_vec(&mut rng, dim, 1.0);
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            if l2_norm(&v) > 1e-6 {
                normalize(&mut v)?;
                rows.push(v);
            }
        }
        Ok(FrozenEncoder {
            raw_dim,
            dim,
            projection: Tensor::from_rows(&rows)?,
            norm_gain: Tensor::full(&[dim], 1.0),
            norm_bias: Tensor::zeros(&[dim]),
            seed,
        })
    }

    /// Shape consistency of a deserialized encoder.
    pub fn validate(&self) -> Result<()> {
        let ok = self.raw_dim >= 1
            && self.raw_dim <= self.dim
            && self.projection.shape() == [self.raw_dim, self.dim]
            && self.norm_gain.shape() == [self.dim]
            && self.norm_bias.shape() == [self.dim]
            && self.projection.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "encoder tensors do not match raw_dim {} and dim {}",
                self.raw_dim, self.dim
            )))
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Maps `[T, raw_dim]` frames to `[T, dim]` embeddings, each frame on its own.
    pub fn encode_frames(&self, frames: &Tensor) -> Result<Tensor> {
        match frames.shape() {
            [t, r] if *r == self.raw_dim && *t >= 1 => {}
            s => {
                return Err(Error::Shape {
                    op: "encode_frames",
                    lhs: s.to_vec(),
                    rhs: vec![self.raw_dim],
                })
            }
        }
        let tape = Tape::new();
        let x = tape.constant(frames.clone());
        let p = tape.constant(self.projection.clone());
        let g = tape.constant(self.norm_gain.clone());
        let b = tape.constant(self.norm_bias.clone());
        let e = tape.layer_norm(tape.matmul(x, p)?, g, b)?;
        let out = tape.value(e).clone();
        Ok(out)
    }

    /// Inverse of the projection on its row space: a raw frame whose
    /// projection is the component of `latent` inside that space.
    pub fn render(&self, latent: &[f64]) -> Vec<f64> {
        (0..self.raw_dim)
            .map(|r| self.projection.row(r).iter().zip(latent).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Mean over frames of a `[T, D]` embedding.
pub fn pooled_spatial(e: &Tensor) -> Result<Tensor> {
    let (t, d) = match e.shape() {
        [t, d] if *t >= 1 => (*t, *d),
        s => {
            return Err(Error::Shape {
                op: "pooled_spatial",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let mut out = vec![0.0; d];
    for i in 0..t {
        out.iter_mut().zip(e.row(i)).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    Ok(Tensor::vector(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankRole {
    FineTuning,
    Test,
}

/// Fixed unit-norm class embeddings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingBank {
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
    seed: u64,
    role: BankRole,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BankRecord {
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
    seed: u64,
    role: BankRole,
}

impl<'de> Deserialize<'de> for EmbeddingBank {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = BankRecord::deserialize(d)?;
        EmbeddingBank::new(r.labels, r.vectors, r.seed, r.role).map_err(serde::de::Error::custom)
    }
}

impl EmbeddingBank {
    /// Validating constructor: rows unit-norm, labels unique, dims consistent.
    pub fn new(labels: Vec<String>, vectors: Vec<Vec<f64>>, seed: u64, role: BankRole) -> Result<Self> {
        if labels.is_empty() || labels.len() != vectors.len() {
            return Err(Error::invalid(format!(
                "bank needs one vector per label ({} labels, {} vectors)",
                labels.len(),
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(Error::invalid("bank vectors are empty"));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, (label, v)) in labels.iter().zip(&vectors).enumerate() {
            if v.len() != dim {
                return Err(Error::Shape {
                    op: "embedding_bank",
                    lhs: vec![dim],
                    rhs: vec![v.len()],
                });
            }
            let n = l2_norm(v);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("bank row '{label}' has norm {n}, expected 1")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate bank label '{label}'")));
            }
        }
        Ok(EmbeddingBank {
            labels,
            vectors,
            seed,
            role,
            index,
        })
    }

    /// Rows drawn from an isotropic Gaussian and L2-normalized.
    pub fn gaussian(labels: Vec<String>, dim: usize, seed: u64, role: BankRole) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(labels.len());
        for _ in &labels {
            let mut v = gaussian_vec(&mut rng, dim, 1.0);
            normalize(&mut v)?;
            vectors.push(v);
        }
        Self::new(labels, vectors, seed, role)
    }

    /// Each new row is `normalize(w·a + (1−w)·b + noise)` for a parent pair
    /// `(a, b)` of `parent` rows; `noise` has total expected norm `sigma`.
    pub fn mixtures(
        parent: &EmbeddingBank,
        labels: Vec<String>,
        pairs: &[(usize, usize)],
        weight: f64,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if pairs.len() != labels.len() {
            return Err(Error::invalid("one parent pair per mixture label"));
        }
        let dim = parent.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(labels.len());
        for &(a, b) in pairs {
            if a >= parent.len() || b >= parent.len() {
                return Err(Error::Index {
                    op: "bank_mixtures",
                    index: a.max(b),
                    len: parent.len(),
                });
            }
            let noise = gaussian_vec(&mut rng, dim, sigma / (dim as f64).sqrt());
            let mut v: Vec<f64> = (0..dim)
                .map(|j| weight * parent.vectors[a][j] + (1.0 - weight) * parent.vectors[b][j] + noise[j])
                .collect();
            normalize(&mut v)?;
            vectors.push(v);
        }
        Self::new(labels, vectors, seed, BankRole::Test)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn role(&self) -> BankRole {
        self.role
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Index of every label, or an error naming the first missing one.
    pub fn indices_of<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> Result<Vec<usize>> {
        labels
            .into_iter()
            .map(|l| {
                self.index_of(l)
                    .ok_or_else(|| Error::invalid(format!("label '{l}' is not in the bank")))
            })
            .collect()
    }

    /// `[C, D]` matrix of the rows.
    pub fn matrix(&self) -> Tensor {
        Tensor::from_rows(&self.vectors).expect("validated rectangular")
    }

    /// `[D, C]` matrix, the right operand for batched logits.
    pub fn matrix_t(&self) -> Tensor {
        let (c, d) = (self.len(), self.dim());
        let mut data = vec![0.0; c * d];
        for (i, v) in self.vectors.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                data[j * c + i] = *x;
            }
        }
        Tensor::new(vec![d, c], data).expect("shape")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Cosine similarity of `z` to every bank row, divided by `temperature`.
pub fn similarity_logits(z: &[f64], bank: &EmbeddingBank, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if z.len() != bank.dim() {
        return Err(Error::Shape {
            op: "similarity_logits",
            lhs: vec![z.len()],
            rhs: vec![bank.len(), bank.dim()],
        });
    }
    if l2_norm(z) == 0.0 {
        return Err(Error::Degenerate("zero-norm video feature".into()));
    }
    let logits = bank.vectors.iter().map(|y| cosine(z, y) / temperature).collect();
    Ok(Tensor::vector(logits))
}

/// Differentiable batched form: `z: [B, D]`, `bank_t: [D, C]` (unit columns).
pub fn similarity_logits_var(tape: &Tape, z: Var, bank_t: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let zn = tape.l2_normalize_rows(z)?;
    Ok(tape.scale(tape.matmul(zn, bank_t)?, 1.0 / temperature))
}
