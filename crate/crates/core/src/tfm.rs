//! Test-time temporal feature modulation.
//!
//! The pooled temporal feature is scaled by `ρ = exp(−(1 − M)/γ)`, where `M`
//! measures how well the test categories near a sample are covered by the
//! fine-tuning categories near it.

use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingBank;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

/// Order of the two poolings over the `K × K` proxy similarity matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssociationPooling {
    /// Max over fine-tuning proxies, then mean over test proxies.
    #[default]
    MaxFineTuning,
    /// Max over test proxies, then mean over fine-tuning proxies.
    MaxTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfmConfig {
    pub k_neighbors: usize,
    pub gamma: f64,
    pub enabled: bool,
    #[serde(default)]
    pub pooling: AssociationPooling,
}

impl Default for TfmConfig {
    fn default() -> Self {
        TfmConfig {
            k_neighbors: 5,
            gamma: 0.05,
            enabled: true,
            pooling: AssociationPooling::MaxFineTuning,
        }
    }
}

impl TfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::Config("tfm.k_neighbors must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("tfm.gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Neighbour count actually used against two banks.
    pub fn effective_k(&self, a: &EmbeddingBank, b: &EmbeddingBank) -> usize {
        self.k_neighbors.min(a.len()).min(b.len())
    }

    /// `ρ` for one sample, or exactly 1 when modulation is off.
    pub fn rho(&self, e_pooled: &[f64], fine_tuning: &EmbeddingBank, test: &EmbeddingBank) -> Result<f64> {
        if !self.enabled {
            return Ok(1.0);
        }
        let k = self.effective_k(fine_tuning, test);
        let y_f = retrieve_proxies(e_pooled, fine_tuning, k)?;
        let y_t = retrieve_proxies(e_pooled, test, k)?;
        let m = association(&y_t, &y_f, self.pooling)?;
        Ok(rho_from_association(m, self.gamma))
    }
}

/// The `k` rows of `bank` closest in cosine to `e_pooled`, most similar
/// first; ties go to the lower index.
pub fn retrieve_proxies(e_pooled: &[f64], bank: &EmbeddingBank, k: usize) -> Result<Tensor> {
    if e_pooled.len() != bank.dim() {
        return Err(Error::Shape {
            op: "retrieve_proxies",
            lhs: vec![e_pooled.len()],
            rhs: vec![bank.len(), bank.dim()],
        });
    }
    if k == 0 || k > bank.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", bank.len())));
    }
    if e_pooled.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("zero-norm query for proxy retrieval".into()));
    }
    let mut scored: Vec<(usize, f64)> = bank
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, y)| (i, cosine(e_pooled, y)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let rows: Vec<Vec<f64>> = scored[..k].iter().map(|(i, _)| bank.vector(*i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

fn similarity(a: &[f64], b: &[f64]) -> f64 {
    // A proxy compared with itself is exactly 1, independent of rounding.
    if a == b {
        1.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

/// `M`: pooled similarity between test proxies `y_t` and fine-tuning proxies
/// `y_f` (both `[K, D]`, unit rows).
pub fn association(y_t: &Tensor, y_f: &Tensor, pooling: AssociationPooling) -> Result<f64> {
    if y_t.ndim() != 2 || y_f.ndim() != 2 || y_t.shape()[1] != y_f.shape()[1] || y_t.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "association",
            lhs: y_t.shape().to_vec(),
            rhs: y_f.shape().to_vec(),
        });
    }
    let (outer, inner) = match pooling {
        AssociationPooling::MaxFineTuning => (y_t, y_f),
        AssociationPooling::MaxTest => (y_f, y_t),
    };
    let total: f64 = (0..outer.rows())
        .map(|o| {
            (0..inner.rows())
                .map(|i| similarity(outer.row(o), inner.row(i)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / outer.shape()[0] as f64)
}

/// `exp(−(1 − m)/γ)`.
pub fn rho_from_association(m: f64, gamma: f64) -> f64 {
    (-(1.0 - m) / gamma).exp()
}

/// `ρ` under the default pooling order.
pub fn semantic_association(y_t: &Tensor, y_f: &Tensor, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    Ok(rho_from_association(
        association(y_t, y_f, AssociationPooling::MaxFineTuning)?,
        gamma,
    ))
}

/// `z = e + ρ·t`.
pub fn modulated_embedding(e_pooled: &[f64], t_pooled: &[f64], rho: f64) -> Result<Vec<f64>> {
    if e_pooled.len() != t_pooled.len() {
        return Err(Error::Shape {
            op: "modulated_embedding",
            lhs: vec![e_pooled.len()],
            rhs: vec![t_pooled.len()],
        });
    }
    Ok(e_pooled.iter().zip(t_pooled).map(|(e, t)| e + rho * t).collect())
}
