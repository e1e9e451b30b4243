use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the training loop picks the active expert of each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingPolicy {
    /// Always the last expert.
    Fixed,
    /// Uniform over experts.
    Random,
    /// `P(i) ∝ exp(i)` for 1-based `i`.
    Multinomial,
}

/// Activation law over `n` experts: `exp(i) / Σ exp(i')`, `i = 1..=n`.
pub fn routing_probabilities(n: usize) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|i| (i as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// One multinomial draw. Returns a 0-based index; expert `k` carries
/// weight `exp(k + 1)`.
pub fn route(n: usize, rng: &mut impl Rng) -> usize {
    RoutingPolicy::Multinomial.pick(n, rng)
}

impl RoutingPolicy {
    pub fn pick(self, n: usize, rng: &mut impl Rng) -> usize {
        match (self, n) {
            (_, 0 | 1) => 0,
            (RoutingPolicy::Fixed, _) => n - 1,
            (RoutingPolicy::Random, _) => rng.gen_range(0..n),
            (RoutingPolicy::Multinomial, _) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, p) in routing_probabilities(n).into_iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                n - 1
            }
        }
    }
}

/// Active expert (0-based) for every layer; shared by the whole batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub experts: Vec<usize>,
}

impl RoutingDecision {
    pub fn sample(policy: RoutingPolicy, layers: usize, experts: usize, rng: &mut impl Rng) -> Self {
        RoutingDecision {
            experts: (0..layers).map(|_| policy.pick(experts, rng)).collect(),
        }
    }

    /// Expert `i` in every layer.
    pub fn uniform(layers: usize, i: usize) -> Self {
        RoutingDecision {
            experts: vec![i; layers],
        }
    }

    pub fn check(&self, layers: usize, experts: usize) -> Result<()> {
        if self.experts.len() != layers {
            return Err(Error::invalid(format!(
                "routing decision covers {} layers, stack has {layers}",
                self.experts.len()
            )));
        }
        if let Some(&bad) = self.experts.iter().find(|&&e| e >= experts) {
            return Err(Error::Index {
                op: "routing",
                index: bad,
                len: experts,
            });
        }
        Ok(())
    }
}
