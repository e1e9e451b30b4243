use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{ExpertFfn, MoteLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Merge temperature. `Infinite` is a sentinel for uniform averaging, not a
/// large float.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau {
    Finite(f64),
    Infinite,
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Finite(t) => write!(f, "{t}"),
            Tau::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tau::Finite(t) => s.serialize_f64(*t),
            Tau::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) if t.is_finite() => Ok(Tau::Finite(t)),
            Raw::Text(s) if s == "inf" => Ok(Tau::Infinite),
            _ => Err(serde::de::Error::custom("tau must be a finite number or \"inf\"")),
        }
    }
}

/// Convex weights over `n` experts: `softmax(i / tau)` for `i = 1..=n`.
///
/// Logits are centred on `(n + 1) / 2` (softmax is shift invariant) so that
/// negating `tau` reverses the weights bit-for-bit.
pub fn merge_coefficients(n: usize, tau: Tau) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("merge over zero experts"));
    }
    let t = match tau {
        Tau::Infinite => return Ok(vec![1.0 / n as f64; n]),
        Tau::Finite(t) if t == 0.0 || !t.is_finite() => {
            return Err(Error::invalid(format!("merge temperature must be finite and nonzero, got {t}")))
        }
        Tau::Finite(t) => t,
    };
    let centre = (n as f64 + 1.0) / 2.0;
    let logits: Vec<f64> = (1..=n).map(|i| (i as f64 - centre) / t).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `Σ cᵢ·θᵢ` accumulated in expert order.
pub fn merge_with(layer: &MoteLayer, coefficients: &[f64]) -> Result<ExpertFfn> {
    if coefficients.len() != layer.experts.len() || coefficients.is_empty() {
        return Err(Error::invalid(format!(
            "{} coefficients for {} experts",
            coefficients.len(),
            layer.experts.len()
        )));
    }
    let first = &layer.experts[0];
    let mut out = ExpertFfn::zeros(first.w_up.shape()[0], first.w_up.shape()[1]);
    for (k, slot) in out.tensors_mut().into_iter().enumerate() {
        let mut acc: Option<Vec<f64>> = None;
        for (e, c) in layer.experts.iter().zip(coefficients) {
            let src = e.tensors()[k].data();
            match acc.as_mut() {
                None => acc = Some(src.iter().map(|v| v * c).collect()),
                Some(a) => a.iter_mut().zip(src).for_each(|(x, v)| *x += v * c),
            }
        }
        *slot = Tensor::new(slot.shape().to_vec(), acc.expect("nonempty"))?;
    }
    Ok(out)
}

/// Uniform average of a layer's experts.
pub fn merge_uniform(layer: &MoteLayer) -> Result<ExpertFfn> {
    let n = layer.experts.len();
    merge_with(layer, &vec![1.0 / n as f64; n])
}

/// Temperature-softened merge; `Tau::Infinite` equals [`merge_uniform`].
pub fn merge_soft(layer: &MoteLayer, tau: Tau) -> Result<ExpertFfn> {
    merge_with(layer, &merge_coefficients(layer.experts.len(), tau)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSampling {
    /// Uniform over `{±2ⁿβ : n = 0..4} ∪ {∞}`.
    Discrete,
    /// Standard normal draws.
    ContinuousNormal,
    /// Uniform over `[−16β, 16β]`.
    ContinuousUniform,
    /// Always `∞`: the merged point itself, no region.
    Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSchedule {
    pub beta: f64,
    pub sampling: TauSampling,
    /// Draw an independent τ for every layer instead of one per step.
    #[serde(default)]
    pub per_layer: bool,
}

/// Continuous draws closer than this to zero are rejected and redrawn.
const TAU_ZERO_GUARD: f64 = 1e-6;

impl Default for MergeSchedule {
    fn default() -> Self {
        MergeSchedule {
            beta: 0.6,
            sampling: TauSampling::Discrete,
            per_layer: false,
        }
    }
}

impl MergeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// The eleven discrete candidates, positive powers first, `∞` last.
    pub fn candidates(&self) -> Vec<Tau> {
        let mut out: Vec<Tau> = (0..5).map(|n| Tau::Finite(self.beta * f64::from(1 << n))).collect();
        out.extend((0..5).map(|n| Tau::Finite(-self.beta * f64::from(1 << n))));
        out.push(Tau::Infinite);
        out
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Tau {
        match self.sampling {
            TauSampling::Point => Tau::Infinite,
            TauSampling::Discrete => {
                let c = self.candidates();
                c[rng.gen_range(0..c.len())]
            }
            TauSampling::ContinuousNormal => loop {
                let t: f64 = StandardNormal.sample(rng);
                if t.abs() > TAU_ZERO_GUARD {
                    return Tau::Finite(t);
                }
            },
            TauSampling::ContinuousUniform => {
                let hi = 16.0 * self.beta;
                loop {
                    let t = rng.gen_range(-hi..=hi);
                    if t.abs() > TAU_ZERO_GUARD {
                        return Tau::Finite(t);
                    }
                }
            }
        }
    }

    /// One τ per layer: a single shared draw unless `per_layer` is set.
    pub fn sample_layers(&self, layers: usize, rng: &mut impl Rng) -> Vec<Tau> {
        if self.per_layer {
            (0..layers).map(|_| self.sample(rng)).collect()
        } else {
            vec![self.sample(rng); layers]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::{InitPolicy, MoteStack, StackDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(experts: usize) -> MoteLayer {
        let dims = StackDims {
            dim: 4,
            hidden: 6,
            layers: 1,
            experts,
            heads: 1,
            max_frames: 3,
        };
        MoteStack::init(dims, InitPolicy::Different, 3).unwrap().layers.remove(0)
    }

    #[test]
    fn infinite_tau_is_uniform() {
        assert_eq!(merge_coefficients(4, Tau::Infinite).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn finite_tau_matches_direct_softmax() {
        let c = merge_coefficients(4, Tau::Finite(0.6)).unwrap();
        let expected = [0.0055, 0.0290, 0.1534, 0.8122];
        for (a, b) in c.iter().zip(expected) {
            assert!((a - b).abs() < 5e-5, "{a} vs {b}");
        }
        let rev = merge_coefficients(4, Tau::Finite(-0.6)).unwrap();
        let mut back = rev.clone();
        back.reverse();
        assert_eq!(back, c);
    }

    #[test]
    fn zero_tau_rejected() {
        assert!(merge_coefficients(3, Tau::Finite(0.0)).is_err());
        assert!(merge_soft(&layer(2), Tau::Finite(0.0)).is_err());
    }

    #[test]
    fn uniform_merge_examples() {
        let mut l = layer(2);
        l.experts[1] = l.experts[0].clone();
        assert_eq!(merge_uniform(&l).unwrap().w_up, l.experts[0].w_up);

        let mut l = layer(2);
        let neg: Vec<f64> = l.experts[0].w_up.data().iter().map(|v| -v).collect();
        l.experts[1].w_up = Tensor::new(l.experts[0].w_up.shape().to_vec(), neg).unwrap();
        assert!(merge_uniform(&l).unwrap().w_up.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn soft_merge_at_infinity_is_uniform_merge() {
        let l = layer(4);
        assert_eq!(merge_soft(&l, Tau::Infinite).unwrap(), merge_uniform(&l).unwrap());
    }

    #[test]
    fn candidate_set_for_default_beta() {
        let s = MergeSchedule::default();
        let c = s.candidates();
        assert_eq!(c.len(), 11);
        let finite: Vec<f64> = c
            .iter()
            .filter_map(|t| match t {
                Tau::Finite(v) => Some(*v),
                Tau::Infinite => None,
            })
            .collect();
        let expected = [0.6, 1.2, 2.4, 4.8, 9.6, -0.6, -1.2, -2.4, -4.8, -9.6];
        for (a, b) in finite.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c[10], Tau::Infinite);
    }

    #[test]
    fn point_schedule_always_infinite() {
        let s = MergeSchedule {
            sampling: TauSampling::Point,
            ..MergeSchedule::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| s.sample(&mut rng) == Tau::Infinite));
    }

    #[test]
    fn continuous_draws_avoid_zero_and_respect_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = MergeSchedule {
            sampling: TauSampling::ContinuousUniform,
            ..MergeSchedule::default()
        };
        for _ in 0..1000 {
            match u.sample(&mut rng) {
                Tau::Finite(t) => assert!(t.abs() > 1e-6 && t.abs() <= 9.6 + 1e-12),
                Tau::Infinite => panic!("continuous schedule produced inf"),
            }
        }
    }

    #[test]
    fn per_layer_flag_controls_sharing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shared = MergeSchedule::default().sample_layers(6, &mut rng);
        assert!(shared.windows(2).all(|w| w[0] == w[1]));
        let per = MergeSchedule {
            per_layer: true,
            ..MergeSchedule::default()
        };
        let draws: Vec<Vec<Tau>> = (0..20).map(|_| per.sample_layers(6, &mut rng)).collect();
        assert!(draws.iter().any(|d| d.windows(2).any(|w| w[0] != w[1])));
    }

    #[test]
    fn tau_serde() {
        assert_eq!(serde_json::to_string(&Tau::Infinite).unwrap(), "\"inf\"");
        let t: Tau = serde_json::from_str("-1.2").unwrap();
        assert_eq!(t, Tau::Finite(-1.2));
        assert!(serde_json::from_str::<Tau>("\"big\"").is_err());
    }
}
