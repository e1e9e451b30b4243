//! Mixture-of-temporal-experts stack.
//!
//! `L` pre-norm Transformer layers over frame embeddings. Each layer owns one
//! set of attention parameters and `N` interchangeable feed-forward experts.
//! Training activates one expert per layer per batch; inference collapses the
//! experts into a single feed-forward network by weight merging.

mod forward;
mod merge;
mod routing;

pub use forward::{video_embedding, FfnVars, LayerVars, StackVars};
pub use merge::{merge_coefficients, merge_soft, merge_uniform, merge_with, MergeSchedule, Tau, TauSampling};
pub use routing::{route, routing_probabilities, RoutingDecision, RoutingPolicy};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::gaussian_vec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Projection matrices start from Normal(0, INIT_STD); biases at zero.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackDims {
    /// Embedding width `D`.
    pub dim: usize,
    /// Expert hidden width `H`.
    pub hidden: usize,
    pub layers: usize,
    pub experts: usize,
    pub heads: usize,
    /// Length of the learned positional table; inputs may be shorter.
    pub max_frames: usize,
}

impl StackDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.hidden == 0 || self.max_frames == 0 {
            return bad(format!("dims must be positive: {self:?}"));
        }
        if self.layers == 0 {
            return bad("need at least one temporal layer".into());
        }
        if self.experts == 0 {
            return bad("need at least one expert per layer".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible into {} heads", self.dim, self.heads));
        }
        Ok(())
    }
}

/// Whether experts in one layer start from the same random draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    Same,
    Different,
}

/// Shared (non-expert) parameters of one layer, including the norm that
/// precedes the expert FFN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ffn_ln_gain: Tensor,
    pub ffn_ln_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFfn {
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_dn: Tensor,
    pub b_dn: Tensor,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoteLayer {
    pub attention: AttentionParams,
    pub experts: Vec<ExpertFfn>,
    pub layer_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoteStack {
    pub dims: StackDims,
    /// `[max_frames, D]`.
    pub pos_emb: Tensor,
    pub layers: Vec<MoteLayer>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(rng, n, INIT_STD)).expect("shape")
}

/// Stable per-purpose seed derivation (splitmix64 finalizer).
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExpertFfn {
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExpertFfn {
            w_up: normal(&mut rng, &[dim, hidden]),
            b_up: Tensor::zeros(&[hidden]),
            w_dn: normal(&mut rng, &[hidden, dim]),
            b_dn: Tensor::zeros(&[dim]),
            init_seed: seed,
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        ExpertFfn {
            w_up: Tensor::zeros(&[dim, hidden]),
            b_up: Tensor::zeros(&[hidden]),
            w_dn: Tensor::zeros(&[hidden, dim]),
            b_dn: Tensor::zeros(&[dim]),
            init_seed: 0,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_up, &self.b_up, &self.w_dn, &self.b_dn]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_up, &mut self.b_up, &mut self.w_dn, &mut self.b_dn]
    }
}

impl AttentionParams {
    fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            ln_gain: Tensor::full(&[dim], 1.0),
            ln_bias: Tensor::zeros(&[dim]),
            w_q: normal(rng, &[dim, dim]),
            w_k: normal(rng, &[dim, dim]),
            w_v: normal(rng, &[dim, dim]),
            b_q: Tensor::zeros(&[dim]),
            b_k: Tensor::zeros(&[dim]),
            b_v: Tensor::zeros(&[dim]),
            w_out: normal(rng, &[dim, dim]),
            b_out: Tensor::zeros(&[dim]),
            ffn_ln_gain: Tensor::full(&[dim], 1.0),
            ffn_ln_bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln_gain,
            &self.ln_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.b_q,
            &self.b_k,
            &self.b_v,
            &self.w_out,
            &self.b_out,
            &self.ffn_ln_gain,
            &self.ffn_ln_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.b_q,
            &mut self.b_k,
            &mut self.b_v,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ffn_ln_gain,
            &mut self.ffn_ln_bias,
        ]
    }
}

impl MoteStack {
    pub fn init(dims: StackDims, init: InitPolicy, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
        let pos_emb = normal(&mut rng, &[dims.max_frames, dims.dim]);
        let layers = (0..dims.layers)
            .map(|l| {
                let attention = AttentionParams::init(dims.dim, &mut rng);
                let experts = (0..dims.experts)
                    .map(|i| {
                        let tag = match init {
                            InitPolicy::Same => 0,
                            InitPolicy::Different => i as u64 + 1,
                        };
                        ExpertFfn::init(dims.dim, dims.hidden, derive_seed(seed, l as u64 + 1, tag))
                    })
                    .collect();
                MoteLayer {
                    attention,
                    experts,
                    layer_index: l,
                }
            })
            .collect();
        Ok(MoteStack { dims, pos_emb, layers })
    }

    /// Same structure, every parameter zero. Used for gradient and moment buffers.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn num_experts(&self) -> usize {
        self.dims.experts
    }

    /// All trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.attention.tensors());
            for e in &layer.experts {
                out.extend(e.tensors());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.attention.tensors_mut());
            for e in &mut layer.experts {
                out.extend(e.tensors_mut());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Deployable single-FFN stack: every layer's experts merged with `tau`.
    pub fn merged(&self, tau: Tau) -> Result<MoteStack> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(MoteLayer {
                    attention: l.attention.clone(),
                    experts: vec![merge_soft(l, tau)?],
                    layer_index: l.layer_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoteStack {
            dims: StackDims { experts: 1, ..self.dims },
            pos_emb: self.pos_emb.clone(),
            layers,
        })
    }

    /// Stack whose every layer keeps only expert `i`.
    pub fn single_expert(&self, i: usize) -> Result<MoteStack> {
        if i >= self.dims.experts {
            return Err(Error::Index {
                op: "single_expert",
                index: i,
                len: self.dims.experts,
            });
        }
        let mut s = self.clone();
        for l in &mut s.layers {
            let e = l.experts.swap_remove(i);
            l.experts = vec![e];
        }
        s.dims.experts = 1;
        Ok(s)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Verifies that every tensor has the shape `dims` implies. Stacks read
    /// from disk must pass this before use.
    pub fn check_structure(&self) -> Result<()> {
        self.dims.validate()?;
        let StackDims {
            dim: d,
            hidden: h,
            layers,
            experts,
            max_frames,
            ..
        } = self.dims;
        let expect = |what: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
        };
        expect("pos_emb", &self.pos_emb, &[max_frames, d])?;
        if self.layers.len() != layers {
            return Err(Error::invalid(format!("{} layers stored, dims say {layers}", self.layers.len())));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let a = &layer.attention;
            for (t, mat) in a.tensors().into_iter().zip([0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 0, 0]) {
                let shape: &[usize] = if mat == 1 { &[d, d] } else { &[d] };
                expect(&format!("layer {l} attention"), t, shape)?;
            }
            if layer.experts.len() != experts {
                return Err(Error::invalid(format!(
                    "layer {l} stores {} experts, dims say {experts}",
                    layer.experts.len()
                )));
            }
            for e in &layer.experts {
                expect(&format!("layer {l} w_up"), &e.w_up, &[d, h])?;
                expect(&format!("layer {l} b_up"), &e.b_up, &[h])?;
                expect(&format!("layer {l} w_dn"), &e.w_dn, &[h, d])?;
                expect(&format!("layer {l} b_dn"), &e.b_dn, &[d])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dims(experts: usize) -> StackDims {
        StackDims {
            dim: 8,
            hidden: 12,
            layers: 2,
            experts,
            heads: 2,
            max_frames: 4,
        }
    }

    #[test]
    fn structure_check_catches_bad_shapes() {
        let s = MoteStack::init(dims(2), InitPolicy::Different, 1).unwrap();
        assert!(s.check_structure().is_ok());
        let mut bad = s.clone();
        bad.layers[1].experts[0].b_dn = Tensor::zeros(&[3]);
        assert!(bad.check_structure().is_err());
        let mut bad = s;
        bad.layers[0].experts.pop();
        assert!(bad.check_structure().is_err());
    }

    #[test]
    fn init_is_reproducible_and_policy_aware() {
        let a = MoteStack::init(dims(3), InitPolicy::Different, 5).unwrap();
        assert_eq!(a, MoteStack::init(dims(3), InitPolicy::Different, 5).unwrap());
        let l = &a.layers[0];
        assert_ne!(l.experts[0].w_up, l.experts[1].w_up);
        assert_ne!(a.layers[0].experts[0].w_up, a.layers[1].experts[0].w_up);
        let s = MoteStack::init(dims(3), InitPolicy::Same, 5).unwrap();
        assert_eq!(s.layers[1].experts[0], s.layers[1].experts[2]);
        assert_eq!(s.layers[1].attention, a.layers[1].attention);
    }

    #[test]
    fn init_statistics_follow_normal_002() {
        let s = MoteStack::init(
            StackDims {
                dim: 32,
                hidden: 64,
                layers: 1,
                experts: 1,
                heads: 4,
                max_frames: 8,
            },
            InitPolicy::Different,
            1,
        )
        .unwrap();
        let w = s.layers[0].experts[0].w_up.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.002 && (std - 0.02).abs() < 0.002, "{mean} {std}");
        assert!(s.layers[0].experts[0].b_up.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn merged_stack_has_single_ffn_parameter_count() {
        let four = MoteStack::init(dims(4), InitPolicy::Different, 2).unwrap();
        let one = MoteStack::init(dims(1), InitPolicy::Different, 2).unwrap();
        let merged = four.merged(Tau::Infinite).unwrap();
        assert_eq!(merged.param_count(), one.param_count());
        assert_eq!(merged.dims, one.dims);
        assert!(four.param_count() > one.param_count());
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(MoteStack::init(dims(0), InitPolicy::Same, 0).is_err());
        let mut d = dims(2);
        d.heads = 3;
        assert!(matches!(MoteStack::init(d, InitPolicy::Same, 0), Err(Error::Config(_))));
    }
}
