//! Training losses: routed task loss, weight-merging regularizer, and the
//! spatial-consistency penalty, plus their weighted sum.
//!
//! Reductions: cross-entropy is averaged over the batch; the consistency
//! penalty sums squared differences over feature dims and averages over the
//! batch.

use serde::{Deserialize, Serialize};

use crate::backbone::similarity_logits_var;
use crate::error::{Error, Result};
use crate::stack::{RoutingDecision, StackVars, Tau};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the merge regularizer.
    pub lambda: f64,
    /// Weight of the spatial-consistency penalty.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.5, eta: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.eta >= 0.0 && self.lambda.is_finite() && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: lambda={} eta={}",
                self.lambda, self.eta
            )));
        }
        Ok(())
    }

    /// Whether the merged-path forward contributes anything.
    pub fn needs_merged_path(&self) -> bool {
        self.lambda > 0.0 || self.eta > 0.0
    }
}

/// Supervision used by the merge regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WmrVariant {
    /// Ground-truth labels.
    #[default]
    CrossEntropy,
    /// KL from the routed path's class distribution (detached).
    Kl,
    /// Squared error to the routed path's video feature (detached).
    Mse,
}

/// Values computed by the routed pass that the regularizer may reuse.
#[derive(Clone, Copy, Debug)]
pub struct RoutedPass {
    pub loss: Var,
    /// `[B, D]` video features.
    pub z: Var,
    /// `[B, C]` similarity logits.
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MergedPass {
    pub loss: Var,
    /// `[B, D]` merged-path video features.
    pub z: Var,
}

/// One training batch bound to a tape.
pub struct LossContext<'a> {
    pub tape: &'a Tape,
    pub stack: &'a StackVars,
    /// `[B, T, D]` frozen frame embeddings.
    pub frames: Var,
    /// `[B, D]` frame-mean of `frames`.
    pub pooled: Var,
    /// Bank index of each sample's class.
    pub targets: &'a [usize],
    /// `[D, C]` fine-tuning bank.
    pub bank_t: Var,
    pub temperature: f64,
}

impl<'a> LossContext<'a> {
    /// Binds `frames: [B, T, D]` and the bank on `tape` as constants.
    pub fn new(
        tape: &'a Tape,
        stack: &'a StackVars,
        frames: Tensor,
        targets: &'a [usize],
        bank_t: Tensor,
        temperature: f64,
    ) -> Result<Self> {
        let c = bank_t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "targets",
                index: bad,
                len: c,
            });
        }
        if frames.ndim() != 3 || frames.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "loss_context",
                lhs: frames.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let frames = tape.constant(frames);
        let pooled = tape.mean(frames, 1)?;
        let bank_t = tape.constant(bank_t);
        Ok(LossContext {
            tape,
            stack,
            frames,
            pooled,
            targets,
            bank_t,
            temperature,
        })
    }

    fn classify(&self, temporal: Var) -> Result<(Var, Var, Var)> {
        let z = StackVars::video_embedding(self.tape, self.frames, temporal)?;
        let logits = similarity_logits_var(self.tape, z, self.bank_t, self.temperature)?;
        let loss = self.tape.cross_entropy(logits, self.targets)?;
        Ok((loss, z, logits))
    }

    /// Task loss through the routed experts.
    pub fn loss_te(&self, decision: &RoutingDecision) -> Result<RoutedPass> {
        let h = self.stack.forward_routed(self.tape, self.frames, decision)?;
        let (loss, z, logits) = self.classify(h)?;
        Ok(RoutedPass { loss, z, logits })
    }

    /// Task loss averaged over the `N` expert-pure passes (every expert sees
    /// every sample).
    pub fn loss_te_all_experts(&self) -> Result<RoutedPass> {
        let n = self.stack.num_experts();
        let mut passes = Vec::with_capacity(n);
        for i in 0..n {
            let h = self.stack.forward_expert(self.tape, self.frames, i)?;
            passes.push(self.classify(h)?);
        }
        let mut loss = passes[0].0;
        for p in &passes[1..] {
            loss = self.tape.add(loss, p.0)?;
        }
        let loss = self.tape.scale(loss, 1.0 / n as f64);
        Ok(RoutedPass {
            loss,
            z: passes[n - 1].1,
            logits: passes[n - 1].2,
        })
    }

    /// Merge regularizer at temperature(s) `taus`, one per layer.
    pub fn loss_wmr(&self, taus: &[Tau], variant: WmrVariant, routed: &RoutedPass) -> Result<MergedPass> {
        let tape = self.tape;
        let h = self.stack.forward_merged(tape, self.frames, taus)?;
        let z = StackVars::video_embedding(tape, self.frames, h)?;
        let loss = match variant {
            WmrVariant::CrossEntropy => {
                let logits = similarity_logits_var(tape, z, self.bank_t, self.temperature)?;
                tape.cross_entropy(logits, self.targets)?
            }
            WmrVariant::Kl => {
                let logits = similarity_logits_var(tape, z, self.bank_t, self.temperature)?;
                kl_to_target(tape, logits, routed.logits)?
            }
            WmrVariant::Mse => {
                let target = tape.detach(routed.z);
                tape.mse(z, target)?
            }
        };
        Ok(MergedPass { loss, z })
    }

    /// Spatial-consistency penalty between merged-path features and the
    /// pooled frozen features.
    pub fn loss_mse(&self, z_r: Var) -> Result<Var> {
        loss_mse(self.tape, z_r, self.pooled)
    }
}

/// `mean_b KL(softmax(target_b) ‖ softmax(logits_b))` with `target` detached.
pub fn kl_to_target(tape: &Tape, logits: Var, target_logits: Var) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape != tape.shape(target_logits) {
        return Err(Error::Shape {
            op: "kl",
            lhs: shape,
            rhs: tape.shape(target_logits),
        });
    }
    let rows = if shape.len() == 2 { shape[0] } else { 1 };
    let target = tape.detach(target_logits);
    let log_p = tape.value(tape.log_softmax(target)).clone();
    let p: Vec<f64> = log_p.data().iter().map(|v| v.exp()).collect();
    let entropy_term: f64 = p.iter().zip(log_p.data()).map(|(a, b)| a * b).sum();
    let p = tape.constant(Tensor::new(shape, p)?);
    let log_q = tape.log_softmax(logits);
    let cross = tape.sum(tape.mul(p, log_q)?);
    let k = tape.constant(Tensor::scalar(entropy_term));
    let total = tape.sub(k, cross)?;
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// `mean_b ‖z_r,b − e_b‖²` over `[B, D]` inputs.
pub fn loss_mse(tape: &Tape, z_r: Var, pooled: Var) -> Result<Var> {
    let shape = tape.shape(z_r);
    let rows = if shape.len() == 2 { shape[0] } else { 1 };
    let d = tape.sub(z_r, pooled)?;
    let sq = tape.sum(tape.mul(d, d)?);
    Ok(tape.scale(sq, 1.0 / rows as f64))
}

/// `te + λ·wmr + η·mse`; any non-finite input is a divergence.
pub fn loss_all(tape: &Tape, te: Var, wmr: Option<Var>, mse: Option<Var>, w: &LossWeights) -> Result<Var> {
    let check = |name: &str, v: Var| -> Result<()> {
        let x = tape.value(v).item();
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence(format!("{name} loss is {x}")))
        }
    };
    check("task", te)?;
    let mut total = te;
    if let Some(v) = wmr {
        check("merge-regularization", v)?;
        total = tape.add(total, tape.scale(v, w.lambda))?;
    }
    if let Some(v) = mse {
        check("consistency", v)?;
        total = tape.add(total, tape.scale(v, w.eta))?;
    }
    Ok(total)
}
