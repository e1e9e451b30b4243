use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{LossWeights, WmrVariant};
use crate::stack::{InitPolicy, MergeSchedule, RoutingPolicy, StackDims};
use crate::synthdata::DatasetSpec;
use crate::tfm::TfmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Expert hidden width `H`.
    pub hidden: usize,
    /// Temporal layers `L`.
    pub layers: usize,
    /// Experts per layer `N`.
    pub experts: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            layers: 2,
            experts: 4,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub eta: f64,
    pub wmr_variant: WmrVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            lambda: w.lambda,
            eta: w.eta,
            wmr_variant: WmrVariant::CrossEntropy,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            eta: self.eta,
        }
    }
}

/// AdamW with linear warmup then half-period cosine decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warmup length as a fraction of all steps, unless `warmup_steps` is set.
    pub warmup_fraction: f64,
    pub warmup_steps: Option<usize>,
    /// Cosine horizon; defaults to the total step count.
    pub decay_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-3,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.05,
            warmup_steps: None,
            decay_steps: None,
        }
    }
}

/// Which samples each expert trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataPolicy {
    /// One routed expert per layer per batch.
    #[default]
    Routed,
    /// Every expert sees every batch; the task loss averages the expert-pure passes.
    AllExperts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// The reference recipe uses 144; 32 suits single-core runs.
    pub batch_size: usize,
    pub epochs: usize,
    /// Similarity-logit temperature.
    pub temperature: f64,
    pub routing: RoutingPolicy,
    pub init: InitPolicy,
    pub data_policy: DataPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 12,
            temperature: 0.07,
            routing: RoutingPolicy::Multinomial,
            init: InitPolicy::Different,
            data_policy: DataPolicy::Routed,
        }
    }
}

/// How the experts are combined at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Uniformly merged weights (one FFN per layer).
    #[default]
    Merge,
    /// Mean of the expert-pure stacks' logits.
    Ensemble,
    /// A uniformly random expert per layer per input.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
    /// Episodes per class for the few-shot protocol; empty disables it.
    pub few_shot: Vec<usize>,
    /// Also score each expert-pure stack and the expert similarity matrix.
    pub expert_wise: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            aggregation: Aggregation::Merge,
            few_shot: Vec::new(),
            expert_wise: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Dataset generation and batch order.
    pub data: u64,
    /// Parameter initialization.
    pub init: u64,
    /// Expert routing and merge temperatures.
    pub route: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 0,
            init: 1,
            route: 2,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub merge: MergeSchedule,
    pub loss: LossConfig,
    pub tfm: TfmConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

impl RunConfig {
    /// Temporal stack shape implied by the model and data settings.
    pub fn dims(&self) -> StackDims {
        StackDims {
            dim: self.data.dim,
            hidden: self.model.hidden,
            layers: self.model.layers,
            experts: self.model.experts,
            heads: self.model.heads,
            max_frames: self.data.frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.dims().validate()?;
        self.merge.validate()?;
        self.loss.weights().validate()?;
        self.tfm.validate()?;
        let o = &self.optim;
        let fail = |m: String| Err(Error::Config(m));
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return fail(format!("optim.lr must be positive, got {}", o.lr));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return fail(format!("optim.weight_decay must be non-negative, got {}", o.weight_decay));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return fail(format!("optim betas must lie in [0, 1), got {} and {}", o.beta1, o.beta2));
        }
        if !(o.eps > 0.0) {
            return fail(format!("optim.eps must be positive, got {}", o.eps));
        }
        if !(0.0..=1.0).contains(&o.warmup_fraction) {
            return fail(format!("optim.warmup_fraction must be in [0, 1], got {}", o.warmup_fraction));
        }
        if o.decay_steps == Some(0) {
            return fail("optim.decay_steps must be positive".into());
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if !(self.train.temperature > 0.0 && self.train.temperature.is_finite()) {
            return fail(format!("train.temperature must be positive, got {}", self.train.temperature));
        }
        if let Some(&k) = self.eval.few_shot.iter().find(|&&k| k == 0 || k > self.data.train_per_class) {
            return fail(format!(
                "eval.few_shot entry {k} outside 1..={}",
                self.data.train_per_class
            ));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The single-FFN baseline: one expert, no merge or consistency terms.
    pub fn baseline(&self) -> RunConfig {
        let mut c = self.clone();
        c.model.experts = 1;
        c.loss.lambda = 0.0;
        c.loss.eta = 0.0;
        c
    }

    /// Experts without the merge regularizer or consistency term.
    pub fn experts_only(&self) -> RunConfig {
        let mut c = self.clone();
        c.loss.lambda = 0.0;
        c.loss.eta = 0.0;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("[model]\nexperts = 6\n[train]\nrouting = \"fixed\"\n").unwrap();
        assert_eq!(c.model.experts, 6);
        assert_eq!(c.train.routing, RoutingPolicy::Fixed);
        assert_eq!(c.optim, OptimConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for bad in [
            "[model]\nexpert = 4\n",
            "colour = 1\n",
            "[loss]\nlambda = -1.0\n",
            "[merge]\nbeta = 0.0\n",
            "[tfm]\ngamma = 0.0\n",
            "[model]\nheads = 5\n",
            "[train]\nrouting = \"top-k\"\n",
            "[optim]\nbeta1 = 1.0\n",
            "[eval]\nfew_shot = [0]\n",
        ] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn baseline_is_single_expert_without_regularizers() {
        let b = RunConfig::default().baseline();
        assert_eq!(b.model.experts, 1);
        assert_eq!(b.loss.weights(), LossWeights { lambda: 0.0, eta: 0.0 });
    }
}
