use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::stack::{MoteStack, Tau};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// All experts kept; supports expert-wise analysis and further training.
    Full,
    /// Experts merged into one FFN per layer; inference only.
    Deployed,
}

/// Position of a seeded ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngStates {
    pub shuffle: RngState,
    pub route: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub stack: MoteStack,
    pub steps: usize,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub rng: RngStates,
}

impl Checkpoint {
    /// The inference-only form: every layer's experts uniformly merged.
    pub fn deployed(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CheckpointKind::Deployed,
            stack: self.stack.merged(Tau::Infinite)?,
            ..self.clone()
        })
    }

    pub fn require_full(&self, what: &str) -> Result<()> {
        match self.kind {
            CheckpointKind::Full => Ok(()),
            CheckpointKind::Deployed => Err(Error::invalid(format!(
                "{what} needs the per-expert weights; this is a merged-only checkpoint"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.config.validate()?;
        self.stack.check_structure()?;
        let dims = self.config.dims();
        let expected_experts = match self.kind {
            CheckpointKind::Full => dims.experts,
            CheckpointKind::Deployed => 1,
        };
        if self.stack.dims != (crate::stack::StackDims { experts: expected_experts, ..dims }) {
            return Err(Error::invalid(format!(
                "stack dims {:?} disagree with the config",
                self.stack.dims
            )));
        }
        if !self.stack.is_finite() {
            return Err(Error::invalid("checkpoint holds non-finite parameters"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
