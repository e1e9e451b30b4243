use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Seeds};
use super::eval::{evaluate, expert_similarity, expert_wise_eval, harmonic_mean, Banks, EvalSettings, ExpertRow, SplitMetrics};
use super::train::{train, Prepared};
use crate::error::{Error, Result};
use crate::stack::derive_seed;
use crate::synthdata::{kshot_sample, mixed_bank, EncodedSet};

pub const CLOSE: &str = "close";
pub const ZEROSHOT: &str = "zeroshot";
pub const MIXED: &str = "mixed";
/// The mixed-bank split scored with modulation disabled, as a reference.
pub const MIXED_NO_TFM: &str = "mixed:tfm-off";

pub fn fewshot_split(k: usize) -> String {
    format!("fewshot:{k}")
}

/// Evaluation protocol names as used on the command line and in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Close,
    ZeroShot,
    Mixed,
    FewShot(usize),
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            CLOSE => Ok(Split::Close),
            ZEROSHOT => Ok(Split::ZeroShot),
            MIXED => Ok(Split::Mixed),
            _ => match s.strip_prefix("fewshot:").map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => Ok(Split::FewShot(k)),
                _ => Err(Error::Config(format!(
                    "unknown split '{s}' (expected close, zeroshot, mixed or fewshot:K)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Close => f.write_str(CLOSE),
            Split::ZeroShot => f.write_str(ZEROSHOT),
            Split::Mixed => f.write_str(MIXED),
            Split::FewShot(k) => write!(f, "{}", fewshot_split(*k)),
        }
    }
}

/// Inference settings implied by a checkpoint's config.
pub fn settings_for(config: &RunConfig) -> EvalSettings {
    EvalSettings {
        tfm: config.tfm.clone(),
        aggregation: config.eval.aggregation,
        temperature: config.train.temperature,
        seed: derive_seed(config.seeds.route, 0xE7A1, 0),
    }
}

/// Scores `checkpoint` on one protocol. Few-shot fine-tunes a copy of the
/// stack on `k` episodes per unseen class first.
pub fn evaluate_split(
    checkpoint: &Checkpoint,
    prepared: &Prepared,
    split: Split,
    settings: &EvalSettings,
) -> Result<SplitMetrics> {
    let data = &prepared.data;
    let ft = &data.bank_ft;
    let stack = &checkpoint.stack;
    match split {
        Split::Close => evaluate(stack, &prepared.close, Banks { fine_tuning: ft, eval: ft }, settings),
        Split::ZeroShot => {
            let banks = Banks {
                fine_tuning: ft,
                eval: &data.bank_test,
            };
            evaluate(stack, &prepared.zeroshot, banks, settings)
        }
        Split::Mixed => {
            let mixed = mixed_bank(ft, &data.bank_test)?;
            let set = prepared.zeroshot.retarget(&data.bank_test, &mixed)?;
            evaluate(stack, &set, Banks { fine_tuning: ft, eval: &mixed }, settings)
        }
        Split::FewShot(k) => {
            checkpoint.require_full("few-shot fine-tuning")?;
            let config = &checkpoint.config;
            let seed = derive_seed(config.seeds.data, 0xF5, k as u64);
            let episodes = kshot_sample(&data.unseen_train, k, seed)?;
            let set = EncodedSet::new(&data.encoder, &episodes, &data.bank_test)?;
            let tuned = train(config, &set, &data.bank_test, stack.clone(), None)?;
            let banks = Banks {
                fine_tuning: &data.bank_test,
                eval: &data.bank_test,
            };
            evaluate(&tuned.stack, &prepared.zeroshot, banks, settings)
        }
    }
}

/// Metrics of one checkpoint. Every number here is a deterministic function
/// of the config and seeds; timing lives in [`Timing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub run_id: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub splits: BTreeMap<String, SplitMetrics>,
    /// Splits whose top-1 enter `hm_zs`.
    pub zero_shot_splits: Vec<String>,
    /// Harmonic mean of the zero-shot top-1 numbers, when all are positive.
    pub hm_zs: Option<f64>,
    /// Harmonic mean of close-set top-1 and `hm_zs`.
    pub trade_off: Option<f64>,
    pub experts: Vec<ExpertRow>,
    /// Expert-pure stacks first, merged stack last.
    pub expert_similarity: Option<Vec<Vec<f64>>>,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Wall-clock of a run, kept apart from the report so reports stay
/// reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub run_id: String,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl EvalReport {
    pub fn top1(&self, split: &str) -> Option<f64> {
        self.splits.get(split).map(|m| m.top1)
    }

    /// Recomputes `hm_zs` and `trade_off` from the stored per-split numbers.
    pub fn recomputed_aggregates(&self) -> (Option<f64>, Option<f64>) {
        let zs: Option<Vec<f64>> = self.zero_shot_splits.iter().map(|s| self.top1(s)).collect();
        let hm_zs = zs.and_then(|v| harmonic_mean(&v).ok());
        let trade_off = match (self.top1(CLOSE), hm_zs) {
            (Some(c), Some(z)) => harmonic_mean(&[c, z]).ok(),
            _ => None,
        };
        (hm_zs, trade_off)
    }

    pub fn is_self_consistent(&self, tol: f64) -> bool {
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= tol,
            (None, None) => true,
            _ => false,
        };
        let (h, t) = self.recomputed_aggregates();
        close(h, self.hm_zs) && close(t, self.trade_off)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Content hash of a checkpoint, abbreviated like a commit id.
pub fn run_id(checkpoint: &Checkpoint) -> Result<String> {
    let digest = Sha256::digest(checkpoint.to_json()?.as_bytes());
    Ok(hex::encode(&digest[..6]))
}

/// Per-expert close-set and zero-shot rows plus the merged row. Needs the
/// expert weights, so deployed checkpoints are rejected.
pub fn expert_wise(checkpoint: &Checkpoint, prepared: &Prepared) -> Result<Vec<ExpertRow>> {
    checkpoint.require_full("expert-wise evaluation")?;
    expert_wise_eval(
        &checkpoint.stack,
        (&prepared.close, &prepared.data.bank_ft),
        (&prepared.zeroshot, &prepared.data.bank_test),
        checkpoint.config.train.temperature,
    )
}

/// Evaluates `checkpoint` on every configured split of `prepared`.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, prepared: &Prepared) -> Result<EvalReport> {
    let config = &checkpoint.config;
    let settings = settings_for(config);
    let stack = &checkpoint.stack;
    let mut splits = BTreeMap::new();
    let mut protocols = vec![Split::Close, Split::ZeroShot, Split::Mixed];
    // Few-shot tuning needs the experts, which deployed checkpoints dropped.
    if checkpoint.kind == super::CheckpointKind::Full {
        protocols.extend(config.eval.few_shot.iter().map(|&k| Split::FewShot(k)));
    }
    for split in protocols {
        splits.insert(split.to_string(), evaluate_split(checkpoint, prepared, split, &settings)?);
    }
    if settings.tfm.enabled {
        let mut off = settings.clone();
        off.tfm.enabled = false;
        splits.insert(MIXED_NO_TFM.to_string(), evaluate_split(checkpoint, prepared, Split::Mixed, &off)?);
    }

    let (experts, similarity) = if config.eval.expert_wise && checkpoint.kind == super::CheckpointKind::Full {
        (expert_wise(checkpoint, prepared)?, Some(expert_similarity(stack, &prepared.close)?))
    } else {
        (Vec::new(), None)
    };

    let mut report = EvalReport {
        run_id: run_id(checkpoint)?,
        config: config.clone(),
        seeds: config.seeds,
        splits,
        zero_shot_splits: vec![ZEROSHOT.to_string()],
        hm_zs: None,
        trade_off: None,
        experts,
        expert_similarity: similarity,
        steps: checkpoint.steps,
        epoch_losses: checkpoint.epoch_losses.clone(),
    };
    let (h, t) = report.recomputed_aggregates();
    report.hm_zs = h;
    report.trade_off = t;
    Ok(report)
}

/// Generates data, trains and evaluates one config.
pub fn run_experiment(config: &RunConfig, dump: Option<&Path>) -> Result<(Checkpoint, EvalReport, Timing)> {
    let prepared = Prepared::new(config)?;
    run_on(config, &prepared, dump)
}

/// Like [`run_experiment`] on already generated data.
pub fn run_on(config: &RunConfig, prepared: &Prepared, dump: Option<&Path>) -> Result<(Checkpoint, EvalReport, Timing)> {
    if prepared.data.spec != config.data || prepared.data.split.seed != config.seeds.data {
        return Err(Error::Config("prepared data does not match the config's data spec and seed".into()));
    }
    let start = std::time::Instant::now();
    let stack = super::init_stack(config)?;
    let ckpt = train(config, &prepared.train, &prepared.data.bank_ft, stack, dump)?;
    let trained = start.elapsed().as_secs_f64();
    let report = evaluate_checkpoint(&ckpt, prepared)?;
    let timing = Timing {
        run_id: report.run_id.clone(),
        train_seconds: trained,
        eval_seconds: start.elapsed().as_secs_f64() - trained,
    };
    Ok((ckpt, report, timing))
}

/// Plain-text view of a set of reports, one row each.
pub fn table(reports: &[(String, EvalReport)]) -> String {
    let mut out = format!(
        "{:<40} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "run", "close", "zs", "mixed", "mix-off", "hm_zs", "trade-off"
    );
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    for (name, r) in reports {
        out.push_str(&format!(
            "{:<40} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            name,
            cell(r.top1(CLOSE)),
            cell(r.top1(ZEROSHOT)),
            cell(r.top1(MIXED)),
            cell(r.top1(MIXED_NO_TFM)),
            cell(r.hm_zs),
            cell(r.trade_off),
        ));
    }
    out
}
