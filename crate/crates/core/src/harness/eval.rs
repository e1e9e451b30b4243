use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Aggregation;
use crate::backbone::{pooled_spatial, similarity_logits, EmbeddingBank};
use crate::error::{Error, Result};
use crate::stack::{MoteStack, RoutingDecision, Tau};
use crate::synthdata::EncodedSet;
use crate::tensor::{cosine, Tensor};
use crate::tfm::{modulated_embedding, TfmConfig};

/// Samples per forward call during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMetrics {
    /// Percent.
    pub top1: f64,
    /// Percent.
    pub top5: f64,
    pub samples: usize,
}

/// The banks a split is scored against. `targets` of the evaluated set index
/// `eval`.
#[derive(Clone, Copy, Debug)]
pub struct Banks<'a> {
    pub fine_tuning: &'a EmbeddingBank,
    pub eval: &'a EmbeddingBank,
}

/// Inference settings shared by every split of one evaluation.
#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub tfm: TfmConfig,
    pub aggregation: Aggregation,
    pub temperature: f64,
    /// Seeds the random-routing aggregation.
    pub seed: u64,
}

/// Frame-mean of every sample's frozen embeddings.
pub fn pooled_frames(set: &EncodedSet) -> Result<Vec<Vec<f64>>> {
    set.frames.iter().map(|f| Ok(pooled_spatial(f)?.into_data())).collect()
}

/// Frame-mean temporal feature of every sample through `stack` under a fixed
/// routing `decision`.
pub fn pooled_temporal(stack: &MoteStack, set: &EncodedSet, decision: &RoutingDecision) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let (frames, _) = set.batch(idx)?;
        let h = stack.forward_routed(&frames, decision)?;
        let (b, t, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let h = h.reshape(&[b * t, d])?;
        for i in 0..b {
            let rows = Tensor::new(vec![t, d], h.data()[i * t * d..(i + 1) * t * d].to_vec())?;
            out.push(pooled_spatial(&rows)?.into_data());
        }
    }
    Ok(out)
}

fn deployable(stack: &MoteStack) -> Result<MoteStack> {
    if stack.dims.experts == 1 {
        Ok(stack.clone())
    } else {
        stack.merged(Tau::Infinite)
    }
}

/// Similarity logits `[C]` per sample under the chosen aggregation.
pub fn logits(stack: &MoteStack, set: &EncodedSet, banks: Banks<'_>, s: &EvalSettings) -> Result<Vec<Vec<f64>>> {
    let e = pooled_frames(set)?;
    let rho = e
        .iter()
        .map(|e| s.tfm.rho(e, banks.fine_tuning, banks.eval))
        .collect::<Result<Vec<f64>>>()?;
    let score = |t: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        e.iter()
            .zip(t)
            .zip(&rho)
            .map(|((e, t), &r)| {
                let z = modulated_embedding(e, t, r)?;
                Ok(similarity_logits(&z, banks.eval, s.temperature)?.into_data())
            })
            .collect()
    };
    let layers = stack.dims.layers;
    match s.aggregation {
        Aggregation::Merge => {
            let merged = deployable(stack)?;
            score(&pooled_temporal(&merged, set, &RoutingDecision::uniform(layers, 0))?)
        }
        Aggregation::Ensemble => {
            let n = stack.dims.experts;
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for i in 0..n {
                let l = score(&pooled_temporal(stack, set, &RoutingDecision::uniform(layers, i))?)?;
                acc = Some(match acc {
                    None => l,
                    Some(mut a) => {
                        a.iter_mut().flatten().zip(l.iter().flatten()).for_each(|(x, y)| *x += y);
                        a
                    }
                });
            }
            let mut a = acc.expect("at least one expert");
            a.iter_mut().flatten().for_each(|x| *x /= n as f64);
            Ok(a)
        }
        Aggregation::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let n = stack.dims.experts;
            let mut t = Vec::with_capacity(set.len());
            for i in 0..set.len() {
                let decision = RoutingDecision {
                    experts: (0..layers).map(|_| rng.gen_range(0..n)).collect(),
                };
                let one = EncodedSet {
                    frames: vec![set.frames[i].clone()],
                    targets: vec![set.targets[i]],
                };
                t.extend(pooled_temporal(stack, &one, &decision)?);
            }
            score(&t)
        }
    }
}

/// 0-based rank of `target`: classes scoring strictly higher, plus equal
/// scores at lower indices.
pub fn rank_of(logits: &[f64], target: usize) -> usize {
    let v = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > v || (l == v && j < target))
        .count()
}

/// Arg-max with ties to the lower index.
pub fn predict(logits: &[f64]) -> usize {
    (0..logits.len()).find(|&j| rank_of(logits, j) == 0).unwrap_or(0)
}

pub fn metrics_from_logits(logits: &[Vec<f64>], targets: &[usize]) -> Result<SplitMetrics> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let (mut top1, mut top5) = (0usize, 0usize);
    for (l, &t) in logits.iter().zip(targets) {
        if t >= l.len() {
            return Err(Error::Index {
                op: "metrics",
                index: t,
                len: l.len(),
            });
        }
        let r = rank_of(l, t);
        top1 += usize::from(r == 0);
        top5 += usize::from(r < 5);
    }
    let n = targets.len() as f64;
    Ok(SplitMetrics {
        top1: 100.0 * top1 as f64 / n,
        top5: 100.0 * top5 as f64 / n,
        samples: targets.len(),
    })
}

/// Top-1/top-5 of `stack` on `set`.
pub fn evaluate(stack: &MoteStack, set: &EncodedSet, banks: Banks<'_>, s: &EvalSettings) -> Result<SplitMetrics> {
    if let Some(&bad) = set.targets.iter().find(|&&t| t >= banks.eval.len()) {
        return Err(Error::Index {
            op: "evaluate",
            index: bad,
            len: banks.eval.len(),
        });
    }
    metrics_from_logits(&logits(stack, set, banks, s)?, &set.targets)
}

/// `n / Σ 1/vᵢ` over strictly positive values.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("harmonic mean of nothing"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("harmonic mean needs positive values, got {v}")));
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// Video features `e + t` of `set` under the merged stack and every
/// expert-pure stack; index `N` is the merged one.
fn variant_features(stack: &MoteStack, set: &EncodedSet) -> Result<Vec<Vec<Vec<f64>>>> {
    let e = pooled_frames(set)?;
    let layers = stack.dims.layers;
    let mut decisions: Vec<(MoteStack, RoutingDecision)> = (0..stack.dims.experts)
        .map(|i| (stack.clone(), RoutingDecision::uniform(layers, i)))
        .collect();
    decisions.push((stack.merged(Tau::Infinite)?, RoutingDecision::uniform(layers, 0)));
    decisions
        .iter()
        .map(|(s, d)| {
            let t = pooled_temporal(s, set, d)?;
            e.iter().zip(&t).map(|(e, t)| modulated_embedding(e, t, 1.0)).collect()
        })
        .collect()
}

/// Mean pairwise cosine similarity of video features across the expert-pure
/// stacks and the merged stack, `[(N + 1) × (N + 1)]`, merged last.
pub fn expert_similarity(stack: &MoteStack, probe: &EncodedSet) -> Result<Vec<Vec<f64>>> {
    if probe.is_empty() {
        return Err(Error::invalid("expert similarity needs a non-empty probe set"));
    }
    let feats = variant_features(stack, probe)?;
    let n = feats.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = feats[i].iter().zip(&feats[j]).map(|(a, b)| cosine(a, b)).sum::<f64>() / probe.len() as f64;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRow {
    /// `expert-<i>` or `merged`.
    pub name: String,
    pub close: SplitMetrics,
    pub zeroshot: SplitMetrics,
}

/// Scores every expert-pure stack and the merged stack on the close and
/// zero-shot sets, TFM off and merge aggregation throughout.
pub fn expert_wise_eval(
    stack: &MoteStack,
    close: (&EncodedSet, &EmbeddingBank),
    zeroshot: (&EncodedSet, &EmbeddingBank),
    temperature: f64,
) -> Result<Vec<ExpertRow>> {
    let s = EvalSettings {
        tfm: TfmConfig {
            enabled: false,
            ..TfmConfig::default()
        },
        aggregation: Aggregation::Merge,
        temperature,
        seed: 0,
    };
    let mut rows = Vec::with_capacity(stack.dims.experts + 1);
    let mut push = |name: String, st: &MoteStack| -> Result<()> {
        let c = evaluate(st, close.0, Banks { fine_tuning: close.1, eval: close.1 }, &s)?;
        let z = evaluate(
            st,
            zeroshot.0,
            Banks {
                fine_tuning: close.1,
                eval: zeroshot.1,
            },
            &s,
        )?;
        rows.push(ExpertRow {
            name,
            close: c,
            zeroshot: z,
        });
        Ok(())
    };
    for i in 0..stack.dims.experts {
        push(format!("expert-{i}"), &stack.single_expert(i)?)?;
    }
    push("merged".into(), &stack.merged(Tau::Infinite)?)?;
    Ok(rows)
}
