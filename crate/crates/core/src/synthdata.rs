//! Seeded synthetic "videos" whose class identity is partly carried by the
//! order of frames.
//!
//! Every class has a static pattern (rendered from a latent aligned with its
//! bank vector) and a zero-mean temporal motif. Motion-twin pairs share their
//! static pattern and play each other's motif backwards, so their frame
//! multisets coincide and only temporal modeling separates them. Unseen
//! classes recombine the motifs of two seen parents and take their bank
//! vectors from mixtures of the parents' vectors.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{gaussian_vec, pooled_spatial, BankRole, EmbeddingBank, FrozenEncoder};
use crate::error::{Error, Result};
use crate::stack::derive_seed;
use crate::tensor::{l2_norm, Tensor};

/// Generator settings. Stored as TOML next to dumped datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub raw_dim: usize,
    pub dim: usize,
    pub frames: usize,
    pub seen_classes: usize,
    /// Pairs among the seen classes that differ only in motif direction.
    pub twin_pairs: usize,
    pub unseen_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Norm of the latent static pattern.
    pub static_scale: f64,
    /// Expected norm of one motif step.
    pub motif_scale: f64,
    /// Per-dimension std of the frame noise.
    pub noise_sigma: f64,
    /// Expected norm of a per-class offset between a class's visual latent
    /// and its bank vector.
    pub align_noise: f64,
    /// Parent weight of unseen bank vectors.
    pub mix_weight: f64,
    /// Expected norm of the noise added to unseen bank vectors.
    pub mix_sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            raw_dim: 32,
            dim: 64,
            frames: 8,
            seen_classes: 12,
            twin_pairs: 4,
            unseen_classes: 8,
            train_per_class: 50,
            eval_per_class: 20,
            static_scale: 1.0,
            motif_scale: 1.0,
            noise_sigma: 0.15,
            align_noise: 0.65,
            mix_weight: 0.5,
            mix_sigma: 0.3,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seen_classes < 2 || self.unseen_classes < 2 {
            return fail(format!(
                "need at least 2 seen and 2 unseen classes (got {} and {})",
                self.seen_classes, self.unseen_classes
            ));
        }
        if 2 * self.twin_pairs > self.seen_classes {
            return fail(format!("{} twin pairs need more than {} seen classes", self.twin_pairs, self.seen_classes));
        }
        if self.raw_dim == 0 || self.raw_dim > self.dim {
            return fail(format!("raw_dim must be in 1..=dim (got {} and {})", self.raw_dim, self.dim));
        }
        if self.frames < 2 {
            return fail("at least 2 frames per episode".into());
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return fail("per-class episode counts must be positive".into());
        }
        let nonneg = [
            ("static_scale", self.static_scale),
            ("motif_scale", self.motif_scale),
            ("noise_sigma", self.noise_sigma),
            ("align_noise", self.align_noise),
            ("mix_sigma", self.mix_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return fail(format!("mix_weight must be in [0, 1], got {}", self.mix_weight));
        }
        let max_pairs = self.seen_classes * (self.seen_classes - 1) / 2 - self.twin_pairs;
        if self.unseen_classes > max_pairs {
            return fail(format!("only {max_pairs} distinct parent pairs for {} unseen classes", self.unseen_classes));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: DatasetSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: String,
    /// `[raw_dim]`.
    pub base_pattern: Vec<f64>,
    /// `T` steps of `[raw_dim]`, zero mean over steps.
    pub motif: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl ClassSpec {
    pub fn validate(&self, frames: usize) -> Result<()> {
        let raw = self.base_pattern.len();
        if self.motif.len() > frames || self.motif.iter().any(|m| m.len() != raw) {
            return Err(Error::invalid(format!("class '{}' has an ill-shaped motif", self.class_id)));
        }
        let finite = self.base_pattern.iter().chain(self.motif.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("class '{}' is not finite", self.class_id)));
        }
        Ok(())
    }

    /// One noisy episode of `frames` steps. Steps past the motif are static.
    pub fn sample(&self, frames: usize, rng: &mut ChaCha8Rng) -> Episode {
        let raw = self.base_pattern.len();
        let rows = (0..frames)
            .map(|k| {
                let noise = gaussian_vec(rng, raw, self.noise_sigma);
                (0..raw)
                    .map(|j| {
                        let m = self.motif.get(k).map_or(0.0, |s| s[j]);
                        self.base_pattern[j] + m + noise[j]
                    })
                    .collect()
            })
            .collect();
        Episode {
            frames: rows,
            label: self.class_id.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    /// `T` rows of `[raw_dim]`.
    pub frames: Vec<Vec<f64>>,
    pub label: String,
}

impl Episode {
    pub fn frames_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.frames)
    }

    /// Parses one dataset line; frames must be a non-empty rectangle of
    /// finite numbers.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let ep: Episode = serde_json::from_str(line)?;
        let w = ep.frames.first().map_or(0, Vec::len);
        if w == 0 || ep.frames.iter().any(|r| r.len() != w) {
            return Err(Error::invalid("episode frames must be a non-empty rectangle"));
        }
        if ep.frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("episode frames must be finite"));
        }
        Ok(ep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seen_classes: Vec<String>,
    pub unseen_classes: Vec<String>,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub seed: u64,
}

/// Everything one seed of the generator produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: DatasetSpec,
    pub split: DatasetSplit,
    pub classes: Vec<ClassSpec>,
    /// Seen-class label pairs with mirrored motifs.
    pub twins: Vec<(String, String)>,
    /// Seen parents of each unseen class, by label.
    pub parents: Vec<(String, String)>,
    pub encoder: FrozenEncoder,
    pub bank_ft: EmbeddingBank,
    pub bank_test: EmbeddingBank,
    pub train: Vec<Episode>,
    pub close_eval: Vec<Episode>,
    /// Unseen-class training pool; only the few-shot protocol touches it.
    pub unseen_train: Vec<Episode>,
    pub zeroshot_eval: Vec<Episode>,
}

fn seen_label(i: usize) -> String {
    format!("seen{i:02}")
}

fn unseen_label(i: usize) -> String {
    format!("unseen{i:02}")
}

fn zero_mean_motif(rng: &mut ChaCha8Rng, frames: usize, raw: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut steps: Vec<Vec<f64>> = (0..frames).map(|_| gaussian_vec(rng, raw, scale / (raw as f64).sqrt())).collect();
    center(&mut steps);
    steps
}

fn center(steps: &mut [Vec<f64>]) {
    let n = steps.len() as f64;
    let raw = steps[0].len();
    let mean: Vec<f64> = (0..raw).map(|j| steps.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    for s in steps.iter_mut() {
        s.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
}

/// Builds the class structure, banks and all episode sets for `seed`.
pub fn generate_split(spec: &DatasetSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let (raw, t) = (spec.raw_dim, spec.frames);
    let encoder = FrozenEncoder::new(raw, spec.dim, derive_seed(seed, 1, 0))?;
    let seen: Vec<String> = (0..spec.seen_classes).map(seen_label).collect();
    let unseen: Vec<String> = (0..spec.unseen_classes).map(unseen_label).collect();
    let bank_ft = EmbeddingBank::gaussian(seen.clone(), spec.dim, derive_seed(seed, 2, 0), BankRole::FineTuning)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
    let twin_of = |i: usize| (i < 2 * spec.twin_pairs).then_some(i ^ 1);
    let mut align_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, 0));
    let mut visual = |y: &[f64]| -> Result<Vec<f64>> {
        let off = gaussian_vec(&mut align_rng, y.len(), spec.align_noise / (y.len() as f64).sqrt());
        let mut v: Vec<f64> = y.iter().zip(&off).map(|(a, b)| a + b).collect();
        let n = l2_norm(&v);
        if n == 0.0 {
            return Err(Error::Degenerate("zero visual latent".into()));
        }
        v.iter_mut().for_each(|x| *x *= spec.static_scale / n);
        Ok(encoder.render(&v))
    };
    let mut classes: Vec<ClassSpec> = Vec::with_capacity(seen.len() + unseen.len());
    for (i, label) in seen.iter().enumerate() {
        let (base_pattern, motif) = match twin_of(i) {
            Some(j) if j < i => {
                let mut m = classes[j].motif.clone();
                m.reverse();
                (classes[j].base_pattern.clone(), m)
            }
            Some(j) => {
                let y: Vec<f64> = bank_ft.vector(i).iter().zip(bank_ft.vector(j)).map(|(a, b)| a + b).collect();
                (visual(&y)?, zero_mean_motif(&mut rng, t, raw, spec.motif_scale))
            }
            None => (visual(bank_ft.vector(i))?, zero_mean_motif(&mut rng, t, raw, spec.motif_scale)),
        };
        classes.push(ClassSpec {
            class_id: label.clone(),
            base_pattern,
            motif,
            noise_sigma: spec.noise_sigma,
        });
    }

    // Distinct parent pairs, never a twin pair.
    let mut candidates: Vec<(usize, usize)> = (0..seen.len())
        .flat_map(|a| ((a + 1)..seen.len()).map(move |b| (a, b)))
        .filter(|&(a, b)| twin_of(a) != Some(b))
        .collect();
    candidates.shuffle(&mut rng);
    let pairs: Vec<(usize, usize)> = candidates[..unseen.len()].to_vec();
    let bank_test = EmbeddingBank::mixtures(
        &bank_ft,
        unseen.clone(),
        &pairs,
        spec.mix_weight,
        spec.mix_sigma,
        derive_seed(seed, 4, 0),
    )?;
    let half = t / 2;
    for (u, &(a, b)) in pairs.iter().enumerate() {
        let mut motif: Vec<Vec<f64>> = classes[a].motif[..half].to_vec();
        motif.extend_from_slice(&classes[b].motif[half..]);
        center(&mut motif);
        classes.push(ClassSpec {
            class_id: unseen[u].clone(),
            base_pattern: visual(bank_test.vector(u))?,
            motif,
            noise_sigma: spec.noise_sigma,
        });
    }
    for c in &classes {
        c.validate(t)?;
    }

    let draw = |range: std::ops::Range<usize>, set: u64, per_class: usize| -> Vec<Episode> {
        let mut out = Vec::with_capacity(range.len() * per_class);
        for c in range {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10 + set, c as u64));
            out.extend((0..per_class).map(|_| classes[c].sample(t, &mut rng)));
        }
        out
    };
    let n_seen = seen.len();
    let all = n_seen + unseen.len();
    let train = draw(0..n_seen, 0, spec.train_per_class);
    let close_eval = draw(0..n_seen, 1, spec.eval_per_class);
    let unseen_train = draw(n_seen..all, 2, spec.train_per_class);
    let zeroshot_eval = draw(n_seen..all, 3, spec.eval_per_class);

    let twins = (0..spec.twin_pairs).map(|p| (seen[2 * p].clone(), seen[2 * p + 1].clone())).collect();
    let parents = pairs.iter().map(|&(a, b)| (seen[a].clone(), seen[b].clone())).collect();
    Ok(SyntheticData {
        spec: spec.clone(),
        split: DatasetSplit {
            seen_classes: seen,
            unseen_classes: unseen,
            train_per_class: spec.train_per_class,
            eval_per_class: spec.eval_per_class,
            seed,
        },
        classes,
        twins,
        parents,
        encoder,
        bank_ft,
        bank_test,
        train,
        close_eval,
        unseen_train,
        zeroshot_eval,
    })
}

/// `k` random episodes per class, tiled back up to `train.len()`.
pub fn kshot_sample(train: &[Episode], k: usize, seed: u64) -> Result<Vec<Episode>> {
    if k == 0 {
        return Err(Error::invalid("k-shot sampling needs k >= 1"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_class: HashMap<&str, Vec<&Episode>> = HashMap::new();
    for ep in train {
        let entry = by_class.entry(ep.label.as_str()).or_default();
        if entry.is_empty() {
            order.push(ep.label.as_str());
        }
        entry.push(ep);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<Episode> = Vec::with_capacity(k * order.len());
    for label in &order {
        let pool = &by_class[label];
        if k > pool.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the {} episodes of class '{label}'",
                pool.len()
            )));
        }
        picked.extend(pool.choose_multiple(&mut rng, k).map(|e| (*e).clone()));
    }
    Ok(picked.iter().cycle().take(train.len()).cloned().collect())
}

/// Union of two banks, deduplicated by label (the fine-tuning row wins).
pub fn mixed_bank(bank_ft: &EmbeddingBank, bank_test: &EmbeddingBank) -> Result<EmbeddingBank> {
    if bank_ft.dim() != bank_test.dim() {
        return Err(Error::Shape {
            op: "mixed_bank",
            lhs: vec![bank_ft.dim()],
            rhs: vec![bank_test.dim()],
        });
    }
    let mut labels = bank_ft.labels().to_vec();
    let mut vectors = bank_ft.vectors().to_vec();
    let known: HashSet<&String> = bank_ft.labels().iter().collect();
    for (l, v) in bank_test.labels().iter().zip(bank_test.vectors()) {
        if !known.contains(l) {
            labels.push(l.clone());
            vectors.push(v.clone());
        }
    }
    EmbeddingBank::new(labels, vectors, bank_test.seed(), bank_test.role())
}

/// Writes one JSON episode per line.
pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep = Episode::from_json_line(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ep);
    }
    Ok(out)
}

/// Everything in [`SyntheticData`] except the episodes and banks, which are
/// stored in their own files.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: DatasetSpec,
    split: DatasetSplit,
    classes: Vec<ClassSpec>,
    twins: Vec<(String, String)>,
    parents: Vec<(String, String)>,
    encoder: FrozenEncoder,
}

const EPISODE_FILES: [&str; 4] = ["train.jsonl", "close.jsonl", "unseen_train.jsonl", "zeroshot.jsonl"];

impl SyntheticData {
    /// Writes `manifest.json`, both banks and one JSONL file per episode set.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            spec: self.spec.clone(),
            split: self.split.clone(),
            classes: self.classes.clone(),
            twins: self.twins.clone(),
            parents: self.parents.clone(),
            encoder: self.encoder.clone(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string(&manifest)?).map_err(|e| Error::io(&path, e))?;
        let spec_path = dir.join("spec.toml");
        std::fs::write(&spec_path, self.spec.to_toml()).map_err(|e| Error::io(&spec_path, e))?;
        self.bank_ft.save(&dir.join("bank_ft.json"))?;
        self.bank_test.save(&dir.join("bank_test.json"))?;
        let sets = [&self.train, &self.close_eval, &self.unseen_train, &self.zeroshot_eval];
        for (name, set) in EPISODE_FILES.iter().zip(sets) {
            save_episodes(&dir.join(name), set)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.spec.validate()?;
        m.encoder.validate()?;
        let mut sets = EPISODE_FILES
            .iter()
            .map(|name| load_episodes(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || sets.next().expect("four episode files");
        let data = SyntheticData {
            spec: m.spec,
            split: m.split,
            classes: m.classes,
            twins: m.twins,
            parents: m.parents,
            encoder: m.encoder,
            bank_ft: EmbeddingBank::load(&dir.join("bank_ft.json"))?,
            bank_test: EmbeddingBank::load(&dir.join("bank_test.json"))?,
            train: next(),
            close_eval: next(),
            unseen_train: next(),
            zeroshot_eval: next(),
        };
        let expect = (data.spec.raw_dim, data.spec.frames);
        let episodes = data.train.iter().chain(&data.close_eval).chain(&data.unseen_train).chain(&data.zeroshot_eval);
        for ep in episodes {
            if (ep.frames[0].len(), ep.frames.len()) != expect {
                return Err(Error::invalid(format!(
                    "episode '{}' is {}x{}, spec says {}x{}",
                    ep.label,
                    ep.frames.len(),
                    ep.frames[0].len(),
                    expect.1,
                    expect.0
                )));
            }
        }
        if data.encoder.raw_dim() != data.spec.raw_dim || data.encoder.dim() != data.spec.dim {
            return Err(Error::invalid("stored encoder does not match the dataset spec"));
        }
        Ok(data)
    }
}

/// Frozen per-frame embeddings `[T, D]` and bank indices for an episode set.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet {
    pub frames: Vec<Tensor>,
    pub targets: Vec<usize>,
}

impl EncodedSet {
    pub fn new(encoder: &FrozenEncoder, episodes: &[Episode], bank: &EmbeddingBank) -> Result<Self> {
        let targets = bank.indices_of(episodes.iter().map(|e| e.label.as_str()))?;
        let frames = episodes
            .iter()
            .map(|e| encoder.encode_frames(&e.frames_tensor()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSet { frames, targets })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    /// Same samples with targets re-indexed from bank `from` to bank `to`.
    pub fn retarget(&self, from: &EmbeddingBank, to: &EmbeddingBank) -> Result<Self> {
        let labels: Vec<&str> = self
            .targets
            .iter()
            .map(|&t| from.labels().get(t).map(String::as_str))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::invalid("target outside the source bank"))?;
        Ok(EncodedSet {
            frames: self.frames.clone(),
            targets: to.indices_of(labels)?,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Stacks the chosen samples into `[B, T, D]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.frames[idx[0]].shape().to_vec();
        let mut data = Vec::with_capacity(idx.len() * self.frames[0].numel());
        for &i in idx {
            if self.frames[i].shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: shape,
                    rhs: self.frames[i].shape().to_vec(),
                });
            }
            data.extend_from_slice(self.frames[i].data());
        }
        let t = Tensor::new(vec![idx.len(), shape[0], shape[1]], data)?;
        Ok((t, idx.iter().map(|&i| self.targets[i]).collect()))
    }
}

/// Nearest-centroid accuracy on frame-mean features, split into non-twin and
/// twin classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub non_twin: f64,
    pub twin: f64,
}

pub fn pooled_centroid_separability(data: &SyntheticData) -> Result<Separability> {
    let pooled = |eps: &[Episode]| -> Result<Vec<(String, Vec<f64>)>> {
        eps.iter()
            .map(|e| {
                let f = data.encoder.encode_frames(&e.frames_tensor()?)?;
                Ok((e.label.clone(), pooled_spatial(&f)?.into_data()))
            })
            .collect()
    };
    let train = pooled(&data.train)?;
    let d = data.spec.dim;
    let mut sums: Vec<(String, Vec<f64>, usize)> = data
        .split
        .seen_classes
        .iter()
        .map(|l| (l.clone(), vec![0.0; d], 0))
        .collect();
    for (label, v) in &train {
        let slot = sums.iter_mut().find(|s| &s.0 == label).expect("seen label");
        slot.1.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        slot.2 += 1;
    }
    let centroids: Vec<(String, Vec<f64>)> = sums
        .into_iter()
        .map(|(l, s, n)| (l, s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let twin_labels: HashSet<&String> = data.twins.iter().flat_map(|(a, b)| [a, b]).collect();
    let (mut hit, mut tot) = ([0usize; 2], [0usize; 2]);
    for (label, v) in pooled(&data.close_eval)? {
        let best = centroids
            .iter()
            .map(|(l, c)| (l, c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("centroids")
            .0;
        let k = usize::from(twin_labels.contains(&label));
        tot[k] += 1;
        hit[k] += usize::from(*best == label);
    }
    let rate = |k: usize| if tot[k] == 0 { f64::NAN } else { hit[k] as f64 / tot[k] as f64 };
    Ok(Separability {
        non_twin: rate(0),
        twin: rate(1),
    })
}
