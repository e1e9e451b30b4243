use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, CheckpointKind, RngState, RngStates, CHECKPOINT_VERSION};
use super::config::{DataPolicy, RunConfig};
use super::optim::{learning_rate, AdamW};
use crate::backbone::EmbeddingBank;
use crate::error::{Error, Result};
use crate::objectives::{loss_all, LossContext};
use crate::stack::{MoteStack, RoutingDecision, Tau};
use crate::synthdata::{generate_split, EncodedSet, SyntheticData};
use crate::tensor::Tape;

/// Batch-order stream tag, mixed into the data seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// A generated dataset with its frozen encodings.
pub struct Prepared {
    pub data: SyntheticData,
    pub train: EncodedSet,
    pub close: EncodedSet,
    pub zeroshot: EncodedSet,
    /// Unseen-class pool, indexed against the test bank.
    pub unseen_train: EncodedSet,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let data = generate_split(&config.data, config.seeds.data)?;
        Self::from_data(data)
    }

    pub fn from_data(data: SyntheticData) -> Result<Self> {
        let enc = &data.encoder;
        Ok(Prepared {
            train: EncodedSet::new(enc, &data.train, &data.bank_ft)?,
            close: EncodedSet::new(enc, &data.close_eval, &data.bank_ft)?,
            zeroshot: EncodedSet::new(enc, &data.zeroshot_eval, &data.bank_test)?,
            unseen_train: EncodedSet::new(enc, &data.unseen_train, &data.bank_test)?,
            data,
        })
    }
}

/// What was happening when a loss went non-finite.
#[derive(Debug, Serialize)]
pub struct DivergenceDump {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub routing: Vec<usize>,
    pub taus: Vec<Tau>,
    pub message: String,
    pub last_epoch_losses: Vec<f64>,
}

/// Fresh stack for `config`.
pub fn init_stack(config: &RunConfig) -> Result<MoteStack> {
    MoteStack::init(config.dims(), config.train.init, config.seeds.init)
}

/// Trains `stack` on `set` (targets index `bank`). Deterministic given the
/// config's seeds. On divergence the optional `dump` path receives a JSON
/// diagnostic before the error is returned.
pub fn train(
    config: &RunConfig,
    set: &EncodedSet,
    bank: &EmbeddingBank,
    mut stack: MoteStack,
    dump: Option<&Path>,
) -> Result<Checkpoint> {
    config.validate()?;
    stack.check_structure()?;
    if set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let tc = &config.train;
    let weights = config.loss.weights();
    let layers = stack.dims.layers;
    let bank_t = bank.matrix_t();

    let shuffle_seed = config.seeds.data ^ SHUFFLE_STREAM;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut route_rng = ChaCha8Rng::seed_from_u64(config.seeds.route);
    let mut opt = AdamW::new(&stack);

    let per_epoch = set.len().div_ceil(tc.batch_size);
    let total = per_epoch * tc.epochs;
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..set.len()).collect();

    for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let (frames, targets) = set.batch(idx)?;
            let decision = RoutingDecision::sample(tc.routing, layers, stack.dims.experts, &mut route_rng);
            let taus = if weights.needs_merged_path() {
                config.merge.sample_layers(layers, &mut route_rng)
            } else {
                Vec::new()
            };
            let lr = learning_rate(&config.optim, step, total);

            let tape = Tape::new();
            let vars = stack.bind(&tape, true);
            let ctx = LossContext::new(&tape, &vars, frames, &targets, bank_t.clone(), tc.temperature)?;
            let outcome = (|| {
                let te = match tc.data_policy {
                    DataPolicy::Routed => ctx.loss_te(&decision)?,
                    DataPolicy::AllExperts => ctx.loss_te_all_experts()?,
                };
                let (wmr, mse) = if weights.needs_merged_path() {
                    let merged = ctx.loss_wmr(&taus, config.loss.wmr_variant, &te)?;
                    (Some(merged.loss), Some(ctx.loss_mse(merged.z)?))
                } else {
                    (None, None)
                };
                loss_all(&tape, te.loss, wmr, mse, &weights)
            })();
            let total_loss = match outcome {
                Ok(v) => v,
                // Inputs and shapes are validated up front, so a degenerate
                // intermediate here means the weights have blown up.
                Err(Error::Divergence(message) | Error::Degenerate(message)) => {
                    let d = DivergenceDump {
                        step,
                        epoch,
                        lr,
                        routing: decision.experts.clone(),
                        taus,
                        message: message.clone(),
                        last_epoch_losses: epoch_losses.clone(),
                    };
                    return Err(diverged(d, dump));
                }
                Err(e) => return Err(e),
            };
            loss_sum += tape.value(total_loss).item() * idx.len() as f64;
            drop(ctx);
            let mut grads = tape.backward(total_loss)?;
            let grads: Vec<_> = vars.handles().into_iter().map(|v| grads.take(v)).collect();
            opt.step(&config.optim, lr, &mut stack, &grads)?;
            if !stack.is_finite() {
                let d = DivergenceDump {
                    step,
                    epoch,
                    lr,
                    routing: decision.experts,
                    taus,
                    message: "parameters became non-finite after the update".into(),
                    last_epoch_losses: epoch_losses.clone(),
                };
                return Err(diverged(d, dump));
            }
            step += 1;
        }
        epoch_losses.push(loss_sum / set.len() as f64);
    }

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: CheckpointKind::Full,
        config: config.clone(),
        stack,
        steps: step,
        epoch_losses,
        rng: RngStates {
            shuffle: RngState::capture(shuffle_seed, &shuffle_rng),
            route: RngState::capture(config.seeds.route, &route_rng),
        },
    })
}

fn diverged(d: DivergenceDump, dump: Option<&Path>) -> Error {
    let msg = format!("step {} (epoch {}): {}", d.step, d.epoch, d.message);
    if let Some(path) = dump {
        let written = serde_json::to_string_pretty(&d)
            .map_err(Error::from)
            .and_then(|s| std::fs::write(path, s).map_err(|e| Error::io(path, e)));
        if let Err(e) = written {
            return Error::Divergence(format!("{msg} (diagnostic dump failed: {e})"));
        }
    }
    Error::Divergence(msg)
}
