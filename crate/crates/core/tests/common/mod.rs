//! Test-only central-difference oracle. Shares nothing with the tape's
//! backward pass beyond the forward values it perturbs.
#![allow(dead_code)]

use mote::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
pub const GRAD_NORM_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar objective `sum(out ⊙ probe)` so every output element
/// contributes with a distinct weight.
fn objective<F>(f: &F, inputs: &[Tensor], probe_seed: u64, leaves: bool) -> (Tape, Vec<Var>, Var)
where
    F: Fn(&Tape, &[Var]) -> mote::Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if leaves { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&tape, &vars).unwrap();
    let shape = tape.shape(out);
    let probe = random_tensor(&mut rng(probe_seed), &shape, 1.0);
    let p = tape.constant(probe);
    let loss = tape.sum(tape.mul(out, p).unwrap());
    (tape, vars, loss)
}

fn value<F>(f: &F, inputs: &[Tensor], probe_seed: u64) -> f64
where
    F: Fn(&Tape, &[Var]) -> mote::Result<Var>,
{
    let (tape, _, loss) = objective(f, inputs, probe_seed, false);
    let v = tape.value(loss).item();
    v
}

/// Largest per-input relative error `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`
/// over the inputs flagged in `check`.
pub fn grad_rel_error<F>(f: F, inputs: &[Tensor], check: &[bool], probe_seed: u64) -> f64
where
    F: Fn(&Tape, &[Var]) -> mote::Result<Var>,
{
    let (tape, vars, loss) = objective(&f, inputs, probe_seed, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[i], input.shape());
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (value(&f, &plus, probe_seed) - value(&f, &minus, probe_seed)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = mote::tensor::l2_norm(analytic.data());
        let nn = mote::tensor::l2_norm(&numeric);
        // Floor keeps mathematically-zero gradients (e.g. attention key bias)
        // from turning FD round-off into a relative error of 1.
        let rel = diff / (na + nn).max(GRAD_NORM_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

pub fn all(n: usize) -> Vec<bool> {
    vec![true; n]
}

/// One differentiable primitive: given an instance seed, returns the worst
/// relative gradient error on a random small instance.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn dims(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(1..=4)).collect()
}

fn case_matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 3);
    let a = random_tensor(&mut r, &[d[0], d[1]], 1.0);
    let b = random_tensor(&mut r, &[d[1], d[2]], 1.0);
    grad_rel_error(|t, v| t.matmul(v[0], v[1]), &[a, b], &all(2), seed)
}

fn case_transpose(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let a = random_tensor(&mut r, &d, 1.0);
    grad_rel_error(|t, v| t.transpose(v[0]), &[a], &all(1), seed)
}

fn binary(seed: u64, op: fn(&Tape, Var, Var) -> mote::Result<Var>) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let a = random_tensor(&mut r, &d, 1.0);
    let b = random_tensor(&mut r, &d, 1.0);
    grad_rel_error(|t, v| op(t, v[0], v[1]), &[a, b], &all(2), seed)
}

fn case_add(seed: u64) -> f64 {
    binary(seed, |t, a, b| t.add(a, b))
}

fn case_sub(seed: u64) -> f64 {
    binary(seed, |t, a, b| t.sub(a, b))
}

fn case_mul(seed: u64) -> f64 {
    binary(seed, |t, a, b| t.mul(a, b))
}

fn case_mse(seed: u64) -> f64 {
    binary(seed, |t, a, b| t.mse(a, b))
}

fn case_add_row(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let a = random_tensor(&mut r, &d, 1.0);
    let b = random_tensor(&mut r, &[d[1]], 1.0);
    grad_rel_error(|t, v| t.add_row(v[0], v[1]), &[a, b], &all(2), seed)
}

fn case_scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let c = r.gen_range(-3.0..3.0);
    let a = random_tensor(&mut r, &d, 1.0);
    grad_rel_error(|t, v| Ok(t.scale(v[0], c)), &[a], &all(1), seed)
}

fn case_sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 3);
    let a = random_tensor(&mut r, &d, 1.0);
    grad_rel_error(|t, v| Ok(t.sum(v[0])), &[a], &all(1), seed)
}

fn case_mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 3);
    let axis = r.gen_range(0..3);
    let a = random_tensor(&mut r, &d, 1.0);
    grad_rel_error(|t, v| t.mean(v[0], axis), &[a], &all(1), seed)
}

fn case_layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let rows = r.gen_range(1..=4);
    let w = r.gen_range(2..=5);
    let x = random_tensor(&mut r, &[rows, w], 2.0);
    let g = random_tensor(&mut r, &[w], 1.5);
    let b = random_tensor(&mut r, &[w], 1.0);
    grad_rel_error(|t, v| t.layer_norm(v[0], v[1], v[2]), &[x, g, b], &all(3), seed)
}

fn case_gelu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let a = random_tensor(&mut r, &d, 3.0);
    grad_rel_error(|t, v| Ok(t.gelu(v[0])), &[a], &all(1), seed)
}

fn case_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 3);
    let axis = r.gen_range(0..3);
    let a = random_tensor(&mut r, &d, 2.0);
    grad_rel_error(|t, v| t.softmax(v[0], axis), &[a], &all(1), seed)
}

fn case_log_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let a = random_tensor(&mut r, &d, 2.0);
    grad_rel_error(|t, v| Ok(t.log_softmax(v[0])), &[a], &all(1), seed)
}

fn case_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..=4);
    let c = r.gen_range(2..=5);
    let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
    let a = random_tensor(&mut r, &[b, c], 3.0);
    grad_rel_error(|t, v| t.cross_entropy(v[0], &targets), &[a], &all(1), seed)
}

fn case_l2_normalize(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let a = random_tensor(&mut r, &[d[0], d[1] + 1], 1.0);
    grad_rel_error(|t, v| t.l2_normalize_rows(v[0]), &[a], &all(1), seed)
}

fn case_concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 3);
    let a = random_tensor(&mut r, &[d[0], d[2]], 1.0);
    let b = random_tensor(&mut r, &[d[1], d[2]], 1.0);
    grad_rel_error(|t, v| t.concat(&[v[0], v[1], v[0]]), &[a, b], &all(2), seed)
}

fn case_gather_rows(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let idx: Vec<usize> = (0..r.gen_range(1..=6)).map(|_| r.gen_range(0..d[0])).collect();
    let a = random_tensor(&mut r, &d, 1.0);
    grad_rel_error(|t, v| t.gather_rows(v[0], &idx), &[a], &all(1), seed)
}

fn case_reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = dims(&mut r, 2);
    let a = random_tensor(&mut r, &d, 1.0);
    let flat = d[0] * d[1];
    grad_rel_error(
        |t, v| {
            let x = t.reshape(v[0], &[flat])?;
            t.mul(x, x)
        },
        &[a],
        &all(1),
        seed,
    )
}

fn case_attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let seqs = r.gen_range(1..=2);
    let t_len = r.gen_range(1..=3);
    let heads = r.gen_range(1..=2);
    let d = 2 * heads;
    let shape = [seqs * t_len, d];
    let q = random_tensor(&mut r, &shape, 1.0);
    let k = random_tensor(&mut r, &shape, 1.0);
    let v = random_tensor(&mut r, &shape, 1.0);
    grad_rel_error(|t, x| t.attention(x[0], x[1], x[2], t_len, heads), &[q, k, v], &all(3), seed)
}

/// Pre-norm self-attention sublayer with D = 4, T = 3.
fn case_attention_block(seed: u64) -> f64 {
    use mote::tensor::{attention_block, AttentionVars};
    let mut r = rng(seed);
    let (t_len, d) = (3, 4);
    let mut inputs = vec![random_tensor(&mut r, &[t_len, d], 1.0)];
    inputs.push(random_tensor(&mut r, &[d], 1.0)); // ln gain
    inputs.push(random_tensor(&mut r, &[d], 0.5)); // ln bias
    for _ in 0..3 {
        inputs.push(random_tensor(&mut r, &[d, d], 0.7));
    }
    for _ in 0..3 {
        inputs.push(random_tensor(&mut r, &[d], 0.3));
    }
    inputs.push(random_tensor(&mut r, &[d, d], 0.7));
    inputs.push(random_tensor(&mut r, &[d], 0.3));
    let n = inputs.len();
    grad_rel_error(
        |t, v| {
            let p = AttentionVars {
                ln_gain: v[1],
                ln_bias: v[2],
                w_q: v[3],
                w_k: v[4],
                w_v: v[5],
                b_q: v[6],
                b_k: v[7],
                b_v: v[8],
                w_out: v[9],
                b_out: v[10],
            };
            attention_block(t, v[0], &p, t_len, 2)
        },
        &inputs,
        &all(n),
        seed,
    )
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        PrimitiveCase { name: "matmul", run: case_matmul },
        PrimitiveCase { name: "transpose", run: case_transpose },
        PrimitiveCase { name: "add", run: case_add },
        PrimitiveCase { name: "sub", run: case_sub },
        PrimitiveCase { name: "mul", run: case_mul },
        PrimitiveCase { name: "add_row", run: case_add_row },
        PrimitiveCase { name: "scale", run: case_scale },
        PrimitiveCase { name: "sum", run: case_sum },
        PrimitiveCase { name: "mean", run: case_mean },
        PrimitiveCase { name: "layer_norm", run: case_layer_norm },
        PrimitiveCase { name: "gelu", run: case_gelu },
        PrimitiveCase { name: "softmax", run: case_softmax },
        PrimitiveCase { name: "log_softmax", run: case_log_softmax },
        PrimitiveCase { name: "cross_entropy", run: case_cross_entropy },
        PrimitiveCase { name: "l2_normalize_rows", run: case_l2_normalize },
        PrimitiveCase { name: "mse", run: case_mse },
        PrimitiveCase { name: "concat", run: case_concat },
        PrimitiveCase { name: "gather_rows", run: case_gather_rows },
        PrimitiveCase { name: "reshape", run: case_reshape },
        PrimitiveCase { name: "attention", run: case_attention },
        PrimitiveCase { name: "attention_block", run: case_attention_block },
    ]
}

/// A config small enough to train in well under a second.
pub fn tiny_config() -> mote::harness::RunConfig {
    mote::harness::RunConfig::from_toml(
        r#"
[data]
raw_dim = 8
dim = 8
frames = 4
seen_classes = 4
twin_pairs = 1
unseen_classes = 3
train_per_class = 6
eval_per_class = 4

[model]
hidden = 8
layers = 2
experts = 2
heads = 2

[train]
batch_size = 8
epochs = 2

[eval]
few_shot = [2]
"#,
    )
    .unwrap()
}
