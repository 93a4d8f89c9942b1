//! Analytic gradients against central finite differences, in f64.
//!
//! [`op_suite`] covers every differentiable graph op; [`minilm_step_error`]
//! and [`adapter_errors`] cover a full model step and the adapter paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttentionSpec, Graph, Segment, Var};
use crate::error::Result;
use crate::model::{Batch, MiniLM, ModelConfig};
use crate::peft::{attach_lora, attach_prefix, AdapterSet, LoraSpec, PrefixSpec, Target};
use crate::tensor::{Scalar, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, FLOOR)`; the floor keeps near-zero components
/// from turning round-off into huge relative errors.
pub const FLOOR: f64 = 1e-2;

/// Worst relative error seen for one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Builds the loss from `inputs`, compares every input gradient with central
/// differences and returns the worst relative error.
pub fn check(inputs: &[Tensor<f64>], build: &Build) -> Result<f64> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.item(loss))
    };
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        if !inputs[i].requires_grad {
            continue;
        }
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng).with_grad()
}

/// Contracts `v` against a fixed random weighting so every output element
/// matters to the scalar loss.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = g.shape(v).to_vec();
    let w = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let w = g.constant(&shape, w.into_data())?;
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type Make = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

struct OpCase {
    name: &'static str,
    make: Make,
    build: Box<Build>,
}

fn case(name: &'static str, make: Make, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, make, build: Box::new(build) }
}

fn op_cases() -> Vec<OpCase> {
    const SEGS: [Segment; 2] = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
    const SIGNS: [f64; 8] = [1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
    vec![
        case("matmul", |r| vec![randn(&[4, 3], r), randn(&[3, 5], r)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("matmul_t", |r| vec![randn(&[4, 3], r), randn(&[5, 3], r)], |g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        case("matmul+sum", |r| vec![randn(&[4, 3], r), randn(&[3, 5], r)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.sum(y))
        }),
        case("add", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
        case("add_row", |r| vec![randn(&[3, 4], r), randn(&[4], r)], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y, 4)
        }),
        case("mul", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 5)
        }),
        case("mul-self", |r| vec![randn(&[5], r)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            weighted_sum(g, y, 6)
        }),
        case("scale", |r| vec![randn(&[2, 3], r)], |g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y, 7)
        }),
        case("gelu", |r| vec![randn(&[3, 5], r)], |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 8)
        }),
        case("tanh", |r| vec![randn(&[3, 5], r)], |g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, 9)
        }),
        case("layer_norm", |r| vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, 10)
        }),
        case("softmax", |r| vec![randn(&[3, 6], r)], |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, 11)
        }),
        case("embedding", |r| vec![randn(&[6, 4], r)], |g, v| {
            let y = g.embedding(v[0], &[1, 5, 1, 0])?;
            weighted_sum(g, y, 12)
        }),
        case("concat", |r| vec![randn(&[2, 3], r), randn(&[4, 3], r)], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]])?;
            weighted_sum(g, y, 13)
        }),
        case("slice_rows", |r| vec![randn(&[5, 3], r)], |g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            weighted_sum(g, y, 14)
        }),
        case("slice_cols", |r| vec![randn(&[3, 7], r)], |g, v| {
            let y = g.slice_cols(v[0], 2, 4)?;
            weighted_sum(g, y, 15)
        }),
        case("reshape", |r| vec![randn(&[3, 4], r)], |g, v| {
            let y = g.reshape(v[0], &[12])?;
            weighted_sum(g, y, 16)
        }),
        case("mean", |r| vec![randn(&[3, 4], r)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        }),
        case("cross_entropy", |r| vec![randn(&[4, 7], r)], |g, v| g.cross_entropy(v[0], &[0, 6, 3, 3])),
        case("kl_divergence_soft", |r| vec![Tensor::randn(&[1, 5], 1.0, r), randn(&[1, 5], r)], |g, v| {
            g.kl_divergence_soft(v[0], v[1], 2.0)
        }),
        case("kl_divergence_soft batch", |r| vec![Tensor::randn(&[3, 5], 1.0, r), randn(&[3, 5], r)], |g, v| {
            g.kl_divergence_soft(v[0], v[1], 0.7)
        }),
        case("hinge", |r| vec![randn(&[8], r)], |g, v| g.hinge(v[0], &SIGNS)),
        case("attention", |r| vec![randn(&[5, 4], r), randn(&[5, 4], r), randn(&[5, 4], r)], |g, v| {
            let spec = AttentionSpec { segments: &SEGS, heads: 2, prefix: None, mask_prefix: false };
            let y = g.attention(v[0], v[1], v[2], spec)?;
            weighted_sum(g, y, 17)
        }),
        case(
            "attention+prefix",
            |r| vec![randn(&[5, 4], r), randn(&[5, 4], r), randn(&[5, 4], r), randn(&[2, 4], r), randn(&[2, 4], r)],
            |g, v| {
                let spec = AttentionSpec { segments: &SEGS, heads: 2, prefix: Some((v[3], v[4])), mask_prefix: false };
                let y = g.attention(v[0], v[1], v[2], spec)?;
                weighted_sum(g, y, 18)
            },
        ),
    ]
}

/// Every differentiable op over `trials` random inputs each; one entry per op.
pub fn op_suite(trials: u64) -> Result<Vec<GradCheck>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let inputs = (c.make)(&mut ChaCha8Rng::seed_from_u64(trial));
                worst = worst.max(check(&inputs, &*c.build)?);
            }
            Ok(GradCheck { name: c.name.into(), max_rel_err: worst })
        })
        .collect()
}

/// 1296-parameter model small enough to difference every parameter.
pub fn tiny_config() -> ModelConfig {
    // 16·8 + 8·8 + 2·(4·8 + 4·64 + 2·8·16) + 2·8
    ModelConfig { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 8, seed: 11 }
}

fn batch() -> Result<(Batch, Vec<usize>)> {
    let seqs: [&[u32]; 2] = [&[1, 4, 9, 2, 15, 3, 0, 7], &[5, 5, 2, 11, 6]];
    Batch::next_token(&seqs)
}

/// Tiny model moved off the symmetric init point (unit gains, zero biases).
pub fn jittered_model(seed: u64) -> Result<MiniLM<f64>> {
    let mut model = MiniLM::<f64>::new(tiny_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.named_params_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    Ok(model)
}

fn model_loss(model: &MiniLM<f64>, adapters: Option<&AdapterSet<f64>>) -> Result<f64> {
    let (batch, targets) = batch()?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, |_| false);
    let av = adapters.map(|a| a.bind(&mut g, false)).transpose()?;
    let logits = model.forward_graph(&mut g, &vars, &batch, av.as_ref(), None)?;
    let loss = g.cross_entropy(logits, &targets)?;
    Ok(g.item(loss))
}

/// Full-parameter gradient of one next-token step in precision `T`, checked
/// against f64 differences of the same model.
pub fn minilm_step_error<T: Scalar>(model: &MiniLM<f64>) -> Result<f64> {
    let m: MiniLM<T> = model.cast();
    let (batch, targets) = batch()?;
    let mut g = Graph::<T>::new();
    let vars = m.bind(&mut g, |_| true);
    let logits = m.forward_graph(&mut g, &vars, &batch, None, None)?;
    let loss = g.cross_entropy(logits, &targets)?;
    g.backward(loss)?;
    let mut work = model.clone();
    let mut worst = 0.0f64;
    for (i, (_, var, _)) in vars.params.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(*var).map(|s| s.iter().map(|&x| Scalar::to_f64(x)).collect()).unwrap_or_default();
        let len = model.named_params()[i].1.numel();
        for j in 0..len {
            let x = model.named_params()[i].1.data()[j];
            work.named_params_mut()[i].1.data_mut()[j] = x + STEP;
            let up = model_loss(&work, None)?;
            work.named_params_mut()[i].1.data_mut()[j] = x - STEP;
            let down = model_loss(&work, None)?;
            work.named_params_mut()[i].1.data_mut()[j] = x;
            worst = worst.max(rel_err(analytic.get(j).copied().unwrap_or(0.0), (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

fn adapter_error(mut adapters: AdapterSet<f64>, model: &MiniLM<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let values: Vec<f64> = adapters.flat_values().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    adapters.unflatten(&values)?;
    let (batch, targets) = batch()?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, |_| false);
    let av = adapters.bind(&mut g, true)?;
    let logits = model.forward_graph(&mut g, &vars, &batch, Some(&av), None)?;
    let loss = g.cross_entropy(logits, &targets)?;
    g.backward(loss)?;
    let mut analytic = Vec::new();
    for (_, v) in &av.entries {
        analytic.extend_from_slice(g.grad(*v).unwrap_or(&[]));
    }
    let mut worst = 0.0f64;
    let mut work = values.clone();
    for j in 0..values.len() {
        work[j] = values[j] + STEP;
        adapters.unflatten(&work)?;
        let up = model_loss(model, Some(&adapters))?;
        work[j] = values[j] - STEP;
        adapters.unflatten(&work)?;
        let down = model_loss(model, Some(&adapters))?;
        work[j] = values[j];
        worst = worst.max(rel_err(analytic.get(j).copied().unwrap_or(0.0), (up - down) / (2.0 * STEP)));
    }
    Ok(worst)
}

/// LoRA on every target, a direct prefix and a reparameterized prefix.
pub fn adapter_errors(model: &MiniLM<f64>) -> Result<Vec<GradCheck>> {
    let lora = LoraSpec { rank: 2, alpha: 4.0, targets: Target::ALL.to_vec(), dropout: 0.0 };
    let cases = [
        ("lora", attach_lora(model, &lora, 1)?),
        ("prefix", attach_prefix(model, &PrefixSpec { len: 2, reparam_hidden: None }, 1)?),
        ("prefix reparam", attach_prefix(model, &PrefixSpec { len: 2, reparam_hidden: Some(3) }, 1)?),
    ];
    cases
        .into_iter()
        .map(|(name, a)| Ok(GradCheck { name: name.into(), max_rel_err: adapter_error(a, model)? }))
        .collect()
}
