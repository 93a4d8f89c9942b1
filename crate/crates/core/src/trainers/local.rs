use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fedipr::{Projector, WatermarkKey};
use crate::model::{Batch, MiniLM};
use crate::optim::{OptimizerConfig, Sgd};
use crate::peft::{AdapterSet, Layout};
use crate::tensor::Tensor;
use crate::trainers::{derive_seed, Sequence, TrainerPlan};

/// Values a client uploads after local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    /// Full post-training values, not differences.
    pub values: Vec<f32>,
    pub layout: Layout,
    pub sample_count: u64,
    /// Token-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Anything the round driver can train and refresh.
pub trait Participant: Send {
    fn id(&self) -> u32;
    fn train(&mut self, epochs: usize) -> Result<LocalUpdate>;
    fn load(&mut self, values: &[f32]) -> Result<()>;
}

/// Shuffled mini-batches for one epoch, keyed by `(seed, client, epoch)` so
/// splitting epochs across calls never changes the order.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, client: u32, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, client as u64, epoch]));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Runs `epochs` passes of `step` over shuffled batches. `step` returns the
/// batch's mean loss and its token count; the result is one token-weighted
/// mean per epoch.
pub(crate) fn run_epochs(
    shard: &[Sequence],
    batch_size: usize,
    epochs: usize,
    seed: u64,
    client: u32,
    epochs_done: &mut u64,
    mut step: impl FnMut(&[&Sequence], &mut ChaCha8Rng) -> Result<(f64, usize)>,
) -> Result<Vec<f64>> {
    if shard.iter().all(|s| s.len() < 2) {
        return Err(Error::Data(format!("client {client} has no trainable sequences")));
    }
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = *epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4, client as u64, epoch]));
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in epoch_batches(shard.len(), batch_size, seed, client, epoch) {
            let batch: Vec<&Sequence> = idx.iter().map(|&i| &shard[i]).filter(|s| s.len() >= 2).collect();
            if batch.is_empty() {
                continue;
            }
            let (loss, n) = step(&batch, &mut rng)?;
            sum += loss * n as f64;
            count += n;
        }
        losses.push(sum / count as f64);
        *epochs_done += 1;
    }
    Ok(losses)
}

/// Fills any missing gradients with zeros, then takes one optimizer step.
pub(crate) fn step_all(sgd: &mut Sgd, mut params: Vec<&mut Tensor>) -> Result<()> {
    for p in params.iter_mut() {
        if p.grad.is_none() {
            p.grad = Some(vec![0.0; p.numel()]);
        }
    }
    sgd.step(&mut params)
}

/// One client of an adapter-based protocol. The base model is shared
/// read-only; only the adapters change.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub base: Arc<MiniLM>,
    pub adapters: AdapterSet,
    pub shard: Vec<Sequence>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
    watermark: Option<(WatermarkKey, Projector)>,
    sgd: Sgd,
    epochs_done: u64,
}

impl ClientState {
    pub fn new(id: u32, base: Arc<MiniLM>, adapters: AdapterSet, shard: Vec<Sequence>, plan: &TrainerPlan) -> Self {
        Self {
            id,
            base,
            adapters,
            shard,
            optimizer: plan.optimizer,
            batch_size: plan.batch_size,
            seed: plan.seed,
            watermark: None,
            sgd: Sgd::from_config(&plan.optimizer),
            epochs_done: 0,
        }
    }

    /// Adds the watermark embedding loss to every local step.
    pub fn with_watermark(mut self, key: WatermarkKey) -> Result<Self> {
        let proj = Projector::new(&key, self.adapters.num_params())?;
        self.watermark = Some((key, proj));
        Ok(self)
    }

    pub fn watermark(&self) -> Option<&WatermarkKey> {
        self.watermark.as_ref().map(|(k, _)| k)
    }

    pub fn sample_count(&self) -> u64 {
        self.shard.len() as u64
    }

    pub fn epochs_done(&self) -> u64 {
        self.epochs_done
    }
}

/// `epochs` passes of SGD over the client's shard, updating adapters only.
pub fn local_finetune(client: &mut ClientState, epochs: usize) -> Result<LocalUpdate> {
    if client.shard.is_empty() {
        return Err(Error::Data(format!("client {} has an empty shard", client.id)));
    }
    let ClientState { id, base, adapters, shard, batch_size, seed, watermark, sgd, epochs_done, .. } = client;
    let epoch_losses = run_epochs(shard, *batch_size, epochs, *seed, *id, epochs_done, |batch, rng| {
        let (b, targets) = Batch::next_token(batch)?;
        let mut g = Graph::new();
        let vars = base.bind(&mut g, |_| false);
        let av = adapters.bind(&mut g, true)?;
        let logits = base.forward_graph(&mut g, &vars, &b, Some(&av), Some(rng))?;
        let ce = g.cross_entropy(logits, &targets)?;
        let loss = match watermark {
            Some((_, proj)) => {
                let flat = av.flatten(&mut g)?;
                let wm = proj.loss(&mut g, flat)?;
                g.add(ce, wm)?
            }
            None => ce,
        };
        g.backward(loss)?;
        adapters.absorb_grads(&g, &av)?;
        step_all(sgd, adapters.tensors_mut())?;
        Ok((g.item(ce) as f64, targets.len()))
    })?;
    let (values, layout) = adapters.flatten();
    Ok(LocalUpdate { values, layout, sample_count: shard.len() as u64, epoch_losses })
}

impl Participant for ClientState {
    fn id(&self) -> u32 {
        self.id
    }

    fn train(&mut self, epochs: usize) -> Result<LocalUpdate> {
        local_finetune(self, epochs)
    }

    fn load(&mut self, values: &[f32]) -> Result<()> {
        self.adapters.unflatten(values)
    }
}

/// Loss for one batch given the student's logits; used by [`train_model`].
pub type BatchLoss<'a> = dyn FnMut(&mut Graph, Var, &Batch, &[usize]) -> Result<Var> + 'a;

/// SGD over the parameters of `model` selected by `trainable`, with a custom
/// per-batch loss. Returns the token-weighted mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    model: &mut MiniLM,
    trainable: &dyn Fn(&str) -> bool,
    shard: &[Sequence],
    epochs: usize,
    batch_size: usize,
    sgd: &mut Sgd,
    seed: u64,
    client: u32,
    epochs_done: &mut u64,
    loss_fn: &mut BatchLoss<'_>,
) -> Result<Vec<f64>> {
    run_epochs(shard, batch_size, epochs, seed, client, epochs_done, |batch, _| {
        let (b, targets) = Batch::next_token(batch)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, trainable);
        let logits = model.forward_graph(&mut g, &vars, &b, None, None)?;
        let loss = loss_fn(&mut g, logits, &b, &targets)?;
        g.backward(loss)?;
        model.absorb_grads(&g, &vars)?;
        let params = model.named_params_mut().into_iter().filter(|(n, _)| trainable(n)).map(|(_, t)| t).collect();
        step_all(sgd, params)?;
        Ok((g.item(loss) as f64, targets.len()))
    })
}

/// Full-parameter next-token training, e.g. to give a client its own
/// private model before distillation.
pub fn pretrain(
    model: &mut MiniLM,
    shard: &[Sequence],
    epochs: usize,
    batch_size: usize,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut sgd = Sgd::from_config(optimizer);
    let mut done = 0;
    let mut ce = |g: &mut Graph, logits, _: &Batch, targets: &[usize]| g.cross_entropy(logits, targets);
    train_model(model, &|_| true, shard, epochs, batch_size, &mut sgd, seed, u32::MAX, &mut done, &mut ce)
}
