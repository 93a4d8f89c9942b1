use std::sync::Arc;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{Batch, MiniLM, ModelConfig};
use crate::optim::Sgd;
use crate::peft::{attach, AdapterSpec};
use crate::trainers::local::train_model;
use crate::trainers::{run_fedhomollm, ClientState, HistoryEntry, HomoRun, KdConfig, Sequence, TrainerPlan};

/// A client with its own private model, possibly of a different size.
#[derive(Debug, Clone)]
pub struct HeteroClient {
    pub id: u32,
    pub teacher: Arc<MiniLM>,
    pub mentee: ModelConfig,
    pub shard: Vec<Sequence>,
}

#[derive(Debug, Clone)]
pub struct HeteroRun {
    /// Distilled mentee of each client, in client order.
    pub mentees: Vec<Arc<MiniLM>>,
    pub distill_history: Vec<HistoryEntry>,
    pub homo: HomoRun,
}

/// Distills `teacher` into `student` with `λ·CE + (1−λ)·T²·KL` over `shard`.
/// History rows use the epoch index as `round`; `kd_initial`/`ce_initial`
/// are measured on the first batch before any update.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    teacher: &MiniLM,
    student: &mut MiniLM,
    shard: &[Sequence],
    kd: &KdConfig,
    lr: f64,
    batch_size: usize,
    seed: u64,
    client: u32,
) -> Result<Vec<HistoryEntry>> {
    if teacher.config().vocab_size != student.config().vocab_size {
        return Err(Error::Config("teacher and mentee must share a vocabulary".into()));
    }
    let lambda = kd.lambda as f32;
    let temperature = kd.temperature as f32;
    let mut sgd = Sgd::new(lr, None);
    let mut epochs_done = 0;
    let mut first: Option<(f64, f64)> = None;
    let mut history = Vec::new();
    for epoch in 1..=kd.epochs {
        let (mut ce_sum, mut kd_sum, mut tokens) = (0.0f64, 0.0f64, 0usize);
        let mut loss = |g: &mut Graph, logits, batch: &Batch, targets: &[usize]| -> Result<_> {
            let shape = g.shape(logits).to_vec();
            let t = g.constant(&shape, teacher_logits(teacher, batch)?)?;
            let ce = g.cross_entropy(logits, targets)?;
            let kl = g.kl_divergence_soft(t, logits, temperature)?;
            let (c, k) = (g.item(ce) as f64, g.item(kl) as f64);
            first.get_or_insert((c, k));
            ce_sum += c * targets.len() as f64;
            kd_sum += k * targets.len() as f64;
            tokens += targets.len();
            let a = g.scale(ce, lambda);
            let b = g.scale(kl, 1.0 - lambda);
            g.add(a, b)
        };
        train_model(student, &|_| true, shard, 1, batch_size, &mut sgd, seed, client, &mut epochs_done, &mut loss)?;
        let n = tokens.max(1) as f64;
        history.push(HistoryEntry::new(epoch as u32, Some(client), "distill_ce", ce_sum / n));
        history.push(HistoryEntry::new(epoch as u32, Some(client), "distill_kd", kd_sum / n));
    }
    if let Some((c, k)) = first {
        history.insert(0, HistoryEntry::new(0, Some(client), "kd_initial", k));
        history.insert(0, HistoryEntry::new(0, Some(client), "ce_initial", c));
    }
    Ok(history)
}

/// Frozen teacher logits for a packed batch.
pub(crate) fn teacher_logits(teacher: &MiniLM, batch: &Batch) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let vars = teacher.bind(&mut g, |_| false);
    let out = teacher.forward_graph(&mut g, &vars, batch, None, None)?;
    Ok(g.value(out).to_vec())
}

/// FedHeteroLLM: each client distills its private model into a mentee of a
/// shared architecture once, then the mentees' adapters are federated with
/// the homogeneous protocol.
pub fn run_fedheterollm(
    clients: &[HeteroClient],
    adapter: &AdapterSpec,
    plan: &TrainerPlan,
    eval: Option<&[Sequence]>,
) -> Result<HeteroRun> {
    plan.validate()?;
    let Some(first) = clients.first() else {
        return Err(Error::Protocol("federation needs at least one client".into()));
    };
    if let Some(c) = clients.iter().find(|c| c.mentee != first.mentee) {
        return Err(Error::Protocol(format!("client {} uses a different mentee config", c.id)));
    }
    let mut mentees = Vec::with_capacity(clients.len());
    let mut distill_history = Vec::new();
    for c in clients {
        let mut student = MiniLM::new(c.mentee)?;
        if plan.kd.epochs > 0 {
            let h = distill(&c.teacher, &mut student, &c.shard, &plan.kd, plan.kd_lr(), plan.batch_size, plan.seed, c.id)?;
            distill_history.extend(h);
        }
        mentees.push(Arc::new(student));
    }
    let mut states = Vec::with_capacity(clients.len());
    for (c, m) in clients.iter().zip(&mentees) {
        let adapters = attach(m, adapter, plan.seed)?;
        states.push(ClientState::new(c.id, m.clone(), adapters, c.shard.clone(), plan));
    }
    let homo = run_fedhomollm(&mut states, plan, eval)?;
    Ok(HeteroRun { mentees, distill_history, homo })
}
