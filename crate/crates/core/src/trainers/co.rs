use std::sync::Arc;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::metrics::token_nll;
use crate::model::{Batch, MiniLM};
use crate::optim::Sgd;
use crate::peft::AdapterSet;
use crate::trainers::hetero::teacher_logits;
use crate::trainers::local::{run_epochs, step_all};
use crate::trainers::{
    run_homo_with, ClientState, HistoryEntry, HomoRun, RoundHooks, Sequence, TrainerPlan,
};

#[derive(Debug, Clone)]
pub struct CoRun {
    pub server: MiniLM,
    pub homo: HomoRun,
}

/// Logits of the client-side model (shared base plus global adapters).
fn small_logits(base: &MiniLM, adapters: &AdapterSet, batch: &Batch) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let vars = base.bind(&mut g, |_| false);
    let av = adapters.bind(&mut g, false)?;
    let out = base.forward_graph(&mut g, &vars, batch, Some(&av), None)?;
    Ok(g.value(out).to_vec())
}

struct CoHooks<'a> {
    server: MiniLM,
    base: Arc<MiniLM>,
    template: AdapterSet,
    proxy: &'a [Sequence],
    eval: Option<&'a [Sequence]>,
    plan: &'a TrainerPlan,
    epochs_small: u64,
    epochs_server: u64,
}

impl CoHooks<'_> {
    fn eval_loss(&self, round: u32, history: &mut Vec<HistoryEntry>, metric: &str) -> Result<()> {
        if let Some(data) = self.eval {
            let (nll, n) = token_nll(&self.server, None, data)?;
            history.push(HistoryEntry::new(round, None, metric, nll / n.max(1) as f64));
        }
        Ok(())
    }

    /// Large → small: the aggregated adapters learn the server's soft targets.
    fn distill_into_small(&mut self) -> Result<Vec<f64>> {
        let t = self.plan.kd.temperature as f32;
        let mut sgd = Sgd::new(self.plan.kd_lr(), None);
        let (server, base, adapters) = (&self.server, &self.base, &mut self.template);
        run_epochs(self.proxy, self.plan.batch_size, self.plan.kd.epochs, self.plan.seed, u32::MAX, &mut self.epochs_small, |batch, _| {
            let (b, _) = Batch::next_token(batch)?;
            let teacher = teacher_logits(server, &b)?;
            let mut g = Graph::new();
            let vars = base.bind(&mut g, |_| false);
            let av = adapters.bind(&mut g, true)?;
            let logits = base.forward_graph(&mut g, &vars, &b, Some(&av), None)?;
            let shape = g.shape(logits).to_vec();
            let tv = g.constant(&shape, teacher)?;
            let loss = g.kl_divergence_soft(tv, logits, t)?;
            g.backward(loss)?;
            adapters.absorb_grads(&g, &av)?;
            step_all(&mut sgd, adapters.tensors_mut())?;
            Ok((g.item(loss) as f64, b.len()))
        })
    }

    /// Small → large: the server model learns the aggregated model's soft targets.
    fn distill_into_server(&mut self) -> Result<Vec<f64>> {
        let t = self.plan.kd.temperature as f32;
        let mut sgd = Sgd::new(self.plan.kd_lr(), None);
        let (server, base, adapters) = (&mut self.server, &self.base, &self.template);
        run_epochs(self.proxy, self.plan.batch_size, self.plan.kd.epochs, self.plan.seed, u32::MAX - 1, &mut self.epochs_server, |batch, _| {
            let (b, _) = Batch::next_token(batch)?;
            let teacher = small_logits(base, adapters, &b)?;
            let mut g = Graph::new();
            let vars = server.bind(&mut g, |_| true);
            let logits = server.forward_graph(&mut g, &vars, &b, None, None)?;
            let shape = g.shape(logits).to_vec();
            let tv = g.constant(&shape, teacher)?;
            let loss = g.kl_divergence_soft(tv, logits, t)?;
            g.backward(loss)?;
            server.absorb_grads(&g, &vars)?;
            step_all(&mut sgd, server.named_params_mut().into_iter().map(|(_, p)| p).collect())?;
            Ok((g.item(loss) as f64, b.len()))
        })
    }
}

impl RoundHooks for CoHooks<'_> {
    fn after_aggregate(&mut self, round: u32, global: &mut Vec<f32>, history: &mut Vec<HistoryEntry>) -> Result<()> {
        if self.plan.kd.epochs == 0 {
            return Ok(());
        }
        self.eval_loss(round, history, "server_eval_loss_before")?;
        self.template.unflatten(global)?;
        let small = self.distill_into_small()?;
        let large = self.distill_into_server()?;
        *global = self.template.flat_values();
        if let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            history.push(HistoryEntry::new(round, None, "kd_small_loss", s));
            history.push(HistoryEntry::new(round, None, "kd_server_loss", l));
        }
        self.eval_loss(round, history, "server_eval_loss")
    }

    fn evaluate(&mut self, round: u32, global: &[f32], history: &mut Vec<HistoryEntry>) -> Result<()> {
        if let Some(data) = self.eval {
            self.template.unflatten(global)?;
            let (nll, n) = token_nll(&self.base, Some(&self.template), data)?;
            history.push(HistoryEntry::new(round, None, "eval_loss", nll / n.max(1) as f64));
        }
        Ok(())
    }
}

/// FedCoLLM: a FedHomoLLM round per round, then bidirectional distillation
/// on a public proxy set between the server's larger model and the
/// aggregated client model. The updated adapters are what gets broadcast.
pub fn run_fedcollm(
    server: MiniLM,
    clients: &mut [ClientState],
    proxy: &[Sequence],
    plan: &TrainerPlan,
    eval: Option<&[Sequence]>,
) -> Result<CoRun> {
    plan.validate()?;
    if proxy.iter().all(|s| s.len() < 2) {
        return Err(Error::Config("co-tuning needs a non-empty public proxy dataset".into()));
    }
    let Some(first) = clients.first() else {
        return Err(Error::Protocol("federation needs at least one client".into()));
    };
    if server.config().vocab_size != first.base.config().vocab_size {
        return Err(Error::Config("server and client models must share a vocabulary".into()));
    }
    if server.num_params() <= first.base.num_params() {
        return Err(Error::Config(format!(
            "server model ({} parameters) must be larger than the client model ({})",
            server.num_params(),
            first.base.num_params()
        )));
    }
    let mut hooks = CoHooks {
        server,
        base: first.base.clone(),
        template: first.adapters.clone(),
        proxy,
        eval,
        plan,
        epochs_small: 0,
        epochs_server: 0,
    };
    let homo = run_homo_with(clients, plan, &mut hooks)?;
    Ok(CoRun { server: hooks.server, homo })
}
