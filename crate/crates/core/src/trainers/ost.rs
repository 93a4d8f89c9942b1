use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fed::{Payload, RoundMessage, SimNetwork, SERVER_ID};
use crate::metrics::token_nll;
use crate::model::{MiniLM, ModelConfig};
use crate::optim::Sgd;
use crate::peft::Layout;
use crate::tensor::Tensor;
use crate::trainers::local::train_model;
use crate::trainers::{federate, FedRun, HistoryEntry, LocalUpdate, Participant, RoundHooks, Sequence, TrainerPlan};

/// A client's private data for offsite-tuning.
#[derive(Debug, Clone)]
pub struct OstClient {
    pub id: u32,
    pub shard: Vec<Sequence>,
}

/// Bottom adaptor, layer-dropped middle, top adaptor, assembled into one
/// model. Block `j` of `model` is block `source_layers[j]` of the server model.
#[derive(Debug, Clone)]
pub struct Emulator {
    pub source_layers: Vec<usize>,
    pub n_bottom: usize,
    pub n_top: usize,
    pub model: MiniLM,
}

/// Block index encoded in a parameter name such as `blocks.3.wq`.
fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

/// Renames an assembled-model parameter to the server block it stands for.
fn server_name(name: &str, source_layers: &[usize]) -> String {
    match block_index(name) {
        Some(j) => {
            let rest = &name["blocks.".len() + j.to_string().len()..];
            format!("blocks.{}{rest}", source_layers[j])
        }
        None => name.to_string(),
    }
}

fn is_adaptor(name: &str, depth: usize, n_bottom: usize, n_top: usize) -> bool {
    match block_index(name) {
        Some(j) => j < n_bottom || j >= depth - n_top,
        None => name.starts_with("ln_f."),
    }
}

/// Copies `values` into the tensors of `params` named in `layout`. Every
/// layout entry must be matched exactly once with the same shape.
fn write_named<'a>(
    params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
    layout: &Layout,
    values: &[f32],
) -> Result<()> {
    if values.len() != layout.total_len() {
        return Err(Error::Protocol(format!("got {} values for a layout of {}", values.len(), layout.total_len())));
    }
    let index: HashMap<&str, usize> = layout.entries.iter().enumerate().map(|(i, e)| (e.name.as_str(), i)).collect();
    let mut seen = vec![false; layout.entries.len()];
    for (name, t) in params {
        let Some(&i) = index.get(name.as_str()) else { continue };
        let e = &layout.entries[i];
        if e.shape != t.shape() || seen[i] {
            return Err(Error::Protocol(format!("tensor {name} does not match the layout entry {:?}", e.shape)));
        }
        seen[i] = true;
        let len = t.numel();
        t.data_mut().copy_from_slice(&values[e.offset..e.offset + len]);
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Protocol(format!("layout entry {} has no matching tensor", layout.entries[i].name)));
    }
    Ok(())
}

impl Emulator {
    pub fn depth(&self) -> usize {
        self.source_layers.len()
    }

    /// Server block indices of the frozen middle blocks.
    pub fn kept_middle(&self) -> &[usize] {
        &self.source_layers[self.n_bottom..self.depth() - self.n_top]
    }

    /// Middle blocks of the server that never leave it.
    pub fn dropped_layers(&self, server_layers: usize) -> Vec<usize> {
        let middle = self.n_bottom..server_layers - self.n_top;
        middle.filter(|l| !self.kept_middle().contains(l)).collect()
    }

    fn adaptor_params<'a>(&self, model: &'a MiniLM) -> Vec<(String, &'a Tensor)> {
        let depth = self.depth();
        model
            .named_params()
            .into_iter()
            .filter(|(n, _)| is_adaptor(n, depth, self.n_bottom, self.n_top))
            .map(|(n, t)| (server_name(&n, &self.source_layers), t))
            .collect()
    }

    /// Layout of the trainable adaptors under server parameter names.
    pub fn adaptor_layout(&self) -> Layout {
        Layout::of(self.adaptor_params(&self.model))
    }

    /// Current adaptor values of an assembled model.
    pub fn adaptor_values(&self, model: &MiniLM) -> Vec<f32> {
        self.adaptor_params(model).into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    /// The frozen part sent to clients once: embeddings and kept middle blocks.
    pub fn frozen_payload(&self) -> (Vec<f32>, Layout) {
        let depth = self.depth();
        let frozen: Vec<(String, &Tensor)> = self
            .model
            .named_params()
            .into_iter()
            .filter(|(n, _)| !is_adaptor(n, depth, self.n_bottom, self.n_top))
            .map(|(n, t)| (server_name(&n, &self.source_layers), t))
            .collect();
        let values = frozen.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        (values, Layout::of(frozen))
    }

    /// Writes adaptor values into the server model around its true middle stack.
    pub fn plug_into(&self, server: &MiniLM, values: &[f32]) -> Result<MiniLM> {
        let mut out = server.clone();
        write_named(out.named_params_mut(), &self.adaptor_layout(), values)?;
        Ok(out)
    }
}

/// Keeps the first `keep_bottom` and last `keep_top` blocks as adaptors and
/// every `keep_every`-th middle block as the frozen emulator.
pub fn build_emulator(server: &MiniLM, keep_bottom: usize, keep_top: usize, keep_every: usize) -> Result<Emulator> {
    let n = server.config().n_layers;
    if keep_bottom + keep_top >= n {
        return Err(Error::Config(format!(
            "keep_bottom + keep_top = {} must be below the server depth {n}",
            keep_bottom + keep_top
        )));
    }
    if keep_every == 0 {
        return Err(Error::Config("keep_every must be at least 1".into()));
    }
    let mut source_layers: Vec<usize> = (0..keep_bottom).collect();
    source_layers.extend((keep_bottom..n - keep_top).step_by(keep_every));
    source_layers.extend(n - keep_top..n);
    let blocks = source_layers.iter().map(|&l| server.blocks[l].clone()).collect();
    let model = MiniLM::from_parts(
        *server.config(),
        server.tok_emb.clone(),
        server.pos_emb.clone(),
        blocks,
        server.ln_f.clone(),
    )?;
    Ok(Emulator { source_layers, n_bottom: keep_bottom, n_top: keep_top, model })
}

/// Client side: an assembled model rebuilt from what the server sent.
struct OstParticipant {
    id: u32,
    shard: Vec<Sequence>,
    model: MiniLM,
    source_layers: Vec<usize>,
    n_bottom: usize,
    n_top: usize,
    layout: Layout,
    sgd: Sgd,
    batch_size: usize,
    seed: u64,
    epochs_done: u64,
}

impl OstParticipant {
    fn adaptor_names(&self) -> impl Fn(&str) -> bool + '_ {
        let depth = self.source_layers.len();
        move |n: &str| is_adaptor(n, depth, self.n_bottom, self.n_top)
    }
}

impl Participant for OstParticipant {
    fn id(&self) -> u32 {
        self.id
    }

    fn train(&mut self, epochs: usize) -> Result<LocalUpdate> {
        let depth = self.source_layers.len();
        let (n_bottom, n_top) = (self.n_bottom, self.n_top);
        let trainable = move |n: &str| is_adaptor(n, depth, n_bottom, n_top);
        let mut loss = |g: &mut crate::autograd::Graph, logits, _: &crate::model::Batch, targets: &[usize]| {
            g.cross_entropy(logits, targets)
        };
        let epoch_losses = train_model(
            &mut self.model,
            &trainable,
            &self.shard,
            epochs,
            self.batch_size,
            &mut self.sgd,
            self.seed,
            self.id,
            &mut self.epochs_done,
            &mut loss,
        )?;
        let select = self.adaptor_names();
        let values =
            self.model.named_params().into_iter().filter(|(n, _)| select(n)).flat_map(|(_, t)| t.data().to_vec()).collect();
        Ok(LocalUpdate { values, layout: self.layout.clone(), sample_count: self.shard.len() as u64, epoch_losses })
    }

    fn load(&mut self, values: &[f32]) -> Result<()> {
        let names: Vec<bool> = {
            let select = self.adaptor_names();
            self.model.named_params().iter().map(|(n, _)| select(n)).collect()
        };
        let sources = self.source_layers.clone();
        let params = self
            .model
            .named_params_mut()
            .into_iter()
            .zip(names)
            .filter(|(_, keep)| *keep)
            .map(|((n, t), _)| (server_name(&n, &sources), t));
        write_named(params, &self.layout, values)
    }
}

/// Rebuilds the client's assembled model from the one-time frozen payload;
/// adaptor blocks stay zero until the first broadcast.
fn assemble_client(cfg: ModelConfig, emu: &Emulator, msg: &RoundMessage) -> Result<MiniLM> {
    let Payload::Plain(values) = &msg.payload else {
        return Err(Error::Protocol("the emulator must be sent as a plain payload".into()));
    };
    let mut model = MiniLM::skeleton(ModelConfig { n_layers: emu.depth(), ..cfg });
    let params = model.named_params_mut().into_iter().map(|(n, t)| (server_name(&n, &emu.source_layers), t));
    write_named(params, &msg.layout, values)?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct OstRun {
    /// Server model with the federated adaptors around its true middle stack.
    pub plugged: MiniLM,
    pub emulator: Emulator,
    pub run: FedRun,
    /// Size of the one-time frozen-emulator message sent to each client.
    pub emulator_bytes: u64,
}

struct OstHooks<'a> {
    server: &'a MiniLM,
    emulator: &'a Emulator,
    eval: Option<&'a [Sequence]>,
}

impl RoundHooks for OstHooks<'_> {
    fn evaluate(&mut self, round: u32, global: &[f32], history: &mut Vec<HistoryEntry>) -> Result<()> {
        if let Some(data) = self.eval {
            let plugged = self.emulator.plug_into(self.server, global)?;
            let (nll, n) = token_nll(&plugged, None, data)?;
            history.push(HistoryEntry::new(round, None, "eval_loss", nll / n.max(1) as f64));
        }
        Ok(())
    }
}

/// FedOST: the server sends the embeddings and a layer-dropped emulator once,
/// clients federate the two boundary adaptors against it, and the server
/// plugs the result around its full middle stack.
pub fn run_fedost(
    server: &MiniLM,
    clients: &[OstClient],
    plan: &TrainerPlan,
    eval: Option<&[Sequence]>,
) -> Result<OstRun> {
    plan.validate()?;
    if clients.is_empty() {
        return Err(Error::Protocol("federation needs at least one client".into()));
    }
    let emulator = build_emulator(server, plan.ost.keep_bottom, plan.ost.keep_top, plan.ost.keep_every)?;
    let layout = emulator.adaptor_layout();
    let (frozen, frozen_layout) = emulator.frozen_payload();
    let msg = RoundMessage::plain(0, SERVER_ID, frozen, frozen_layout, 1);
    let emulator_bytes = msg.byte_size();
    let mut net = SimNetwork::new();
    let mut parts = Vec::with_capacity(clients.len());
    for c in clients {
        let got = net.downlink(c.id, &msg)?;
        parts.push(OstParticipant {
            id: c.id,
            shard: c.shard.clone(),
            model: assemble_client(*server.config(), &emulator, &got)?,
            source_layers: emulator.source_layers.clone(),
            n_bottom: emulator.n_bottom,
            n_top: emulator.n_top,
            layout: layout.clone(),
            sgd: Sgd::from_config(&plan.optimizer),
            batch_size: plan.batch_size,
            seed: plan.seed,
            epochs_done: 0,
        });
    }
    let initial = (emulator.adaptor_values(&emulator.model), layout.clone());
    let mut hooks = OstHooks { server, emulator: &emulator, eval };
    let (global, history) = federate(&mut parts, plan, initial, &mut net, &mut hooks)?;
    let plugged = emulator.plug_into(server, &global)?;
    let names_to_clients = net.names_sent_to_clients().clone();
    Ok(OstRun {
        plugged,
        emulator,
        run: FedRun { global, layout, history, ledger: net.into_ledger(), names_to_clients },
        emulator_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server(layers: usize) -> MiniLM {
        MiniLM::new(ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 16, n_layers: layers, ..ModelConfig::default() })
            .unwrap()
    }

    #[test]
    fn eight_layer_split() {
        let s = server(8);
        let e = build_emulator(&s, 2, 2, 2).unwrap();
        assert_eq!(e.source_layers, vec![0, 1, 2, 4, 6, 7]);
        assert_eq!(e.kept_middle(), &[2, 4]);
        assert_eq!(e.depth(), 6);
        assert_eq!(e.dropped_layers(8), vec![3, 5]);
        assert!(matches!(build_emulator(&s, 4, 4, 2), Err(Error::Config(_))));
        assert!(matches!(build_emulator(&s, 1, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn keeping_every_block_is_the_server() {
        let s = server(4);
        let e = build_emulator(&s, 1, 1, 1).unwrap();
        let toks = [1u32, 5, 9, 200, 3];
        assert_eq!(e.model.forward(&toks, None).unwrap(), s.forward(&toks, None).unwrap());
    }

    #[test]
    fn server_names_follow_source_layers() {
        assert_eq!(server_name("blocks.3.ln1.gain", &[0, 1, 2, 6]), "blocks.6.ln1.gain");
        assert_eq!(server_name("tok_emb", &[0]), "tok_emb");
        let s = server(4);
        let e = build_emulator(&s, 1, 1, 2).unwrap();
        let names: Vec<String> = e.adaptor_layout().entries.into_iter().map(|x| x.name).collect();
        assert!(names.iter().any(|n| n.starts_with("blocks.3.")));
        assert!(names.iter().all(|n| !n.starts_with("blocks.1.") && !n.starts_with("blocks.2.")));
        assert_eq!(names.last().unwrap(), "ln_f.bias");
    }

    #[test]
    fn plug_rejects_short_vectors() {
        let s = server(4);
        let e = build_emulator(&s, 1, 1, 2).unwrap();
        let v = e.adaptor_values(&e.model);
        assert_eq!(e.plug_into(&s, &v).unwrap(), s);
        assert!(matches!(e.plug_into(&s, &v[1..]), Err(Error::Protocol(_))));
    }
}
