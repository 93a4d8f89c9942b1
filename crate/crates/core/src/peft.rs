//! Parameter-efficient adapters: LoRA and per-layer prefix tuning.
//!
//! An [`AdapterSet`] holds the only tensors that train and cross the wire.
//! Entries are kept sorted by [`SlotKey`], which fixes the flattened layout:
//! layer index first, then target matrix, then role (A before B, K before V).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{MiniLM, ModelConfig, TrainRng};
use crate::tensor::{gemm_nn, Scalar, Tensor};

const INIT_STD: f64 = 0.02;

/// Projection matrices a LoRA pair can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Wq,
    Wk,
    Wv,
    Wo,
    Win,
    Wout,
}

impl Target {
    pub const ALL: [Target; 6] = [Target::Wq, Target::Wk, Target::Wv, Target::Wo, Target::Win, Target::Wout];

    pub fn name(self) -> &'static str {
        match self {
            Target::Wq => "wq",
            Target::Wk => "wk",
            Target::Wv => "wv",
            Target::Wo => "wo",
            Target::Win => "w_in",
            Target::Wout => "w_out",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
    pub dropout: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, targets: vec![Target::Wq, Target::Wv], dropout: 0.0 }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn sorted_targets(&self) -> Vec<Target> {
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        t
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} not in [0, 1)", self.dropout)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target matrix".into()));
        }
        for &t in &self.targets {
            let (din, dout) = cfg.target_dims(t);
            if self.rank > din.min(dout) {
                return Err(Error::Config(format!(
                    "LoRA rank {} exceeds min(d_in, d_out) = {} of {}",
                    self.rank,
                    din.min(dout),
                    t.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefixSpec {
    pub len: usize,
    /// Hidden width of the optional MLP reparameterization.
    pub reparam_hidden: Option<usize>,
}

impl Default for PrefixSpec {
    fn default() -> Self {
        Self { len: 16, reparam_hidden: None }
    }
}

impl PrefixSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.len == 0 {
            return Err(Error::Config("prefix length must be positive".into()));
        }
        if self.len > cfg.max_seq_len / 2 {
            return Err(Error::Config(format!(
                "prefix length {} exceeds max_seq_len / 2 = {}",
                self.len,
                cfg.max_seq_len / 2
            )));
        }
        if self.reparam_hidden == Some(0) {
            return Err(Error::Config("reparam hidden size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterSpec {
    Lora(LoraSpec),
    Prefix(PrefixSpec),
}

impl AdapterSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            AdapterSpec::Lora(_) => "lora",
            AdapterSpec::Prefix(_) => "prefix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    LoraA,
    LoraB,
    PrefixK,
    PrefixV,
    Embed,
    W1,
    B1,
    W2,
    B2,
}

/// Sort key of one adapter tensor. Model-wide tensors (`layer: None`) come first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub layer: Option<usize>,
    pub target: Option<Target>,
    pub role: Role,
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.target, self.role) {
            (Some(l), Some(t), Role::LoraA) => write!(f, "layers.{l}.{}.lora_a", t.name()),
            (Some(l), Some(t), Role::LoraB) => write!(f, "layers.{l}.{}.lora_b", t.name()),
            (Some(l), None, Role::PrefixK) => write!(f, "layers.{l}.prefix.k"),
            (Some(l), None, Role::PrefixV) => write!(f, "layers.{l}.prefix.v"),
            (None, None, Role::Embed) => write!(f, "prefix.embed"),
            (None, None, Role::W1) => write!(f, "prefix.mlp.w1"),
            (None, None, Role::B1) => write!(f, "prefix.mlp.b1"),
            (None, None, Role::W2) => write!(f, "prefix.mlp.w2"),
            (None, None, Role::B2) => write!(f, "prefix.mlp.b2"),
            (l, t, r) => write!(f, "invalid({l:?},{t:?},{r:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Where each named tensor lives inside a flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.shape.iter().product::<usize>())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Builds a layout from named tensors, laid out back to back.
    pub fn of<'a, T: Scalar + 'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> Self {
        let mut offset = 0;
        let entries = tensors
            .into_iter()
            .map(|(name, t)| {
                let e = LayoutEntry { name, offset, shape: t.shape().to_vec() };
                offset += t.numel();
                e
            })
            .collect();
        Self { entries }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry<T: Scalar = f32> {
    pub key: SlotKey,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Scalar = f32> {
    spec: AdapterSpec,
    cfg: ModelConfig,
    entries: Vec<AdapterEntry<T>>,
}

/// LoRA factors bound to a graph for one projection.
#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    scale: f64,
    dropout: f64,
}

impl LoraVars {
    /// `y + scale · drop(x)·Aᵀ·Bᵀ`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var, y: Var, rng: &mut TrainRng<'_>) -> Result<Var> {
        let x = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask: Vec<T> = (0..g.value(x).len())
                    .map(|_| if rng.random::<f64>() < keep { T::of(1.0 / keep) } else { T::zero() })
                    .collect();
                let shape = g.shape(x).to_vec();
                let m = g.constant(&shape, mask)?;
                g.mul(x, m)?
            }
            _ => x,
        };
        let down = g.matmul_t(x, self.a)?;
        let up = g.matmul_t(down, self.b)?;
        let up = g.scale(up, T::of(self.scale));
        g.add(y, up)
    }
}

/// Adapter tensors bound to a graph.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    /// One var per entry, in layout order.
    pub entries: Vec<(SlotKey, Var)>,
    lora: Vec<[Option<LoraVars>; 6]>,
    prefix: Vec<Option<(Var, Var)>>,
    /// Diagnostic switch: prefix slots get a −∞ attention score.
    pub mask_prefix: bool,
}

impl AdapterVars {
    pub fn lora(&self, layer: usize, target: Target) -> Option<&LoraVars> {
        self.lora.get(layer).and_then(|t| t[target.index()].as_ref())
    }

    pub fn prefix(&self, layer: usize) -> Option<(Var, Var)> {
        self.prefix.get(layer).copied().flatten()
    }

    pub(crate) fn check_layers(&self, n_layers: usize) -> Result<()> {
        if self.lora.len() != n_layers || self.prefix.len() != n_layers {
            return Err(Error::Config(format!(
                "adapters cover {} layers, model has {n_layers}",
                self.lora.len()
            )));
        }
        Ok(())
    }

    /// All adapter parameters as one `[d]` vector, in layout order.
    pub fn flatten<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let parts = self
            .entries
            .iter()
            .map(|&(_, v)| {
                let n = g.value(v).len();
                g.reshape(v, &[n])
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts)
    }
}

impl<T: Scalar> AdapterSet<T> {
    fn from_entries(spec: AdapterSpec, cfg: ModelConfig, mut entries: Vec<AdapterEntry<T>>) -> Self {
        entries.sort_by_key(|e| e.key);
        Self { spec, cfg, entries }
    }

    /// Builds the set for `spec` with `values` in layout order.
    pub fn with_values(spec: &AdapterSpec, cfg: &ModelConfig, values: &[T]) -> Result<Self> {
        let mut set = Self::zeros(spec, cfg)?;
        set.unflatten(values)?;
        Ok(set)
    }

    /// Zero-valued set with the shapes implied by `spec`.
    pub fn zeros(spec: &AdapterSpec, cfg: &ModelConfig) -> Result<Self> {
        let entries = slot_shapes(spec, cfg)?
            .into_iter()
            .map(|(key, shape)| AdapterEntry { key, tensor: Tensor::zeros(&shape).with_grad() })
            .collect();
        Ok(Self::from_entries(spec.clone(), *cfg, entries))
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn entries(&self) -> &[AdapterEntry<T>] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries.iter_mut().map(|e| &mut e.tensor).collect()
    }

    pub fn get(&self, key: &SlotKey) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| &e.key == key).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, key: &SlotKey) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|e| &e.key == key).map(|e| &mut e.tensor)
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn layout(&self) -> Layout {
        Layout::of(self.entries.iter().map(|e| (e.key.to_string(), &e.tensor)))
    }

    pub fn flatten(&self) -> (Vec<T>, Layout) {
        let mut v = Vec::with_capacity(self.num_params());
        for e in &self.entries {
            v.extend_from_slice(e.tensor.data());
        }
        (v, self.layout())
    }

    pub fn flat_values(&self) -> Vec<T> {
        self.flatten().0
    }

    /// Overwrites every tensor from a flattened vector in layout order.
    pub fn unflatten(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dim("unflatten", &[self.num_params()], &[values.len()]));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdapterSet<U> {
        AdapterSet {
            spec: self.spec.clone(),
            cfg: self.cfg,
            entries: self
                .entries
                .iter()
                .map(|e| AdapterEntry { key: e.key, tensor: e.tensor.cast() })
                .collect(),
        }
    }

    /// Records the adapters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<AdapterVars> {
        let n_layers = self.cfg.n_layers;
        let entries: Vec<(SlotKey, Var)> =
            self.entries.iter().map(|e| (e.key, g.param(&e.tensor, trainable))).collect();
        let find = |key: SlotKey| entries.iter().find(|(k, _)| *k == key).map(|&(_, v)| v);
        let mut lora = vec![[None; 6]; n_layers];
        let mut prefix = vec![None; n_layers];
        match &self.spec {
            AdapterSpec::Lora(spec) => {
                for (layer, slots) in lora.iter_mut().enumerate() {
                    for t in spec.sorted_targets() {
                        let key = |role| SlotKey { layer: Some(layer), target: Some(t), role };
                        let a = find(key(Role::LoraA)).ok_or_else(|| missing(key(Role::LoraA)))?;
                        let b = find(key(Role::LoraB)).ok_or_else(|| missing(key(Role::LoraB)))?;
                        slots[t.index()] = Some(LoraVars { a, b, scale: spec.scale(), dropout: spec.dropout });
                    }
                }
            }
            AdapterSpec::Prefix(spec) if spec.reparam_hidden.is_some() => {
                let global = |role| SlotKey { layer: None, target: None, role };
                let get = |role| find(global(role)).ok_or_else(|| missing(global(role)));
                let h = g.matmul_t(get(Role::Embed)?, get(Role::W1)?)?;
                let h = g.add_row(h, get(Role::B1)?)?;
                let h = g.tanh(h);
                let kv = g.matmul_t(h, get(Role::W2)?)?;
                let kv = g.add_row(kv, get(Role::B2)?)?;
                let d = self.cfg.d_model;
                for (layer, slot) in prefix.iter_mut().enumerate() {
                    let k = g.slice_cols(kv, 2 * layer * d, d)?;
                    let v = g.slice_cols(kv, (2 * layer + 1) * d, d)?;
                    *slot = Some((k, v));
                }
            }
            AdapterSpec::Prefix(_) => {
                for (layer, slot) in prefix.iter_mut().enumerate() {
                    let key = |role| SlotKey { layer: Some(layer), target: None, role };
                    let k = find(key(Role::PrefixK)).ok_or_else(|| missing(key(Role::PrefixK)))?;
                    let v = find(key(Role::PrefixV)).ok_or_else(|| missing(key(Role::PrefixV)))?;
                    *slot = Some((k, v));
                }
            }
        }
        Ok(AdapterVars { entries, lora, prefix, mask_prefix: false })
    }

    /// Copies gradients of bound adapter vars into the tensors.
    pub fn absorb_grads(&mut self, g: &Graph<T>, vars: &AdapterVars) -> Result<()> {
        for (e, (key, var)) in self.entries.iter_mut().zip(&vars.entries) {
            debug_assert_eq!(&e.key, key);
            if let Some(grad) = g.grad(*var) {
                e.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}

fn missing(key: SlotKey) -> Error {
    Error::Contract(format!("adapter set has no tensor {key}"))
}

/// Every adapter tensor implied by `spec`, in layout order.
pub fn slot_shapes(spec: &AdapterSpec, cfg: &ModelConfig) -> Result<Vec<(SlotKey, Vec<usize>)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    match spec {
        AdapterSpec::Lora(s) => {
            s.validate(cfg)?;
            for layer in 0..cfg.n_layers {
                for t in s.sorted_targets() {
                    let (din, dout) = cfg.target_dims(t);
                    let key = |role| SlotKey { layer: Some(layer), target: Some(t), role };
                    out.push((key(Role::LoraA), vec![s.rank, din]));
                    out.push((key(Role::LoraB), vec![dout, s.rank]));
                }
            }
        }
        AdapterSpec::Prefix(s) => {
            s.validate(cfg)?;
            let d = cfg.d_model;
            match s.reparam_hidden {
                Some(h) => {
                    let global = |role| SlotKey { layer: None, target: None, role };
                    let width = 2 * cfg.n_layers * d;
                    out.push((global(Role::Embed), vec![s.len, d]));
                    out.push((global(Role::W1), vec![h, d]));
                    out.push((global(Role::B1), vec![h]));
                    out.push((global(Role::W2), vec![width, h]));
                    out.push((global(Role::B2), vec![width]));
                }
                None => {
                    for layer in 0..cfg.n_layers {
                        let key = |role| SlotKey { layer: Some(layer), target: None, role };
                        out.push((key(Role::PrefixK), vec![s.len, d]));
                        out.push((key(Role::PrefixV), vec![s.len, d]));
                    }
                }
            }
        }
    }
    out.sort_by_key(|(k, _)| *k);
    Ok(out)
}

/// LoRA factors with `A ~ N(0, 0.02²)` and `B = 0`, so the initial delta is zero.
pub fn attach_lora<T: Scalar>(model: &MiniLM<T>, spec: &LoraSpec, seed: u64) -> Result<AdapterSet<T>> {
    let full = AdapterSpec::Lora(spec.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = AdapterSet::zeros(&full, model.config())?;
    for e in &mut set.entries {
        if e.key.role == Role::LoraA {
            let t = Tensor::randn(e.tensor.shape(), INIT_STD, &mut rng);
            e.tensor.data_mut().copy_from_slice(t.data());
        }
    }
    Ok(set)
}

/// Prefix key/value slots (or their reparameterization) drawn from `N(0, 0.02²)`;
/// reparameterization biases start at zero.
pub fn attach_prefix<T: Scalar>(model: &MiniLM<T>, spec: &PrefixSpec, seed: u64) -> Result<AdapterSet<T>> {
    let full = AdapterSpec::Prefix(spec.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = AdapterSet::zeros(&full, model.config())?;
    for e in &mut set.entries {
        if matches!(e.key.role, Role::B1 | Role::B2) {
            continue;
        }
        let t = Tensor::randn(e.tensor.shape(), INIT_STD, &mut rng);
        e.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(set)
}

pub fn attach<T: Scalar>(model: &MiniLM<T>, spec: &AdapterSpec, seed: u64) -> Result<AdapterSet<T>> {
    match spec {
        AdapterSpec::Lora(s) => attach_lora(model, s, seed),
        AdapterSpec::Prefix(s) => attach_prefix(model, s, seed),
    }
}

/// Copy of `model` with `W ← W + (alpha/r)·B·A` folded into every target.
pub fn merge_lora<T: Scalar>(model: &MiniLM<T>, adapters: &AdapterSet<T>) -> Result<MiniLM<T>> {
    let AdapterSpec::Lora(spec) = adapters.spec() else {
        return Err(Error::Unsupported("prefix adapters cannot be merged into base weights".into()));
    };
    if model.is_merged() {
        return Err(Error::State("model already has LoRA weights merged in".into()));
    }
    if adapters.model_config() != model.config() {
        return Err(Error::Config("adapter set was built for a different model config".into()));
    }
    let scale = T::of(spec.scale());
    let mut merged = model.clone();
    for (layer, block) in merged.blocks.iter_mut().enumerate() {
        for t in spec.sorted_targets() {
            let key = |role| SlotKey { layer: Some(layer), target: Some(t), role };
            let a = adapters.get(&key(Role::LoraA)).ok_or_else(|| missing(key(Role::LoraA)))?;
            let b = adapters.get(&key(Role::LoraB)).ok_or_else(|| missing(key(Role::LoraB)))?;
            let (dout, r) = (b.shape()[0], b.shape()[1]);
            let din = a.shape()[1];
            let mut delta = vec![T::zero(); dout * din];
            gemm_nn(b.data(), a.data(), &mut delta, dout, r, din);
            for (w, d) in block.weight_mut(t).data_mut().iter_mut().zip(delta) {
                *w = *w + scale * d;
            }
        }
    }
    merged.set_merged();
    Ok(merged)
}

/// Which parameters a fine-tuning run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Full,
    AdapterOnly,
}

/// Bytes of the fine-tuned parameter set at 4 bytes per f32 parameter.
pub fn count_trainable_bytes<T: Scalar>(model: &MiniLM<T>, adapters: Option<&AdapterSet<T>>, mode: TuneMode) -> u64 {
    let params = match mode {
        TuneMode::Full => model.num_params(),
        TuneMode::AdapterOnly => adapters.map_or(0, AdapterSet::num_params),
    };
    4 * params as u64
}
