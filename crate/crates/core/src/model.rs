//! Tiny pre-norm decoder-only transformer with a byte-level vocabulary.
//!
//! Linear weights use the `[d_out × d_in]` layout and carry no bias. The LM
//! head is tied to the token embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::peft::{AdapterSet, AdapterVars, Target};
use crate::tensor::{Scalar, Tensor};

pub const BYTE_VOCAB: usize = 256;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d + 4 * d * d + 2 * d * self.d_ff;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_block + 2 * d
    }

    /// `(d_in, d_out)` of a projection matrix.
    pub fn target_dims(&self, target: Target) -> (usize, usize) {
        let d = self.d_model;
        match target {
            Target::Wq | Target::Wk | Target::Wv | Target::Wo => (d, d),
            Target::Win => (d, self.d_ff),
            Target::Wout => (self.d_ff, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Scalar = f32> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub(crate) fn new(d: usize) -> Self {
        Self { gain: Tensor::full(&[d], T::one()), bias: Tensor::zeros(&[d]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar = f32> {
    pub ln1: LayerNorm<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2: LayerNorm<T>,
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(d),
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            wv: Tensor::randn(&[d, d], INIT_STD, rng),
            wo: Tensor::randn(&[d, d], INIT_STD, rng),
            ln2: LayerNorm::new(d),
            w_in: Tensor::randn(&[cfg.d_ff, d], INIT_STD, rng),
            w_out: Tensor::randn(&[d, cfg.d_ff], INIT_STD, rng),
        }
    }

    /// Zero weights with unit layer-norm gains.
    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(d),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2: LayerNorm::new(d),
            w_in: Tensor::zeros(&[cfg.d_ff, d]),
            w_out: Tensor::zeros(&[d, cfg.d_ff]),
        }
    }

    pub fn weight(&self, target: Target) -> &Tensor<T> {
        match target {
            Target::Wq => &self.wq,
            Target::Wk => &self.wk,
            Target::Wv => &self.wv,
            Target::Wo => &self.wo,
            Target::Win => &self.w_in,
            Target::Wout => &self.w_out,
        }
    }

    pub fn weight_mut(&mut self, target: Target) -> &mut Tensor<T> {
        match target {
            Target::Wq => &mut self.wq,
            Target::Wk => &mut self.wk,
            Target::Wv => &mut self.wv,
            Target::Wo => &mut self.wo,
            Target::Win => &mut self.w_in,
            Target::Wout => &mut self.w_out,
        }
    }

    /// Parameters in serialization order, with names relative to the block.
    pub fn named_params(&self) -> [(&'static str, &Tensor<T>); 10] {
        [
            ("ln1.gain", &self.ln1.gain),
            ("ln1.bias", &self.ln1.bias),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gain", &self.ln2.gain),
            ("ln2.bias", &self.ln2.bias),
            ("mlp.w_in", &self.w_in),
            ("mlp.w_out", &self.w_out),
        ]
    }

    pub fn named_params_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 10] {
        [
            ("ln1.gain", &mut self.ln1.gain),
            ("ln1.bias", &mut self.ln1.bias),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln2.gain", &mut self.ln2.gain),
            ("ln2.bias", &mut self.ln2.bias),
            ("mlp.w_in", &mut self.w_in),
            ("mlp.w_out", &mut self.w_out),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            ln1: LayerNorm { gain: self.ln1.gain.cast(), bias: self.ln1.bias.cast() },
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            ln2: LayerNorm { gain: self.ln2.gain.cast(), bias: self.ln2.bias.cast() },
            w_in: self.w_in.cast(),
            w_out: self.w_out.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniLM<T: Scalar = f32> {
    cfg: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    merged: bool,
}

/// Graph handles for one bound copy of a model's parameters.
#[derive(Debug, Clone)]
pub struct ModelVars {
    /// `(name, var, trainable)` in [`MiniLM::named_params`] order.
    pub params: Vec<(String, Var, bool)>,
}

impl ModelVars {
    fn get(&self, i: usize) -> Var {
        self.params[i].1
    }
}

/// Packed batch of token sequences, one [`Segment`] each.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        let mut b = Batch { tokens: Vec::new(), positions: Vec::new(), segments: Vec::new() };
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Data("empty sequence in batch".into()));
            }
            b.segments.push(Segment { start: b.tokens.len(), len: s.len() });
            b.tokens.extend(s.iter().map(|&t| t as usize));
            b.positions.extend(0..s.len());
        }
        if b.tokens.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(b)
    }

    /// Next-token prediction: inputs are `s[..n-1]`, targets `s[1..]`.
    /// Sequences shorter than two tokens are skipped.
    pub fn next_token<S: AsRef<[u32]>>(seqs: &[S]) -> Result<(Self, Vec<usize>)> {
        let usable: Vec<&[u32]> = seqs.iter().map(|s| s.as_ref()).filter(|s| s.len() >= 2).collect();
        let inputs: Vec<&[u32]> = usable.iter().map(|s| &s[..s.len() - 1]).collect();
        let targets = usable.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize)).collect();
        Ok((Self::new(&inputs)?, targets))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Training-time randomness for LoRA dropout; `None` means evaluation.
pub type TrainRng<'a> = Option<&'a mut ChaCha8Rng>;

impl<T: Scalar> MiniLM<T> {
    /// Deterministic Gaussian(0, 0.02) initialization from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let tok_emb = Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng);
        let pos_emb = Tensor::randn(&[cfg.max_seq_len, d], INIT_STD, &mut rng);
        let blocks = (0..cfg.n_layers).map(|_| Block::init(&cfg, &mut rng)).collect();
        Ok(Self { cfg, tok_emb, pos_emb, blocks, ln_f: LayerNorm::new(d), merged: false })
    }

    /// Assembles a model from existing parts; `cfg.n_layers` is taken from `blocks`.
    pub fn from_parts(
        mut cfg: ModelConfig,
        tok_emb: Tensor<T>,
        pos_emb: Tensor<T>,
        blocks: Vec<Block<T>>,
        ln_f: LayerNorm<T>,
    ) -> Result<Self> {
        cfg.n_layers = blocks.len();
        cfg.validate()?;
        let model = Self { cfg, tok_emb, pos_emb, blocks, ln_f, merged: false };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let probe = MiniLM::<T>::skeleton(self.cfg);
        for ((name, a), (_, b)) in self.named_params().iter().zip(probe.named_params()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Zero-filled model with the shapes implied by `cfg`.
    pub(crate) fn skeleton(cfg: ModelConfig) -> Self {
        let d = cfg.d_model;
        let block = Block::zeros(&cfg);
        Self {
            cfg,
            tok_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(&[cfg.max_seq_len, d]),
            blocks: vec![block; cfg.n_layers],
            ln_f: LayerNorm::new(d),
            merged: false,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub(crate) fn set_merged(&mut self) {
        self.merged = true;
    }

    /// Every parameter in a fixed order with its fully qualified name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.bias".into(), &self.ln_f.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_params_mut().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f.gain));
        out.push(("ln_f.bias".into(), &mut self.ln_f.bias));
        out
    }

    /// Parameter count by enumerating tensor shapes.
    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> MiniLM<U> {
        MiniLM {
            cfg: self.cfg,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            ln_f: LayerNorm { gain: self.ln_f.gain.cast(), bias: self.ln_f.bias.cast() },
            merged: self.merged,
        }
    }

    /// Records every parameter on `g`; `trainable(name)` picks which ones
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> ModelVars {
        let params = self
            .named_params()
            .into_iter()
            .map(|(name, t)| {
                let train = trainable(&name);
                let var = g.param(t, train);
                (name, var, train)
            })
            .collect();
        ModelVars { params }
    }

    /// Copies gradients of trainable bound parameters into their tensors.
    pub fn absorb_grads(&mut self, g: &Graph<T>, vars: &ModelVars) -> Result<()> {
        for ((name, t), (bname, var, train)) in self.named_params_mut().into_iter().zip(&vars.params) {
            debug_assert_eq!(&name, bname);
            if !*train {
                continue;
            }
            if let Some(grad) = g.grad(*var) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Logits `[batch.len() × vocab]` for a packed batch.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        batch: &Batch,
        adapters: Option<&AdapterVars>,
        mut rng: TrainRng<'_>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if let Some(seg) = batch.segments.iter().find(|s| s.len > cfg.max_seq_len) {
            return Err(Error::Length { len: seg.len, max: cfg.max_seq_len });
        }
        if let Some(a) = adapters {
            a.check_layers(cfg.n_layers)?;
        }
        let tok = g.embedding(vars.get(0), &batch.tokens)?;
        let pos = g.embedding(vars.get(1), &batch.positions)?;
        let mut x = g.add(tok, pos)?;
        for layer in 0..cfg.n_layers {
            let base = 2 + layer * 10;
            let p = |k: usize| vars.get(base + k);
            let lin = |g: &mut Graph<T>, h: Var, w: Var, t: Target, rng: &mut TrainRng<'_>| -> Result<Var> {
                let y = g.matmul_t(h, w)?;
                match adapters.and_then(|a| a.lora(layer, t)) {
                    Some(lora) => lora.apply(g, h, y, rng),
                    None => Ok(y),
                }
            };
            let h = g.layer_norm(x, p(0), p(1))?;
            let q = lin(g, h, p(2), Target::Wq, &mut rng)?;
            let k = lin(g, h, p(3), Target::Wk, &mut rng)?;
            let v = lin(g, h, p(4), Target::Wv, &mut rng)?;
            let (prefix, mask_prefix) = match adapters {
                Some(a) => (a.prefix(layer), a.mask_prefix),
                None => (None, false),
            };
            let att = g.attention(
                q,
                k,
                v,
                AttentionSpec { segments: &batch.segments, heads: cfg.n_heads, prefix, mask_prefix },
            )?;
            let o = lin(g, att, p(5), Target::Wo, &mut rng)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, p(6), p(7))?;
            let u = lin(g, h, p(8), Target::Win, &mut rng)?;
            let u = g.gelu(u);
            let m = lin(g, u, p(9), Target::Wout, &mut rng)?;
            x = g.add(x, m)?;
        }
        let n = vars.params.len();
        let x = g.layer_norm(x, vars.get(n - 2), vars.get(n - 1))?;
        g.matmul_t(x, vars.get(0))
    }

    /// Logits `[len × vocab]` for one sequence; base weights are never modified.
    pub fn forward(&self, tokens: &[u32], adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        let avars = adapters.map(|a| a.bind(&mut g, false)).transpose()?;
        let batch = Batch::new(&[tokens])?;
        let logits = self.forward_graph(&mut g, &vars, &batch, avars.as_ref(), None)?;
        Ok(g.tensor(logits))
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Length { len: tokens.len(), max: self.cfg.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Index { what: "vocabulary", index: t as usize, bound: self.cfg.vocab_size });
        }
        Ok(())
    }
}

/// Byte-level tokenizer: token id == byte value.
pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().map(|&t| t.min(255) as u8).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    TopK(usize),
}

impl MiniLM<f32> {
    /// Autoregressive continuation of `prompt`. The context window slides
    /// once it exceeds `max_seq_len`.
    pub fn generate(
        &self,
        prompt: &[u8],
        max_new: usize,
        mode: Decoding,
        seed: u64,
        adapters: Option<&AdapterSet<f32>>,
    ) -> Result<Vec<u8>> {
        let mut tokens = encode(prompt);
        if max_new == 0 {
            return Ok(prompt.to_vec());
        }
        if tokens.is_empty() {
            return Err(Error::Data("generation needs a non-empty prompt".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window = self.cfg.max_seq_len;
        for _ in 0..max_new {
            let ctx = &tokens[tokens.len().saturating_sub(window)..];
            let logits = self.forward(ctx, adapters)?;
            let vocab = self.cfg.vocab_size;
            let last = &logits.data()[(ctx.len() - 1) * vocab..];
            let next = match mode {
                Decoding::Greedy => argmax(last),
                Decoding::TopK(k) => sample_top_k(last, k.max(1), &mut rng),
            };
            tokens.push(next as u32);
        }
        Ok(decode(&tokens))
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k<R: Rng>(row: &[f32], k: usize, rng: &mut R) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps ties in index order, so sampling stays reproducible.
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    let max = row[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| ((row[i] - max) as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in idx.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    idx[idx.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> ModelConfig {
        ModelConfig { seed: 7, ..ModelConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(desk().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..desk() };
        assert!(matches!(MiniLM::<f32>::new(bad), Err(Error::Config(_))));
        let bad = ModelConfig { max_seq_len: 1, ..desk() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { d_ff: 0, ..desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_weights_different_seed_differs() {
        let a = MiniLM::<f32>::new(desk()).unwrap();
        let b = MiniLM::<f32>::new(desk()).unwrap();
        assert_eq!(a, b);
        let c = MiniLM::<f32>::new(ModelConfig { seed: 8, ..desk() }).unwrap();
        assert_ne!(a.blocks[0].wq, c.blocks[0].wq);
    }

    #[test]
    fn layer_norm_init() {
        let m = MiniLM::<f32>::new(desk()).unwrap();
        assert!(m.ln_f.gain.data().iter().all(|&x| x == 1.0));
        assert!(m.blocks[1].ln2.bias.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let m = MiniLM::<f32>::new(ModelConfig { max_seq_len: 4, ..desk() }).unwrap();
        assert!(matches!(m.forward(&[1, 2, 3, 4, 5], None), Err(Error::Length { len: 5, max: 4 })));
        assert!(m.forward(&[1, 2, 3, 4], None).is_ok());
    }

    #[test]
    fn forward_shape() {
        let m = MiniLM::<f32>::new(desk()).unwrap();
        let logits = m.forward(&encode(b"hello"), None).unwrap();
        assert_eq!(logits.shape(), &[5, 256]);
        assert!(logits.is_finite());
    }

    #[test]
    fn generate_contracts() {
        let m = MiniLM::<f32>::new(desk()).unwrap();
        assert_eq!(m.generate(b"abc", 0, Decoding::Greedy, 0, None).unwrap(), b"abc");
        let a = m.generate(b"abc", 5, Decoding::Greedy, 1, None).unwrap();
        let b = m.generate(b"abc", 5, Decoding::Greedy, 2, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let a = m.generate(b"abc", 5, Decoding::TopK(8), 3, None).unwrap();
        let b = m.generate(b"abc", 5, Decoding::TopK(8), 3, None).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"abc"));
    }

    #[test]
    fn generation_slides_past_the_window() {
        let m = MiniLM::<f32>::new(ModelConfig { max_seq_len: 4, ..desk() }).unwrap();
        let out = m.generate(b"abc", 6, Decoding::Greedy, 0, None).unwrap();
        assert_eq!(out.len(), 9);
    }
}
