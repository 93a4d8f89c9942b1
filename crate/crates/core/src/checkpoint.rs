//! Binary tensor containers for models (`FLLM`) and adapters (`FLAD`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [4] | version u16 | config_len u32 | config JSON | tensor_count u32 |
//! tensor* = name_len u32 | name UTF-8 | rank u8 | dims u32 × rank | f32 × numel
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Block, LayerNorm, MiniLM, ModelConfig};
use crate::peft::{AdapterSet, AdapterSpec};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"FLLM";
pub const ADAPTER_MAGIC: &[u8; 4] = b"FLAD";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    model: ModelConfig,
    adapter: AdapterSpec,
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub(crate) fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f32s(t.data());
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(self.format, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::format(self.format, format!("bad UTF-8: {e}")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(self.format, "element count overflows"))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::format(self.format, format!("{name}: dims overflow")))?;
        let data = self.f32s(numel)?;
        let t = Tensor::new(&dims, data).map_err(|e| Error::format(self.format, format!("{name}: {e}")))?;
        Ok((name, t))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.format, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header<T: Serialize>(w: &mut Writer, magic: &[u8; 4], config: &T) -> Result<()> {
    w.bytes(magic);
    w.u16(VERSION);
    let json = serde_json::to_vec(config)?;
    w.u32(json.len() as u32);
    w.bytes(&json);
    Ok(())
}

fn read_header<T: for<'de> Deserialize<'de>>(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<T> {
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::format(r.format, format!("bad magic {m:?}")));
    }
    let v = r.u16()?;
    if v != VERSION {
        return Err(Error::format(r.format, format!("unsupported version {v}")));
    }
    let n = r.u32()? as usize;
    let json = r.take(n)?;
    serde_json::from_slice(json).map_err(|e| Error::format(r.format, format!("config block: {e}")))
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let n = r.u32()? as usize;
    let tensors: Vec<(String, Tensor<f32>)> = (0..n).map(|_| r.tensor()).collect::<Result<_>>()?;
    if let Some((name, _)) = tensors.iter().find(|(_, t)| t.data().iter().any(|x| !x.is_finite())) {
        return Err(Error::format(r.format, format!("{name} holds non-finite values")));
    }
    Ok(tensors)
}

fn expect_names<'a>(
    format: &'static str,
    got: impl Iterator<Item = &'a str>,
    want: impl Iterator<Item = String>,
) -> Result<()> {
    let got: Vec<&str> = got.collect();
    let want: Vec<String> = want.collect();
    if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| a != b) {
        return Err(Error::format(format, format!("tensor names {got:?} do not match expected {want:?}")));
    }
    Ok(())
}

pub fn model_to_bytes(model: &MiniLM) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    header(&mut w, MODEL_MAGIC, model.config())?;
    let params = model.named_params();
    w.u32(params.len() as u32);
    for (name, t) in params {
        w.tensor(&name, t);
    }
    Ok(w.finish())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MiniLM> {
    let mut r = Reader::new(bytes, "FLLM checkpoint");
    let cfg: ModelConfig = read_header(&mut r, MODEL_MAGIC)?;
    cfg.validate()?;
    let tensors = read_tensors(&mut r)?;
    r.finish()?;
    let mut it = tensors.into_iter().map(|(_, t)| t);
    let expected = 2 + 10 * cfg.n_layers + 2;
    if it.len() != expected {
        return Err(Error::format("FLLM checkpoint", format!("expected {expected} tensors, found {}", it.len())));
    }
    let mut next = || it.next().expect("count checked");
    let tok = next();
    let pos = next();
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        blocks.push(Block {
            ln1: LayerNorm { gain: next(), bias: next() },
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln2: LayerNorm { gain: next(), bias: next() },
            w_in: next(),
            w_out: next(),
        });
    }
    let ln_f = LayerNorm { gain: next(), bias: next() };
    let model = MiniLM::from_parts(cfg, tok, pos, blocks, ln_f)
        .map_err(|e| Error::format("FLLM checkpoint", e.to_string()))?;
    // Names are informational in the file but must agree with the layout.
    let again = model_to_bytes(&model)?;
    if again != bytes {
        return Err(Error::format("FLLM checkpoint", "tensor names do not match the model layout"));
    }
    Ok(model)
}

pub fn adapters_to_bytes(adapters: &AdapterSet) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    let head = AdapterHeader { model: *adapters.model_config(), adapter: adapters.spec().clone() };
    header(&mut w, ADAPTER_MAGIC, &head)?;
    w.u32(adapters.entries().len() as u32);
    for e in adapters.entries() {
        w.tensor(&e.key.to_string(), &e.tensor);
    }
    Ok(w.finish())
}

pub fn adapters_from_bytes(bytes: &[u8]) -> Result<AdapterSet> {
    let mut r = Reader::new(bytes, "FLAD checkpoint");
    let head: AdapterHeader = read_header(&mut r, ADAPTER_MAGIC)?;
    let tensors = read_tensors(&mut r)?;
    r.finish()?;
    let mut set = AdapterSet::zeros(&head.adapter, &head.model)
        .map_err(|e| Error::format("FLAD checkpoint", e.to_string()))?;
    let layout = set.layout();
    expect_names("FLAD checkpoint", tensors.iter().map(|(n, _)| n.as_str()), layout.names().map(String::from))?;
    let mut values = Vec::with_capacity(set.num_params());
    for ((name, t), e) in tensors.iter().zip(&layout.entries) {
        if t.shape() != e.shape.as_slice() {
            return Err(Error::format(
                "FLAD checkpoint",
                format!("{name} has shape {:?}, expected {:?}", t.shape(), e.shape),
            ));
        }
        values.extend_from_slice(t.data());
    }
    set.unflatten(&values)?;
    Ok(set)
}

pub fn save_model(model: &MiniLM, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MiniLM> {
    model_from_bytes(&fs::read(path)?)
}

pub fn save_adapters(adapters: &AdapterSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, adapters_to_bytes(adapters)?)?;
    Ok(())
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<AdapterSet> {
    adapters_from_bytes(&fs::read(path)?)
}

/// SHA-256 of the serialized model; used to prove base weights never move.
pub fn model_digest(model: &MiniLM) -> [u8; 32] {
    let bytes = model_to_bytes(model).expect("config always serializes");
    Sha256::digest(bytes).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{attach_prefix, PrefixSpec};

    fn small() -> MiniLM {
        MiniLM::new(ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 16, ..ModelConfig::default() })
            .unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = small();
        let bytes = model_to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"FLLM");
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn adapter_round_trip_is_bit_exact() {
        let m = small();
        let a = attach_prefix(&m, &PrefixSpec { len: 4, reparam_hidden: Some(5) }, 9).unwrap();
        let bytes = adapters_to_bytes(&a).unwrap();
        assert_eq!(&bytes[..4], b"FLAD");
        let back = adapters_from_bytes(&bytes).unwrap();
        assert_eq!(back.flat_values(), a.flat_values());
        assert_eq!(back.layout(), a.layout());
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = model_to_bytes(&small()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::Format { .. })));
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(model_from_bytes(&long), Err(Error::Format { .. })));
        assert!(matches!(adapters_from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
