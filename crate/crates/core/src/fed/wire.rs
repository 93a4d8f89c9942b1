//! `FLMS` round messages.
//!
//! ```text
//! magic "FLMS" | version u16 | round u32 | sender u32 | kind u8 |
//! payload_len u64 (bytes) | payload (f32 or u64, LE) |
//! descriptor: sample_count u64 | entry_count u32 |
//!             entry* = name_len u32 | name | offset u64 | rank u8 | dims u32 × rank
//! ```

use crate::checkpoint::{Reader, Writer};
use crate::error::{Error, Result};
use crate::peft::{Layout, LayoutEntry};

pub const WIRE_VERSION: u16 = 1;
/// Sender id used for server → client messages.
pub const SERVER_ID: u32 = u32::MAX;
const MAGIC: &[u8; 4] = b"FLMS";
const FORMAT: &str = "FLMS message";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Plain(Vec<f32>),
    /// Field elements of a masked, client-weighted vector.
    Masked(Vec<u64>),
}

impl Payload {
    fn kind(&self) -> u8 {
        match self {
            Payload::Plain(_) => 0,
            Payload::Masked(_) => 1,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::Plain(v) => v.len() * 4,
            Payload::Masked(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub round: u32,
    pub sender: u32,
    pub payload: Payload,
    pub layout: Layout,
    /// Aggregation weight. Masked messages carry their weight inside the
    /// masked vector and set this to 1.
    pub sample_count: u64,
}

impl RoundMessage {
    pub fn plain(round: u32, sender: u32, values: Vec<f32>, layout: Layout, sample_count: u64) -> Self {
        Self { round, sender, payload: Payload::Plain(values), layout, sample_count }
    }

    pub fn masked(round: u32, sender: u32, values: Vec<u64>, layout: Layout) -> Self {
        Self { round, sender, payload: Payload::Masked(values), layout, sample_count: 1 }
    }

    /// Exact serialized length, computed from the fields alone.
    pub fn byte_size(&self) -> u64 {
        let header = 4 + 2 + 4 + 4 + 1 + 8;
        let descriptor: usize = 8
            + 4
            + self.layout.entries.iter().map(|e| 4 + e.name.len() + 8 + 1 + 4 * e.shape.len()).sum::<usize>();
        (header + self.payload.byte_len() + descriptor) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::Protocol("sample_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(WIRE_VERSION);
        w.u32(self.round);
        w.u32(self.sender);
        w.u8(self.payload.kind());
        w.u64(self.payload.byte_len() as u64);
        match &self.payload {
            Payload::Plain(v) => w.f32s(v),
            Payload::Masked(v) => v.iter().for_each(|&x| w.u64(x)),
        }
        w.u64(self.sample_count);
        w.u32(self.layout.entries.len() as u32);
        for e in &self.layout.entries {
            w.str(&e.name);
            w.u64(e.offset as u64);
            w.u8(e.shape.len() as u8);
            e.shape.iter().for_each(|&d| w.u32(d as u32));
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, FORMAT);
        if r.take(4)? != MAGIC {
            return Err(Error::format(FORMAT, "bad magic"));
        }
        let version = r.u16()?;
        if version != WIRE_VERSION {
            return Err(Error::format(FORMAT, format!("unsupported version {version}")));
        }
        let round = r.u32()?;
        let sender = r.u32()?;
        let kind = r.u8()?;
        let len = usize::try_from(r.u64()?).map_err(|_| Error::format(FORMAT, "payload length overflows"))?;
        let payload = match kind {
            0 if len % 4 == 0 => Payload::Plain(r.f32s(len / 4)?),
            1 if len % 8 == 0 => Payload::Masked((0..len / 8).map(|_| r.u64()).collect::<Result<_>>()?),
            _ => return Err(Error::format(FORMAT, format!("bad payload kind {kind} / length {len}"))),
        };
        let sample_count = r.u64()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let offset = r.u64()? as usize;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            entries.push(LayoutEntry { name, offset, shape });
        }
        r.finish()?;
        let msg = Self { round, sender, payload, layout: Layout { entries }, sample_count };
        msg.validate()?;
        Ok(msg)
    }
}
