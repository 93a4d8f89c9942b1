use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::fed::ledger::{CommLedger, Direction};
use crate::fed::wire::RoundMessage;

/// In-process mailbox. Every message is serialized, measured and decoded
/// again, so receivers only ever see what crossed the "wire".
#[derive(Debug, Default)]
pub struct SimNetwork {
    ledger: CommLedger,
    to_clients: BTreeSet<String>,
    messages: u64,
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Client → server.
    pub fn uplink(&mut self, msg: &RoundMessage) -> Result<RoundMessage> {
        self.transmit(msg, msg.sender, Direction::Uplink)
    }

    /// Server → `client`.
    pub fn downlink(&mut self, client: u32, msg: &RoundMessage) -> Result<RoundMessage> {
        let out = self.transmit(msg, client, Direction::Downlink)?;
        self.to_clients.extend(out.layout.entries.iter().map(|e| e.name.clone()));
        Ok(out)
    }

    fn transmit(&mut self, msg: &RoundMessage, client: u32, direction: Direction) -> Result<RoundMessage> {
        let bytes = msg.encode()?;
        if bytes.len() as u64 != msg.byte_size() {
            return Err(Error::Protocol(format!(
                "serialized {} bytes but byte_size says {}",
                bytes.len(),
                msg.byte_size()
            )));
        }
        self.ledger.record(msg.round, client, direction, bytes.len() as u64);
        self.messages += 1;
        RoundMessage::decode(&bytes)
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> CommLedger {
        self.ledger
    }

    /// Every tensor name ever serialized toward a client.
    pub fn names_sent_to_clients(&self) -> &BTreeSet<String> {
        &self.to_clients
    }

    pub fn message_count(&self) -> u64 {
        self.messages
    }
}
