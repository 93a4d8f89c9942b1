//! Federation substrate: aggregation, secure aggregation, wire messages and
//! byte-exact communication accounting.

mod aggregate;
mod ledger;
mod network;
mod secagg;
mod wire;

pub use aggregate::{add_dp_noise, fedavg};
pub use ledger::{percent_of_full, CommLedger, CommRow, Direction, LedgerEntry};
pub use network::SimNetwork;
pub use secagg::{
    dequantize, prg, quantize, secure_aggregate, secure_mask, weighted_field_vector, SecAggConfig, SecAggSession,
    FIELD_BITS, MODULUS,
};
pub use wire::{Payload, RoundMessage, SERVER_ID, WIRE_VERSION};
