//! Server/client round protocol: local training, weighted model averaging,
//! global prototype aggregation and the transports that carry them.

mod client;
mod server;
mod transport;
pub mod wire;

use thiserror::Error;

use crate::augment::AugmentError;
use crate::loss::LossError;
use crate::model::ModelError;
use crate::prototype::PrototypeError;
use crate::tensor::TensorError;

pub use client::{ClientUpdate, FedClient, LocalTrainer, TrainConfig, TrainStats};
pub use server::{aggregate_models, Federation, RoundOutcome, ServerState, WeightedParams};
pub use transport::{InProcTransport, ServerTransport, StatsSink, TcpTransport, TransportKind};
pub use wire::{decode, encode, MessageKind, Payload, RoundMessage, WireError, WIRE_VERSION};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("no client updates to aggregate")]
    EmptyUpdates,
    #[error("client {client} sent {got} parameters, expected {expected}")]
    LengthMismatch { client: u32, expected: usize, got: usize },
    #[error("client {0} reported an empty dataset")]
    ZeroWeight(u32),
    #[error("client {client} failed: {reason}")]
    ClientFailure { client: u32, reason: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
