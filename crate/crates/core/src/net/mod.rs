//! Wire protocol and runtime: length-prefixed JSON frames, the aggregator
//! state machine, the silo client, and two transports (in-process channels
//! and TCP) that carry the same frames.

mod aggregator;
mod frame;
mod message;
mod silo;
mod transport;

pub use aggregator::{AggregatorConfig, AggregatorCore, ConnId, GalleryOutcome, Outgoing};
pub use frame::{decode_frame, encode_frame, read_frame, FrameError, MAX_PAYLOAD};
pub use message::{
    decode_message, encode_message, Body, HelloRole, Message, RankedSyndrome, WireMatrix, WireWords,
    PROTOCOL_VERSION,
};
pub use silo::{
    common_mask_label, common_masks, local_round, member_latents, run_query_client, run_silo, silo_left_inverses,
    PlaintextTrace, QueryRequest, SiloConfig, SiloData, SiloError, SiloOutcome, SiloState,
};
pub use transport::{
    bind_address, AggregatorHandle, InProcConnector, InProcLink, Link, TcpLink, DEFAULT_PORT,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("aggregator reported {code}: {message}")]
    Remote { code: String, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}
