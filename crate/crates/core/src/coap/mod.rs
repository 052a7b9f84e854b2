//! Minimal CoAP over datagrams: codec, reliable exchanges, observe,
//! block-wise transfer, and the transports underneath.

pub mod block;
pub mod endpoint;
pub mod link;
pub mod message;
pub mod observe;
pub mod params;
pub mod uri;

pub use block::{block1_upload, block2_download, Block1Assembler, Block1Outcome, BlockOpt};
pub use endpoint::{CoapEndpoint, ExchangeStats, IncomingRequest, Observation};
pub use link::{CaptureRecord, Fate, LinkConfig, SimNetwork, TransportRx, TransportTx};
pub use message::{content_format, option, Code, CoapMessage, CoapOption, MessageType};
pub use observe::{NotifyError, ObserveHandle, Observers};
pub use params::TransmissionParams;
pub use uri::{coap_uri, CoapUri, UriError};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoapError {
    #[error("truncated message")]
    Truncated,
    #[error("unsupported CoAP version {0}")]
    BadVersion(u8),
    #[error("token length {0} exceeds 8 bytes")]
    TokenTooLong(usize),
    #[error("option delta or length {0} not encodable")]
    OptionTooLarge(usize),
    #[error("reserved option nibble 15")]
    ReservedNibble,
    #[error("option overruns buffer")]
    OptionOverrun,
    #[error("payload marker followed by empty payload")]
    EmptyPayloadAfterMarker,
    #[error("datagram of {0} bytes exceeds link MTU")]
    Oversize(usize),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unreachable")]
    Unreachable,
    #[error("reset")]
    Reset,
    #[error("radio is sleeping")]
    Sleeping,
    #[error("endpoint shut down")]
    Closed,
    #[error("unexpected response {0}")]
    Response(message::Code),
    #[error("resource is not observable")]
    NotObservable,
    #[error("invalid block size {0}")]
    InvalidBlockSize(usize),
    #[error("block transfer aborted: {0}")]
    BlockAborted(String),
}
