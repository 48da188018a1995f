//! Split inference over a framed device/cloud protocol.
//!
//! Every message is `type u8 | length u32 LE | payload`. A session is
//! `HELLO → ACK | NACK`, then `FRAME*`, `END` from the device and `RESULT`
//! from the cloud.

mod message;
mod session;
mod transport;

pub use message::{
    deserialize_frame, raw_frame_message_len, serialize_frame, FrameCodec, Message, NackReason, SessionConfig,
    MAX_PAYLOAD_LEN, MESSAGE_HEADER_LEN, MSG_ACK, MSG_END, MSG_FRAME, MSG_FRAME_BATCH, MSG_HELLO, MSG_NACK,
    MSG_RESULT,
};
pub use session::{
    run_cloud_session, run_device_session, simulate, CloudReport, DeviceOptions, DeviceReport, TransportKind,
};
pub use transport::{loopback_pair, Loopback, StreamTransport, TcpTransport, Transport, DEFAULT_TIMEOUT};
