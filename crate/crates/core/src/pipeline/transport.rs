use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::message::{Message, MESSAGE_HEADER_LEN};
use crate::{Error, Result};

/// Default time to wait for the next message.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// A reliable, ordered message channel to one peer.
pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<()>;
    /// Next message; [`Error::Timeout`] if none arrives in time.
    fn recv(&mut self) -> Result<Message>;
    /// Total bytes written so far, headers included.
    fn bytes_sent(&self) -> u64;
}

/// In-process transport; every message travels as its serialized bytes.
#[derive(Debug)]
pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
    sent: u64,
}

/// Two connected loopback endpoints.
pub fn loopback_pair(timeout: Duration) -> (Loopback, Loopback) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        Loopback {
            tx: tx_a,
            rx: rx_a,
            timeout,
            sent: 0,
        },
        Loopback {
            tx: tx_b,
            rx: rx_b,
            timeout,
            sent: 0,
        },
    )
}

impl Loopback {
    /// Sends raw bytes, bypassing serialization.
    pub fn send_bytes(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.sent += bytes.len() as u64;
        self.tx
            .send(bytes)
            .map_err(|_| Error::Io(io::Error::new(io::ErrorKind::BrokenPipe, "loopback peer closed")))
    }
}

impl Transport for Loopback {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.send_bytes(msg.to_bytes())
    }

    fn recv(&mut self) -> Result<Message> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(bytes) => Message::from_bytes(&bytes),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout("message")),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "loopback peer closed",
            ))),
        }
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }
}

/// Messages over any byte stream.
#[derive(Debug)]
pub struct StreamTransport<S> {
    stream: S,
    sent: u64,
    received: u64,
}

fn map_io(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout("message"),
        _ => Error::Io(e),
    }
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            sent: 0,
            received: 0,
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<()> {
        self.stream.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::framing(self.received as usize, "stream ended inside a message")
            } else {
                map_io(e)
            }
        })?;
        self.received += buf.len() as u64;
        Ok(())
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let bytes = msg.to_bytes();
        self.stream.write_all(&bytes).map_err(map_io)?;
        self.stream.flush().map_err(map_io)?;
        self.sent += bytes.len() as u64;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        let mut header = [0u8; MESSAGE_HEADER_LEN];
        let start = self.received as usize;
        match self.stream.read(&mut header[..1]).map_err(map_io)? {
            0 => {
                return Err(Error::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "peer closed the connection",
                )))
            }
            _ => self.received += 1,
        }
        self.read_exact_at(&mut header[1..])?;
        let len = Message::payload_len(&header).map_err(|e| shift(e, start))?;
        let mut payload = vec![0u8; len];
        self.read_exact_at(&mut payload)?;
        Message::from_parts(header[0], &payload).map_err(|e| shift(e, start))
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }
}

fn shift(e: Error, by: usize) -> Error {
    match e {
        Error::Framing { offset, reason } => Error::framing(offset + by, reason),
        other => other,
    }
}

pub type TcpTransport = StreamTransport<TcpStream>;

impl TcpTransport {
    /// Wraps an accepted or connected socket with a read timeout.
    pub fn from_tcp(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self::new(stream))
    }

    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self> {
        Self::from_tcp(TcpStream::connect(addr)?, timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;
    use std::net::TcpListener;

    #[test]
    fn loopback_delivers_in_order() {
        let (mut a, mut b) = loopback_pair(Duration::from_millis(200));
        a.send(&Message::Ack).unwrap();
        a.send(&Message::End).unwrap();
        assert_eq!(b.recv().unwrap(), Message::Ack);
        assert_eq!(b.recv().unwrap(), Message::End);
        assert!(matches!(b.recv(), Err(Error::Timeout(_))));
        assert_eq!(a.bytes_sent(), 10);
    }

    #[test]
    fn stream_transport_reports_truncation() {
        let mut bytes = Message::Result(vec![1.0, 2.0]).to_bytes();
        bytes.pop();
        let mut t = StreamTransport::new(Cursor::new(bytes));
        assert!(matches!(t.recv(), Err(Error::Framing { .. })));
        let mut t = StreamTransport::new(Cursor::new(vec![0x09, 0, 0, 0, 0]));
        assert!(matches!(t.recv(), Err(Error::Framing { offset: 0, .. })));
    }

    #[test]
    fn tcp_round_trip_and_timeout() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut t = TcpTransport::from_tcp(s, Duration::from_millis(300)).unwrap();
            let m = t.recv().unwrap();
            t.send(&m).unwrap();
            t.recv()
        });
        let mut c = TcpTransport::connect(addr, Duration::from_secs(5)).unwrap();
        let msg = Message::Result(vec![0.25, -3.0]);
        c.send(&msg).unwrap();
        assert_eq!(c.recv().unwrap(), msg);
        assert!(matches!(server.join().unwrap(), Err(Error::Timeout(_))));
    }
}
