//! Layer-streaming session between a design owner (client) and a
//! manufacturer. The manufacturer pulls one slab at a time; the client never
//! sends a layer that was not asked for.

pub mod client;
pub mod frame;
pub mod ledger;
pub mod manufacturer;

use std::io::{self, Read, Write};
use std::thread;
use std::time::Duration;

pub use frame::{frame_message, parse_frame, read_message, write_message, FrameError, Kind, Message};

/// A framed byte stream that counts traffic.
pub struct Channel<S> {
    stream: S,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl<S: Read + Write> Channel<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, bytes_sent: 0, bytes_received: 0 }
    }

    pub fn send(&mut self, m: &Message) -> Result<(), FrameError> {
        log::trace!("send {:?}({}) {} bytes", m.kind, m.layer, m.payload.len());
        self.bytes_sent += write_message(&mut self.stream, m)? as u64;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message, FrameError> {
        let m = read_message(&mut self.stream)?;
        self.bytes_received += (frame::HEADER_LEN + m.payload.len() + frame::TRAILER_LEN) as u64;
        log::trace!("recv {:?}({}) {} bytes", m.kind, m.layer, m.payload.len());
        Ok(m)
    }

    /// Best-effort notice to the peer before giving up.
    pub fn send_abort(&mut self, kind: Kind, reason: &str) {
        if let Err(e) = self.send(&Message::text(kind, reason)) {
            log::debug!("could not deliver {kind:?}: {e}");
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

/// Stream wrapper that holds every flushed message back by a fixed delay,
/// standing in for a slow network.
pub struct Latency<S> {
    inner: S,
    delay: Duration,
}

impl<S> Latency<S> {
    pub fn new(inner: S, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<S: Read> Read for Latency<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read(buf)
    }
}

impl<S: Write> Write for Latency<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.inner.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        thread::sleep(self.delay);
        self.inner.flush()
    }
}
