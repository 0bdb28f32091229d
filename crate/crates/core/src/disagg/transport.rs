use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Instant;

use crate::error::{Error, Result};

/// Default link speed between prefill and decode nodes, bits per second.
pub const DEFAULT_BANDWIDTH_BPS: f64 = 40e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TransportKind {
    /// Transfer time is `bytes * 8 / bandwidth`.
    #[default]
    Modeled,
    /// Frames really cross a loopback TCP connection; transfer time is the
    /// measured wall time.
    Sockets,
}

impl std::str::FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" | "modeled" => Ok(Self::Modeled),
            "sockets" => Ok(Self::Sockets),
            other => Err(Error::Config(format!("unknown transport {other:?}"))),
        }
    }
}

/// Moves frames from the prefill side to the decode side.
pub trait Transport {
    /// Returns the bytes as received and the transfer time in seconds.
    fn send(&mut self, frame: Vec<u8>) -> Result<(Vec<u8>, f64)>;
}

pub struct ModeledLink {
    bandwidth_bps: f64,
}

impl ModeledLink {
    pub fn new(bandwidth_bps: f64) -> Result<Self> {
        if !(bandwidth_bps > 0.0 && bandwidth_bps.is_finite()) {
            return Err(Error::Config("link bandwidth must be positive".into()));
        }
        Ok(Self { bandwidth_bps })
    }

    pub fn transfer_time(&self, bytes: usize) -> f64 {
        bytes as f64 * 8.0 / self.bandwidth_bps
    }
}

impl Transport for ModeledLink {
    fn send(&mut self, frame: Vec<u8>) -> Result<(Vec<u8>, f64)> {
        let t = self.transfer_time(frame.len());
        Ok((frame, t))
    }
}

/// A loopback TCP connection to a receiver thread that plays the decode
/// role. Frames travel length-prefixed; the receiver acknowledges each one
/// with a single byte and hands it back over a channel.
pub struct SocketLink {
    stream: TcpStream,
    received: mpsc::Receiver<Vec<u8>>,
    receiver: Option<JoinHandle<std::io::Result<()>>>,
}

impl SocketLink {
    pub fn connect() -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let receiver = std::thread::spawn(move || -> std::io::Result<()> {
            let (mut conn, _) = listener.accept()?;
            conn.set_nodelay(true)?;
            loop {
                let mut len = [0u8; 8];
                match conn.read_exact(&mut len) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
                    Err(e) => return Err(e),
                }
                let mut frame = vec![0u8; u64::from_le_bytes(len) as usize];
                conn.read_exact(&mut frame)?;
                if tx.send(frame).is_err() {
                    return Ok(());
                }
                conn.write_all(&[1])?;
            }
        });
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            received: rx,
            receiver: Some(receiver),
        })
    }
}

impl Transport for SocketLink {
    fn send(&mut self, frame: Vec<u8>) -> Result<(Vec<u8>, f64)> {
        let start = Instant::now();
        self.stream.write_all(&(frame.len() as u64).to_le_bytes())?;
        self.stream.write_all(&frame)?;
        let mut ack = [0u8; 1];
        self.stream.read_exact(&mut ack)?;
        let elapsed = start.elapsed().as_secs_f64();
        let got = self
            .received
            .recv()
            .map_err(|_| Error::Io(std::io::Error::other("receiver hung up")))?;
        Ok((got, elapsed))
    }
}

impl Drop for SocketLink {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Write);
        if let Some(h) = self.receiver.take() {
            let _ = h.join();
        }
    }
}
