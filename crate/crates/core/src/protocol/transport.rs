use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use super::session::Cloud;
use super::wire::{read_frame, write_frame, Payload, WireMessage};
use crate::error::{Error, Result};

/// A reliable, ordered request/reply channel carrying encoded messages.
pub trait Transport {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        (**self).round_trip(request)
    }
}

/// In-process transport that hands requests straight to a [`Cloud`].
#[derive(Clone)]
pub struct Loopback {
    cloud: Arc<Cloud>,
}

impl Loopback {
    pub fn new(cloud: Arc<Cloud>) -> Self {
        Self { cloud }
    }

    pub fn cloud(&self) -> &Arc<Cloud> {
        &self.cloud
    }
}

impl Transport for Loopback {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        Ok(self.cloud.handle_bytes(request))
    }
}

/// Length-prefixed frames over any byte stream.
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }
}

impl StreamTransport<TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self::new(stream))
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        write_frame(&mut self.stream, request)?;
        self.stream.flush()?;
        read_frame(&mut self.stream)?.ok_or_else(|| Error::Framing("connection closed by peer".into()))
    }
}

/// Serves frames from one connection until the peer closes it or its
/// session finishes.
pub fn serve_connection<S: Read + Write>(cloud: &Cloud, mut stream: S) -> Result<()> {
    while let Some(request) = read_frame(&mut stream)? {
        let reply = cloud.handle_bytes(&request);
        write_frame(&mut stream, &reply)?;
        stream.flush()?;
        if let Ok(WireMessage {
            payload: Payload::Done,
            ..
        }) = WireMessage::from_bytes(&reply)
        {
            break;
        }
    }
    Ok(())
}

/// TCP front end for a [`Cloud`]; one thread per connection.
pub struct Server {
    listener: TcpListener,
    cloud: Arc<Cloud>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, cloud: Arc<Cloud>) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            cloud,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections, stopping after `limit` of them if given, and
    /// waits for their handlers. Returns the number of connections that
    /// ended in an error.
    pub fn run(self, limit: Option<usize>) -> Result<usize> {
        let mut handles = Vec::new();
        for (n, conn) in self.listener.incoming().enumerate() {
            let stream = conn?;
            stream.set_nodelay(true)?;
            let cloud = self.cloud.clone();
            handles.push(thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                let r = serve_connection(&cloud, stream);
                if let Err(e) = &r {
                    log::warn!("connection {peer:?} ended with error: {e}");
                }
                r
            }));
            if limit.is_some_and(|l| n + 1 >= l) {
                break;
            }
        }
        let mut failed = 0;
        for h in handles {
            match h.join() {
                Ok(Ok(())) => {}
                _ => failed += 1,
            }
        }
        Ok(failed)
    }
}
