//! User/cloud exchange: wire messages, session state machines, transports and
//! transcripts.
//!
//! A session is `Hello -> SchemeAck`, then one `Input -> Utility` pair per
//! step, then `Done -> Done`. The cloud only ever sees encoded inputs, encoded
//! utilities, the clear disturbance channel, and the target material.

pub mod registry;
pub mod session;
pub mod transcript;
pub mod transport;
pub mod wire;

use std::sync::Arc;

pub use registry::Registry;
pub use session::{ClientSession, Cloud, CloudState};
pub use transcript::{replay, Direction, Transcript, TranscriptWriter};
pub use transport::{Loopback, Server, StreamTransport, Transport};
pub use wire::{Payload, WireMessage};

use crate::error::Result;
use crate::linalg::Vector;
use crate::scheme::{EncodedInput, EncodedUtility, EncodingScheme};

/// One completed step as the client saw it.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub input: EncodedInput,
    pub utility: EncodedUtility,
    pub u: Vector,
}

/// Drives a [`ClientSession`] over a transport, recording every message.
pub struct Client<T: Transport> {
    session: ClientSession,
    transport: T,
    transcript: Transcript,
    writer: Option<TranscriptWriter>,
}

impl<T: Transport> Client<T> {
    pub fn connect(scheme: Arc<EncodingScheme>, seed: u64, algorithm: &str, transport: T) -> Result<Self> {
        Self::connect_recording(scheme, seed, algorithm, transport, None)
    }

    /// As [`connect`](Self::connect), also appending to `writer` as messages flow.
    pub fn connect_recording(
        scheme: Arc<EncodingScheme>,
        seed: u64,
        algorithm: &str,
        transport: T,
        writer: Option<TranscriptWriter>,
    ) -> Result<Self> {
        let mut c = Self {
            session: ClientSession::new(scheme, seed),
            transport,
            transcript: Transcript::new(),
            writer,
        };
        let hello = c.session.hello(algorithm)?;
        let ack = c.exchange(&hello)?;
        c.session.receive_ack(&ack)?;
        Ok(c)
    }

    fn exchange(&mut self, msg: &WireMessage) -> Result<WireMessage> {
        let request = msg.to_bytes();
        self.record(Direction::ClientToCloud, &request)?;
        let reply = self.transport.round_trip(&request)?;
        self.record(Direction::CloudToClient, &reply)?;
        WireMessage::from_bytes(&reply)
    }

    fn record(&mut self, dir: Direction, bytes: &[u8]) -> Result<()> {
        self.transcript.push(dir, bytes);
        if let Some(w) = &mut self.writer {
            w.append(dir, bytes)?;
        }
        Ok(())
    }

    pub fn step(&mut self, y: &Vector, w: &Vector) -> Result<Vector> {
        Ok(self.step_detailed(y, w)?.u)
    }

    pub fn step_detailed(&mut self, y: &Vector, w: &Vector) -> Result<Exchange> {
        let msg = self.session.send_input(y, w)?;
        let reply = self.exchange(&msg)?;
        let (input, utility, u) = self.session.receive_utility_detailed(&reply)?;
        Ok(Exchange { input, utility, u })
    }

    /// Sends Done and returns the full transcript.
    pub fn close(mut self) -> Result<Transcript> {
        let bye = self.session.done()?;
        let reply = self.exchange(&bye)?;
        self.session.receive_done(&reply)?;
        Ok(self.transcript)
    }

    pub fn session(&self) -> &ClientSession {
        &self.session
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}
