use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::registry::Registry;
use super::wire::{code, Payload, WireMessage};
use crate::algorithm::{build_target, TargetAlgorithm};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::scheme::{EncodedInput, EncodedUtility, EncodingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudState {
    AwaitInput,
    Done,
    Poisoned,
}

/// One target algorithm and where its session stands.
pub struct CloudSession {
    target: TargetAlgorithm,
    state: CloudState,
}

impl CloudSession {
    pub fn state(&self) -> CloudState {
        self.state
    }
    pub fn target(&self) -> &TargetAlgorithm {
        &self.target
    }
}

/// The server side: a table of independent sessions.
///
/// The table lock is held only for lookups; each session has its own lock, so
/// different sessions compute concurrently.
pub struct Cloud {
    registry: Registry,
    sessions: Mutex<HashMap<u128, Arc<Mutex<CloudSession>>>>,
}

impl Cloud {
    pub fn new(registry: Registry) -> Self {
        Self {
            registry,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    /// Snapshot of a live session's encoded state.
    pub fn session_state(&self, id: u128) -> Option<(CloudState, Vector)> {
        let s = self.lookup(id)?;
        let s = s.lock().expect("session lock poisoned");
        Some((s.state, s.target.state().clone()))
    }

    fn lookup(&self, id: u128) -> Option<Arc<Mutex<CloudSession>>> {
        self.sessions.lock().expect("session table poisoned").get(&id).cloned()
    }

    /// Decodes a request, handles it, and encodes the reply.
    pub fn handle_bytes(&self, request: &[u8]) -> Vec<u8> {
        let reply = match WireMessage::from_bytes(request) {
            Ok(msg) => self.handle(&msg),
            Err(e) => {
                // Best effort: poison the session named in the header, if any.
                let id = request
                    .get(1..17)
                    .map_or(0, |b| u128::from_le_bytes(b.try_into().expect("16 bytes")));
                if let Some(s) = self.lookup(id) {
                    s.lock().expect("session lock poisoned").state = CloudState::Poisoned;
                }
                WireMessage::error(id, 0, code::MALFORMED, e.to_string())
            }
        };
        reply.to_bytes()
    }

    pub fn handle(&self, msg: &WireMessage) -> WireMessage {
        let (id, step) = (msg.session_id, msg.step);
        match &msg.payload {
            Payload::Hello { algorithm, material } => {
                let mut table = self.sessions.lock().expect("session table poisoned");
                if table.contains_key(&id) {
                    return WireMessage::error(id, step, code::DUPLICATE_SESSION, "session already open");
                }
                let Some(alg) = self.registry.resolve(algorithm) else {
                    return WireMessage::error(
                        id,
                        step,
                        code::UNKNOWN_ALGORITHM,
                        format!("no algorithm named {algorithm:?}"),
                    );
                };
                let target = match build_target(alg, material) {
                    Ok(t) => t,
                    Err(e) => return WireMessage::error(id, step, code::DIMENSION, e.to_string()),
                };
                let d = material.dims();
                table.insert(
                    id,
                    Arc::new(Mutex::new(CloudSession {
                        target,
                        state: CloudState::AwaitInput,
                    })),
                );
                log::debug!("session {id:032x} opened for {algorithm}");
                WireMessage::new(
                    id,
                    step,
                    Payload::SchemeAck {
                        lifted: [d.ny_tilde as u64, d.nu_tilde as u64, d.nzeta_tilde as u64],
                    },
                )
            }
            Payload::Input { ytilde, w } => {
                let Some(session) = self.lookup(id) else {
                    return WireMessage::error(id, step, code::UNKNOWN_SESSION, "unknown session");
                };
                let mut s = session.lock().expect("session lock poisoned");
                match s.state {
                    CloudState::Poisoned => {
                        return WireMessage::error(id, step, code::POISONED, "session is poisoned")
                    }
                    CloudState::Done => {
                        return WireMessage::error(id, step, code::OUT_OF_ORDER, "session is closed")
                    }
                    CloudState::AwaitInput => {}
                }
                if step != s.target.step() {
                    s.state = CloudState::Poisoned;
                    return WireMessage::error(
                        id,
                        step,
                        code::OUT_OF_ORDER,
                        format!("expected step {}, got {step}", s.target.step()),
                    );
                }
                let e = EncodedInput {
                    step,
                    ytilde: ytilde.clone(),
                };
                match s.target.target_step(&e, w) {
                    Ok(eu) => WireMessage::new(id, step, Payload::Utility { utilde: eu.utilde }),
                    Err(err) => {
                        s.state = CloudState::Poisoned;
                        let c = match err {
                            Error::Numeric { .. } | Error::Domain { .. } => code::NUMERIC,
                            Error::Dimension { .. } => code::DIMENSION,
                            _ => code::MALFORMED,
                        };
                        WireMessage::error(id, step, c, err.to_string())
                    }
                }
            }
            Payload::Done => {
                let removed = self.sessions.lock().expect("session table poisoned").remove(&id);
                match removed {
                    Some(s) => {
                        s.lock().expect("session lock poisoned").state = CloudState::Done;
                        log::debug!("session {id:032x} closed at step {step}");
                        WireMessage::new(id, step, Payload::Done)
                    }
                    None => WireMessage::error(id, step, code::UNKNOWN_SESSION, "unknown session"),
                }
            }
            Payload::SchemeAck { .. } | Payload::Utility { .. } | Payload::Error { .. } => {
                if let Some(s) = self.lookup(id) {
                    s.lock().expect("session lock poisoned").state = CloudState::Poisoned;
                }
                WireMessage::error(
                    id,
                    step,
                    code::MALFORMED,
                    format!("{:?} is not a client message", msg.kind()),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ClientState {
    New,
    AwaitAck,
    Ready,
    AwaitUtility(EncodedInput),
    AwaitDone,
    Closed,
}

/// The user side of one session. Holds the keys and the encoded input of the
/// outstanding step, which the utility decoder needs.
pub struct ClientSession {
    id: u128,
    scheme: Arc<EncodingScheme>,
    rng: ChaCha20Rng,
    state: ClientState,
    next_step: u64,
}

fn cloud_error(msg: &WireMessage) -> Option<Error> {
    match &msg.payload {
        Payload::Error { code, text } => Some(Error::Protocol(format!(
            "cloud rejected step {} (code {code}): {text}",
            msg.step
        ))),
        _ => None,
    }
}

impl ClientSession {
    /// The session id and every noise draw come from `seed`.
    pub fn new(scheme: Arc<EncodingScheme>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let id = rng.gen::<u128>();
        Self {
            id,
            scheme,
            rng,
            state: ClientState::New,
            next_step: 0,
        }
    }

    pub fn id(&self) -> u128 {
        self.id
    }

    pub fn scheme(&self) -> &EncodingScheme {
        &self.scheme
    }

    pub fn next_step(&self) -> u64 {
        self.next_step
    }

    /// Encoded input retained for the outstanding step.
    pub fn retained(&self) -> Option<&EncodedInput> {
        match &self.state {
            ClientState::AwaitUtility(e) => Some(e),
            _ => None,
        }
    }

    pub fn hello(&mut self, algorithm: &str) -> Result<WireMessage> {
        if self.state != ClientState::New {
            return Err(Error::Protocol("hello sent twice".into()));
        }
        self.state = ClientState::AwaitAck;
        Ok(WireMessage::new(
            self.id,
            0,
            Payload::Hello {
                algorithm: algorithm.to_string(),
                material: self.scheme.target_material(),
            },
        ))
    }

    pub fn receive_ack(&mut self, msg: &WireMessage) -> Result<()> {
        self.check_session(msg)?;
        if let Some(e) = cloud_error(msg) {
            self.state = ClientState::Closed;
            return Err(e);
        }
        let d = self.scheme.dims();
        let expected = [d.ny_tilde as u64, d.nu_tilde as u64, d.nzeta_tilde as u64];
        match (&self.state, &msg.payload) {
            (ClientState::AwaitAck, Payload::SchemeAck { lifted }) if *lifted == expected => {
                self.state = ClientState::Ready;
                Ok(())
            }
            (ClientState::AwaitAck, Payload::SchemeAck { lifted }) => Err(Error::Protocol(format!(
                "cloud acknowledged lifted dims {lifted:?}, expected {expected:?}"
            ))),
            _ => Err(Error::Protocol(format!("unexpected {:?} before ack", msg.kind()))),
        }
    }

    /// Encodes `y`, retains the encoding, and emits the Input message.
    pub fn send_input(&mut self, y: &Vector, w: &Vector) -> Result<WireMessage> {
        match self.state {
            ClientState::Ready => {}
            ClientState::AwaitUtility(ref e) => {
                return Err(Error::Protocol(format!(
                    "step {} is still outstanding",
                    e.step
                )))
            }
            _ => return Err(Error::Protocol("session is not ready for input".into())),
        }
        let e = self.scheme.encode_input(self.next_step, y, &mut self.rng)?;
        let msg = WireMessage::new(
            self.id,
            e.step,
            Payload::Input {
                ytilde: e.ytilde.clone(),
                w: w.clone(),
            },
        );
        self.state = ClientState::AwaitUtility(e);
        Ok(msg)
    }

    /// Decodes the utility for the outstanding step and releases its input.
    pub fn receive_utility(&mut self, msg: &WireMessage) -> Result<Vector> {
        Ok(self.receive_utility_detailed(msg)?.2)
    }

    /// As [`receive_utility`](Self::receive_utility), also returning the encoded pair.
    pub fn receive_utility_detailed(&mut self, msg: &WireMessage) -> Result<(EncodedInput, EncodedUtility, Vector)> {
        self.check_session(msg)?;
        if let Some(e) = cloud_error(msg) {
            self.state = ClientState::Closed;
            return Err(e);
        }
        let ClientState::AwaitUtility(ei) = &self.state else {
            return Err(Error::Protocol(format!(
                "{:?} for step {} with no retained input",
                msg.kind(),
                msg.step
            )));
        };
        let Payload::Utility { utilde } = &msg.payload else {
            return Err(Error::Protocol(format!("expected Utility, got {:?}", msg.kind())));
        };
        if msg.step != ei.step {
            return Err(Error::Protocol(format!(
                "utility for step {} while step {} is outstanding",
                msg.step, ei.step
            )));
        }
        let eu = EncodedUtility {
            step: msg.step,
            utilde: utilde.clone(),
        };
        let u = self.scheme.decode_utility(&eu, ei)?;
        let ei = ei.clone();
        self.state = ClientState::Ready;
        self.next_step += 1;
        Ok((ei, eu, u))
    }

    pub fn done(&mut self) -> Result<WireMessage> {
        if self.state != ClientState::Ready {
            return Err(Error::Protocol("cannot close with a step outstanding".into()));
        }
        self.state = ClientState::AwaitDone;
        Ok(WireMessage::new(self.id, self.next_step, Payload::Done))
    }

    pub fn receive_done(&mut self, msg: &WireMessage) -> Result<()> {
        self.check_session(msg)?;
        if let Some(e) = cloud_error(msg) {
            self.state = ClientState::Closed;
            return Err(e);
        }
        match (&self.state, &msg.payload) {
            (ClientState::AwaitDone, Payload::Done) => {
                self.state = ClientState::Closed;
                Ok(())
            }
            _ => Err(Error::Protocol(format!("unexpected {:?} while closing", msg.kind()))),
        }
    }

    fn check_session(&self, msg: &WireMessage) -> Result<()> {
        if msg.session_id != self.id {
            return Err(Error::Protocol(format!(
                "message for session {:032x} reached session {:032x}",
                msg.session_id, self.id
            )));
        }
        Ok(())
    }
}
