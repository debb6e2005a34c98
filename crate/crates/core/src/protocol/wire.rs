//! Message encoding and length-prefixed framing.
//!
//! ```text
//! frame   = len:u32 LE | message
//! message = kind:u8 | session_id:u128 LE | step:u64 LE | body
//! ```
//!
//! Vectors and matrices in bodies use the `linalg` serialization; strings
//! are `len:u32 LE | utf8`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::{self, Vector};
use crate::scheme::TargetMaterial;

/// Largest accepted frame payload.
pub const MAX_FRAME: usize = 16 << 20;

pub const HEADER_LEN: usize = 1 + 16 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Hello = 1,
    SchemeAck = 2,
    Input = 3,
    Utility = 4,
    Done = 5,
    Error = 6,
}

impl Kind {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Kind::Hello,
            2 => Kind::SchemeAck,
            3 => Kind::Input,
            4 => Kind::Utility,
            5 => Kind::Done,
            6 => Kind::Error,
            _ => return Err(Error::Framing(format!("unknown message kind {b}"))),
        })
    }
}

/// Error codes carried by [`Payload::Error`].
pub mod code {
    pub const UNKNOWN_SESSION: u16 = 1;
    pub const OUT_OF_ORDER: u16 = 2;
    pub const NUMERIC: u16 = 3;
    pub const MALFORMED: u16 = 4;
    pub const UNKNOWN_ALGORITHM: u16 = 5;
    pub const DUPLICATE_SESSION: u16 = 6;
    pub const POISONED: u16 = 7;
    pub const DIMENSION: u16 = 8;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Opens a session: the algorithm name and the cloud's share of the keys.
    Hello { algorithm: String, material: TargetMaterial },
    /// Lifted dimensions `(ny_tilde, nu_tilde, nzeta_tilde)` the cloud accepted.
    SchemeAck { lifted: [u64; 3] },
    /// Encoded input plus the clear disturbance `w`.
    Input { ytilde: Vector, w: Vector },
    Utility { utilde: Vector },
    Done,
    Error { code: u16, text: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub session_id: u128,
    pub step: u64,
    pub payload: Payload,
}

impl WireMessage {
    pub fn new(session_id: u128, step: u64, payload: Payload) -> Self {
        Self {
            session_id,
            step,
            payload,
        }
    }

    pub fn error(session_id: u128, step: u64, code: u16, text: impl Into<String>) -> Self {
        Self::new(
            session_id,
            step,
            Payload::Error {
                code,
                text: text.into(),
            },
        )
    }

    pub fn kind(&self) -> Kind {
        match self.payload {
            Payload::Hello { .. } => Kind::Hello,
            Payload::SchemeAck { .. } => Kind::SchemeAck,
            Payload::Input { .. } => Kind::Input,
            Payload::Utility { .. } => Kind::Utility,
            Payload::Done => Kind::Done,
            Payload::Error { .. } => Kind::Error,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 64);
        out.push(self.kind() as u8);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let w: &mut Vec<u8> = &mut out;
        let ok = match &self.payload {
            Payload::Hello { algorithm, material } => {
                write_str(w, algorithm);
                material.write_to(w)
            }
            Payload::SchemeAck { lifted } => {
                for n in lifted {
                    w.extend_from_slice(&n.to_le_bytes());
                }
                Ok(())
            }
            Payload::Input { ytilde, w: dist } => {
                linalg::write_vector(w, ytilde).and_then(|_| linalg::write_vector(w, dist))
            }
            Payload::Utility { utilde } => linalg::write_vector(w, utilde),
            Payload::Done => Ok(()),
            Payload::Error { code, text } => {
                w.extend_from_slice(&code.to_le_bytes());
                write_str(w, text);
                Ok(())
            }
        };
        ok.expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes).map_err(|e| match e {
            Error::Framing(_) => e,
            other => Error::Framing(format!("malformed message: {other}")),
        })
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Framing(format!(
                "message of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let kind = Kind::from_u8(bytes[0])?;
        let session_id = u128::from_le_bytes(bytes[1..17].try_into().expect("16 bytes"));
        let step = u64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes"));
        let mut r = &bytes[HEADER_LEN..];
        let payload = match kind {
            Kind::Hello => Payload::Hello {
                algorithm: read_str(&mut r)?,
                material: TargetMaterial::read_from(&mut r)?,
            },
            Kind::SchemeAck => {
                let mut lifted = [0u64; 3];
                for n in lifted.iter_mut() {
                    *n = linalg::read_u64(&mut r)?;
                }
                Payload::SchemeAck { lifted }
            }
            Kind::Input => Payload::Input {
                ytilde: linalg::read_vector(&mut r)?,
                w: linalg::read_vector(&mut r)?,
            },
            Kind::Utility => Payload::Utility {
                utilde: linalg::read_vector(&mut r)?,
            },
            Kind::Done => Payload::Done,
            Kind::Error => {
                let mut c = [0u8; 2];
                linalg::read_exact(&mut r, &mut c)?;
                Payload::Error {
                    code: u16::from_le_bytes(c),
                    text: read_str(&mut r)?,
                }
            }
        };
        if !r.is_empty() {
            return Err(Error::Framing(format!("{} trailing bytes after {kind:?}", r.len())));
        }
        Ok(Self {
            session_id,
            step,
            payload,
        })
    }
}

fn write_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let mut n = [0u8; 4];
    linalg::read_exact(r, &mut n)?;
    let n = u32::from_le_bytes(n) as usize;
    if n > r.len() {
        return Err(Error::Framing("truncated string".into()));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| Error::Framing("string is not utf-8".into()))
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Framing(format!(
            "frame of {} bytes exceeds the {MAX_FRAME} byte limit",
            payload.len()
        )));
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Framing("truncated frame length".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(Error::Framing(format!(
            "frame of {len} bytes exceeds the {MAX_FRAME} byte limit"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Framing("truncated frame".into()),
        _ => Error::Io(e),
    })?;
    Ok(Some(buf))
}
