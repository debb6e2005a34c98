//! Ordered record of every message of a session.
//!
//! ```text
//! file  = "IMTS" | version:u16 LE | entry*
//! entry = direction:u8 | len:u32 LE | message
//! ```
//!
//! Entries are appended as the session runs, so a crashed run still leaves a
//! readable prefix.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::session::Cloud;
use super::wire::{Payload, WireMessage, MAX_FRAME};
use crate::error::{Error, Result};

pub const TRANSCRIPT_MAGIC: &[u8; 4] = b"IMTS";
pub const TRANSCRIPT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Direction {
    ClientToCloud = 0,
    CloudToClient = 1,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<(Direction, Vec<u8>)>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, dir: Direction, message: &[u8]) {
        self.entries.push((dir, message.to_vec()));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header();
        for (dir, msg) in &self.entries {
            write_entry(&mut out, *dir, msg);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("transcript shorter than its header".into()))?;
        if &head[..4] != TRANSCRIPT_MAGIC {
            return Err(Error::Format("bad transcript magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != TRANSCRIPT_VERSION {
            return Err(Error::Format(format!("unsupported transcript version {version}")));
        }
        let mut entries = Vec::new();
        loop {
            let mut d = [0u8; 1];
            if r.read(&mut d)? == 0 {
                break;
            }
            let dir = match d[0] {
                0 => Direction::ClientToCloud,
                1 => Direction::CloudToClient,
                b => return Err(Error::Format(format!("bad transcript direction {b}"))),
            };
            let mut len = [0u8; 4];
            r.read_exact(&mut len)
                .map_err(|_| Error::Format("truncated transcript entry".into()))?;
            let len = u32::from_le_bytes(len) as usize;
            if len > MAX_FRAME {
                return Err(Error::Format(format!("transcript entry of {len} bytes")));
            }
            let mut msg = vec![0u8; len];
            r.read_exact(&mut msg)
                .map_err(|_| Error::Format("truncated transcript entry".into()))?;
            entries.push((dir, msg));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// True if `needle` occurs anywhere in the serialized transcript.
    pub fn contains(&self, needle: &[u8]) -> bool {
        !needle.is_empty()
            && self
                .entries
                .iter()
                .any(|(_, m)| m.windows(needle.len()).any(|w| w == needle))
    }

    /// Checks strict request/reply alternation and per-session step order:
    /// Hello, then Input/Utility pairs with steps 0, 1, 2, ..., then Done.
    pub fn validate(&self) -> Result<()> {
        use std::collections::HashMap;
        #[derive(Clone, Copy, PartialEq)]
        enum S {
            Open(u64),
            Closed,
        }
        if !self.entries.len().is_multiple_of(2) {
            return Err(Error::Protocol("transcript ends with an unanswered request".into()));
        }
        let mut sessions: HashMap<u128, S> = HashMap::new();
        for (i, pair) in self.entries.chunks(2).enumerate() {
            let (d0, req) = &pair[0];
            let (d1, rep) = &pair[1];
            if *d0 != Direction::ClientToCloud || *d1 != Direction::CloudToClient {
                return Err(Error::Protocol(format!("entry pair {i} does not alternate")));
            }
            let req = WireMessage::from_bytes(req)?;
            let rep = WireMessage::from_bytes(rep)?;
            if rep.session_id != req.session_id || rep.step != req.step {
                return Err(Error::Protocol(format!("reply {i} does not answer its request")));
            }
            let id = req.session_id;
            let state = sessions.get(&id).copied();
            let next = match (&req.payload, state, &rep.payload) {
                (Payload::Hello { .. }, None, Payload::SchemeAck { .. }) => S::Open(0),
                (Payload::Input { .. }, Some(S::Open(k)), Payload::Utility { .. }) if req.step == k => S::Open(k + 1),
                (Payload::Done, Some(S::Open(k)), Payload::Done) if req.step == k => S::Closed,
                (_, _, Payload::Error { .. }) => S::Closed,
                _ => {
                    return Err(Error::Protocol(format!(
                        "pair {i}: {:?} at step {} followed by {:?} violates the session order",
                        req.kind(),
                        req.step,
                        rep.kind()
                    )))
                }
            };
            sessions.insert(id, next);
        }
        Ok(())
    }
}

fn header() -> Vec<u8> {
    let mut out = TRANSCRIPT_MAGIC.to_vec();
    out.extend_from_slice(&TRANSCRIPT_VERSION.to_le_bytes());
    out
}

fn write_entry(out: &mut Vec<u8>, dir: Direction, msg: &[u8]) {
    out.push(dir as u8);
    out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
    out.extend_from_slice(msg);
}

/// Appends entries to a transcript file as they happen.
pub struct TranscriptWriter {
    file: BufWriter<File>,
}

impl TranscriptWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(path)?,
        );
        file.write_all(&header())?;
        file.flush()?;
        Ok(Self { file })
    }

    pub fn append(&mut self, dir: Direction, msg: &[u8]) -> Result<()> {
        let mut buf = Vec::with_capacity(msg.len() + 5);
        write_entry(&mut buf, dir, msg);
        self.file.write_all(&buf)?;
        self.file.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayReport {
    pub exchanges: usize,
}

/// Feeds the recorded requests to `cloud` and checks every reply is
/// byte-identical to the recorded one.
pub fn replay(transcript: &Transcript, cloud: &Cloud) -> Result<ReplayReport> {
    transcript.validate()?;
    let mut exchanges = 0;
    for (i, pair) in transcript.entries.chunks(2).enumerate() {
        let reply = cloud.handle_bytes(&pair[0].1);
        if reply != pair[1].1 {
            return Err(Error::Protocol(format!("replay diverges at exchange {i}")));
        }
        exchanges += 1;
    }
    Ok(ReplayReport { exchanges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(step: u64, payload: Payload) -> Vec<u8> {
        WireMessage::new(7, step, payload).to_bytes()
    }

    #[test]
    fn bytes_round_trip() {
        let mut t = Transcript::new();
        t.push(Direction::ClientToCloud, b"abc");
        t.push(Direction::CloudToClient, b"");
        assert_eq!(Transcript::from_bytes(&t.to_bytes()).unwrap(), t);
        let mut bad = t.to_bytes();
        bad[0] = b'X';
        assert!(matches!(Transcript::from_bytes(&bad), Err(Error::Format(_))));
        let full = t.to_bytes();
        assert!(Transcript::from_bytes(&full[..full.len() - 4]).is_err());
    }

    #[test]
    fn writer_appends_readable_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.imts");
        let mut w = TranscriptWriter::create(&path).unwrap();
        w.append(Direction::ClientToCloud, b"one").unwrap();
        assert_eq!(Transcript::load(&path).unwrap().entries.len(), 1);
        w.append(Direction::CloudToClient, b"two").unwrap();
        let t = Transcript::load(&path).unwrap();
        assert_eq!(t.entries[1], (Direction::CloudToClient, b"two".to_vec()));
    }

    #[test]
    fn alternation_violations_rejected() {
        use crate::linalg::Vector;
        let input = |k| {
            msg(
                k,
                Payload::Input {
                    ytilde: Vector::zeros(2),
                    w: Vector::zeros(0),
                },
            )
        };
        let utility = |k| {
            msg(
                k,
                Payload::Utility {
                    utilde: Vector::zeros(2),
                },
            )
        };
        // Input before any Hello.
        let mut t = Transcript::new();
        t.push(Direction::ClientToCloud, &input(0));
        t.push(Direction::CloudToClient, &utility(0));
        assert!(matches!(t.validate(), Err(Error::Protocol(_))));
        // Two requests in a row.
        let mut t = Transcript::new();
        t.push(Direction::ClientToCloud, &input(0));
        t.push(Direction::ClientToCloud, &input(1));
        assert!(matches!(t.validate(), Err(Error::Protocol(_))));
        // Odd length.
        let mut t = Transcript::new();
        t.push(Direction::ClientToCloud, &input(0));
        assert!(t.validate().is_err());
    }

    #[test]
    fn contains_finds_substrings() {
        let mut t = Transcript::new();
        t.push(Direction::ClientToCloud, b"xxabcxx");
        assert!(t.contains(b"abc"));
        assert!(!t.contains(b"abd"));
        assert!(!t.contains(b""));
    }
}
