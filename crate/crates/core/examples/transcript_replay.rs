//! Record a session to disk and replay it against a fresh cloud.
//!
//! cargo run --example transcript_replay

use std::sync::Arc;

use imcode::privacy::LaplaceParams;
use imcode::protocol::{replay, Client, Cloud, Loopback, Registry, Transcript, TranscriptWriter};
use imcode::scheme::{keygen, Dims, Scales};
use imcode::Vector;

fn main() -> imcode::Result<()> {
    let dims = Dims::new((1, 1, 1), (3, 3, 2))?;
    let scheme = Arc::new(keygen(dims, Scales::high_privacy(), LaplaceParams::centered(dims.noise_dim(), 1e4)?, 2)?);
    let path = std::env::temp_dir().join("imcode-example.imts");

    let cloud = Arc::new(Cloud::new(Registry::builtin()));
    let writer = TranscriptWriter::create(&path)?;
    let mut client = Client::connect_recording(scheme, 4, "echo", Loopback::new(cloud), Some(writer))?;
    for k in 0..20 {
        client.step(&Vector::from_element(1, (k as f64 * 0.1).cos()), &Vector::zeros(0))?;
    }
    client.close()?;

    let t = Transcript::load(&path)?;
    let report = replay(&t, &Cloud::new(Registry::builtin()))?;
    println!("{} messages in {}, {} exchanges replayed byte-identically", t.entries.len(), path.display(), report.exchanges);
    Ok(())
}
