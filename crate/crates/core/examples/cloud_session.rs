//! Serve the builtin algorithms over TCP and drive a session from a client;
//! the same session over an in-process loopback yields identical bytes.
//!
//! cargo run --example cloud_session

use std::sync::Arc;

use imcode::privacy::LaplaceParams;
use imcode::protocol::{Client, Cloud, Loopback, Registry, Server, StreamTransport, Transport};
use imcode::scheme::{keygen, Dims, Scales};
use imcode::Vector;

fn session<T: Transport>(scheme: Arc<imcode::scheme::EncodingScheme>, t: T) -> imcode::Result<Vec<u8>> {
    let mut client = Client::connect(scheme, 1, "echo:2", t)?;
    for k in 0..5 {
        let y = Vector::from_vec(vec![k as f64, -0.5 * k as f64]);
        let u = client.step(&y, &Vector::zeros(0))?;
        println!("k={k} y={:?} u={:?}", y.as_slice(), u.as_slice());
    }
    Ok(client.close()?.to_bytes())
}

fn main() -> imcode::Result<()> {
    let dims = Dims::new((2, 2, 2), (4, 4, 3))?;
    let scheme = Arc::new(keygen(dims, Scales::default(), LaplaceParams::centered(dims.noise_dim(), 1e4)?, 1)?);

    let server = Server::bind("127.0.0.1:0", Arc::new(Cloud::new(Registry::builtin())))?;
    let addr = server.local_addr()?;
    let handle = std::thread::spawn(move || server.run(Some(1)));
    let over_tcp = session(scheme.clone(), StreamTransport::connect(addr)?)?;
    handle.join().expect("server thread")?;

    let in_process = session(scheme, Loopback::new(Arc::new(Cloud::new(Registry::builtin()))))?;
    println!("transcripts identical: {}", over_tcp == in_process);
    Ok(())
}
