//! Encode a measurement, let an untrusted party compute on it, decode the
//! result.
//!
//! cargo run --example encode_decode

use imcode::scheme::{keygen, Dims, Scales};
use imcode::privacy::LaplaceParams;
use imcode::Vector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> imcode::Result<()> {
    let dims = Dims::new((2, 2, 2), (5, 4, 3))?;
    let scheme = keygen(dims, Scales::default(), LaplaceParams::centered(dims.noise_dim(), 1e4)?, 3)?;
    let mut rng = ChaCha20Rng::seed_from_u64(0);

    let y = Vector::from_vec(vec![0.25, -1.5]);
    let enc = scheme.encode_input(0, &y, &mut rng)?;
    println!("y        {:?}", y.as_slice());
    println!("ytilde   {:?}", enc.ytilde.as_slice());
    // the noise lives in the kernel of the decoder
    println!("decoded  {:?}", scheme.decode_input(&enc)?.as_slice());

    // the cloud holds only target material: it can decode inputs and encode
    // utilities, never recover u from utilde
    let material = scheme.target_material();
    let ybar = material.decode_input(&enc)?;
    let u = ybar.map(|v| 2.0 * v);
    let eu = material.encode_utility(&u, &enc)?;
    println!("utilde   {:?}", eu.utilde.as_slice());
    println!("u        {:?}", scheme.decode_utility(&eu, &enc)?.as_slice());
    Ok(())
}
