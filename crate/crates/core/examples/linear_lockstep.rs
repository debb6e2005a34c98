//! Run a random linear system in plain and encoded form side by side.
//!
//! cargo run --example linear_lockstep

use std::sync::Arc;

use imcode::algorithm::{lockstep, AlgDims, LinearAlgorithm};
use imcode::privacy::LaplaceParams;
use imcode::scheme::{keygen, Dims, Scales};
use imcode::Vector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() -> imcode::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let d = AlgDims {
        nzeta: 4,
        ny: 2,
        nu: 2,
        nw: 1,
    };
    let alg = Arc::new(LinearAlgorithm::random(d, 0.9, 1.0, &mut rng));
    let inputs: Vec<(Vector, Vector)> = (0..100)
        .map(|_| {
            (
                Vector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                Vector::from_fn(1, |_, _| rng.gen_range(-1.0..1.0)),
            )
        })
        .collect();
    let dims = Dims::new((2, 2, 4), (4, 3, 6))?;

    for (label, scales, sigma) in [("unit", Scales::unit(), 1.0), ("small Pi", Scales::default(), 1e4)] {
        let scheme = keygen(dims, scales, LaplaceParams::centered(dims.noise_dim(), sigma)?, 9)?;
        let run = lockstep(alg.clone(), &scheme, &inputs, &mut rng)?;
        println!(
            "{label:>8}: max rel. utility error {:.2e}, max rel. immersion residual {:.2e}",
            run.max_relative_utility_error(),
            run.max_relative_residual()
        );
    }
    Ok(())
}
