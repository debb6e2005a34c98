//! Empirically check the input privacy bound by encoding two adjacent
//! measurements many times and comparing histograms.
//!
//! cargo run --release --example dp_probe

use imcode::privacy::{adjacency_ratio_probe, LaplaceParams, ProbeConfig};
use imcode::scheme::{EncodingScheme, Dims};
use imcode::{Mat, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> imcode::Result<()> {
    // each encoded coordinate is y/sqrt2 plus Laplace noise, so the
    // analytic bound is tight
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let dims = Dims::new((1, 1, 1), (2, 2, 2))?;
    let e0 = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
    let scheme = EncodingScheme::from_parts(
        dims,
        Mat::from_column_slice(2, 1, &[r, r]),
        e0.clone(),
        e0,
        Mat::identity(2, 2),
        Mat::from_column_slice(2, 1, &[r, -r]),
        LaplaceParams::centered(1, 1.0)?,
        0,
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let report = adjacency_ratio_probe(
        &scheme,
        &Vector::from_element(1, 0.0),
        &Vector::from_element(1, 1.0),
        ProbeConfig::new(500_000, 40),
        &mut rng,
    )?;
    for c in &report.coordinates {
        println!(
            "coord {}: empirical log-ratio {:.3} (after slack {:.3}) vs bound {:.3}",
            c.coordinate, c.max_log_ratio, c.max_excess, c.analytic_eps
        );
    }
    println!("within bound: {}", report.within_bound());
    Ok(())
}
