//! Generate a scheme, report its privacy bounds, and calibrate the noise
//! scale for a target epsilon.
//!
//! cargo run --example keygen_privacy

use imcode::privacy::{calibrate_sigma, privacy_report, LaplaceParams, Sensitivity};
use imcode::scheme::{keygen, load_scheme, save_scheme, Dims, Scales};

fn main() -> imcode::Result<()> {
    let dims = Dims::new((2, 1, 3), (4, 3, 5))?;
    let scheme = keygen(dims, Scales::high_privacy(), LaplaceParams::centered(dims.noise_dim(), 1e4)?, 42)?;
    let sens = Sensitivity::new(1.0, 1.0)?;

    let report = privacy_report(&scheme, sens)?;
    println!("sigma      {:e}", report.sigma);
    println!("eps_y rows {:?}", report.eps_y_rows);
    println!("eps_u rows {:?}", report.eps_u_rows);
    println!("cond(Pi1..Pi4) {:?}", report.condition_numbers);

    // noise scale needed for eps_y <= 1e-3 and eps_u <= 1e-3
    let sigma = calibrate_sigma(&scheme, sens, 1e-3, 1e-3)?;
    println!("sigma for eps <= 1e-3: {sigma:e}");

    let dir = std::env::temp_dir().join("imcode-example-keygen");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("scheme.imk");
    save_scheme(&scheme, &path)?;
    let back = load_scheme(&path)?;
    assert_eq!(back.to_bytes(), scheme.to_bytes());
    println!("saved and reloaded {}", path.display());
    Ok(())
}
