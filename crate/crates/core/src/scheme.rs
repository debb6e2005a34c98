//! Affine encoding, immersion and utility maps, and the key material behind them.
//!
//! ```text
//! ytilde   = Pi1 y + N1 s          s ~ Laplace(mu, sigma), Pi1_left N1 = 0
//! zetatilde = Pi2 zeta
//! utilde   = Pi3 u + Pi4 ytilde
//! u        = Pi3_left (utilde - Pi4 ytilde)
//! ```
//!
//! [`EncodingScheme`] is the client's secret. [`TargetMaterial`] is the subset
//! the cloud needs to run a target algorithm.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::privacy::{self, LaplaceParams};

pub const SCHEME_MAGIC: &[u8; 4] = b"IMKT";
pub const SCHEME_VERSION: u16 = 1;

/// Max-abs tolerance for the algebraic identities of a scheme.
pub const SCHEME_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub ny: usize,
    pub nu: usize,
    pub nzeta: usize,
    pub ny_tilde: usize,
    pub nu_tilde: usize,
    pub nzeta_tilde: usize,
}

impl Dims {
    pub fn new(
        (ny, nu, nzeta): (usize, usize, usize),
        (ny_tilde, nu_tilde, nzeta_tilde): (usize, usize, usize),
    ) -> Result<Self> {
        let d = Self {
            ny,
            nu,
            nzeta,
            ny_tilde,
            nu_tilde,
            nzeta_tilde,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n, nt) in [
            ("y", self.ny, self.ny_tilde),
            ("u", self.nu, self.nu_tilde),
            ("zeta", self.nzeta, self.nzeta_tilde),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("dimension of {name} must be >= 1")));
            }
            if nt <= n {
                return Err(Error::Config(format!(
                    "lifted dimension of {name} must exceed the original ({nt} <= {n})"
                )));
            }
        }
        Ok(())
    }

    /// Dimension of the Laplace vector `s`.
    pub fn noise_dim(&self) -> usize {
        self.ny_tilde - self.ny
    }
}

/// Entry half-widths of the uniform draws for Pi1..Pi4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scales {
    pub pi1: f64,
    pub pi2: f64,
    pub pi3: f64,
    pub pi4: f64,
}

impl Default for Scales {
    /// Small Pi1..Pi3 with a unit Pi4.
    ///
    /// A larger Pi4 lowers the utility bound but costs precision: the decoder
    /// recovers `Pi3 u` from `utilde` whose magnitude is about `|Pi4| sigma`, so
    /// the float64 floor on the decoded utility grows like `|Pi4| sigma / |Pi3|`.
    fn default() -> Self {
        Self {
            pi1: 1e-4,
            pi2: 1e-4,
            pi3: 1e-4,
            pi4: 1.0,
        }
    }
}

impl Scales {
    /// Small Pi1..Pi3 and a large Pi4, the most private configuration.
    pub fn high_privacy() -> Self {
        Self {
            pi4: 1e4,
            ..Self::default()
        }
    }

    pub fn unit() -> Self {
        Self {
            pi1: 1.0,
            pi2: 1.0,
            pi3: 1.0,
            pi4: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub step: u64,
    pub ytilde: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUtility {
    pub step: u64,
    pub utilde: Vector,
}

/// Full key material held by the client.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingScheme {
    dims: Dims,
    pi1: Mat,
    pi2: Mat,
    pi3: Mat,
    pi4: Mat,
    n1: Mat,
    pi1_left: Mat,
    pi2_left: Mat,
    pi3_left: Mat,
    noise: LaplaceParams,
    seed: u64,
}

/// Draws a fresh scheme. Deterministic in `seed`.
pub fn keygen(dims: Dims, scales: Scales, noise: LaplaceParams, seed: u64) -> Result<EncodingScheme> {
    dims.validate()?;
    if !(noise.sigma > 0.0) {
        return Err(Error::Config(format!(
            "noise scale must be > 0, got {}",
            noise.sigma
        )));
    }
    ensure_dim("noise mean", dims.noise_dim(), noise.mu.len())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut last = None;
    // Full-rank draws can still be too ill-conditioned for the identities to
    // hold at SCHEME_TOLERANCE in float64; such draws are replaced.
    for _ in 0..KEYGEN_ATTEMPTS {
        let pi1 = linalg::gen_full_col_rank(dims.ny_tilde, dims.ny, scales.pi1, &mut rng)?;
        let pi2 = linalg::gen_full_col_rank(dims.nzeta_tilde, dims.nzeta, scales.pi2, &mut rng)?;
        let pi3 = linalg::gen_full_col_rank(dims.nu_tilde, dims.nu, scales.pi3, &mut rng)?;
        let pi4 = gen_full_rank(dims.nu_tilde, dims.ny_tilde, scales.pi4, &mut rng)?;
        let n1 = linalg::kernel_basis(&pi1)?;
        match EncodingScheme::from_parts(dims, pi1, pi2, pi3, pi4, n1, noise.clone(), seed) {
            Ok(s) => return Ok(s),
            Err(e @ (Error::InvalidScheme(_) | Error::Rank(_))) => {
                log::debug!("redrawing scheme: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "no valid scheme after {KEYGEN_ATTEMPTS} draws: {}",
        last.map_or_else(String::new, |e| e.to_string())
    )))
}

const KEYGEN_ATTEMPTS: usize = 16;

fn gen_full_rank<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Result<Mat> {
    if rows >= cols {
        linalg::gen_full_col_rank(rows, cols, scale, rng)
    } else {
        Ok(linalg::gen_full_col_rank(cols, rows, scale, rng)?.transpose())
    }
}

fn full_rank(m: &Mat) -> bool {
    if m.nrows() >= m.ncols() {
        linalg::has_full_column_rank(m)
    } else {
        linalg::has_full_column_rank(&m.transpose())
    }
}

fn check_shape(what: &'static str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    ensure_dim(what, rows, m.nrows())?;
    ensure_dim(what, cols, m.ncols())
}

impl EncodingScheme {
    /// Assembles a scheme from explicit matrices, computing the left inverses.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dims: Dims,
        pi1: Mat,
        pi2: Mat,
        pi3: Mat,
        pi4: Mat,
        n1: Mat,
        noise: LaplaceParams,
        seed: u64,
    ) -> Result<Self> {
        let pi1_left = linalg::left_inverse(&pi1)?;
        let pi2_left = linalg::left_inverse(&pi2)?;
        let pi3_left = linalg::left_inverse(&pi3)?;
        let scheme = Self {
            dims,
            pi1,
            pi2,
            pi3,
            pi4,
            n1,
            pi1_left,
            pi2_left,
            pi3_left,
            noise,
            seed,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    /// Checks every structural invariant of the key material.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        d.validate()?;
        check_shape("Pi1", &self.pi1, d.ny_tilde, d.ny)?;
        check_shape("Pi2", &self.pi2, d.nzeta_tilde, d.nzeta)?;
        check_shape("Pi3", &self.pi3, d.nu_tilde, d.nu)?;
        check_shape("Pi4", &self.pi4, d.nu_tilde, d.ny_tilde)?;
        check_shape("N1", &self.n1, d.ny_tilde, d.noise_dim())?;
        check_shape("Pi1_left", &self.pi1_left, d.ny, d.ny_tilde)?;
        check_shape("Pi2_left", &self.pi2_left, d.nzeta, d.nzeta_tilde)?;
        check_shape("Pi3_left", &self.pi3_left, d.nu, d.nu_tilde)?;
        ensure_dim("noise mean", d.noise_dim(), self.noise.mu.len())?;
        if !(self.noise.sigma > 0.0) || !self.noise.sigma.is_finite() {
            return Err(Error::InvalidScheme("noise scale must be > 0".into()));
        }
        for (name, l, p) in [
            ("Pi1", &self.pi1_left, &self.pi1),
            ("Pi2", &self.pi2_left, &self.pi2),
            ("Pi3", &self.pi3_left, &self.pi3),
        ] {
            let r = linalg::identity_residual(&(l * p));
            if r > SCHEME_TOLERANCE {
                return Err(Error::InvalidScheme(format!(
                    "{name}_left * {name} deviates from identity by {r:e}"
                )));
            }
        }
        let r = linalg::max_abs(&(&self.pi1_left * &self.n1));
        if r > SCHEME_TOLERANCE {
            return Err(Error::InvalidScheme(format!(
                "Pi1_left * N1 deviates from zero by {r:e}"
            )));
        }
        let (_, l2) = linalg::norms(&self.n1);
        if let Some(i) = l2.iter().position(|&n| n < linalg::ZERO_ROW_TOLERANCE) {
            return Err(Error::InvalidScheme(format!("N1 row {i} is zero")));
        }
        if !full_rank(&self.pi4) {
            return Err(Error::InvalidScheme("Pi4 is not full rank".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn pi1(&self) -> &Mat {
        &self.pi1
    }
    pub fn pi2(&self) -> &Mat {
        &self.pi2
    }
    pub fn pi3(&self) -> &Mat {
        &self.pi3
    }
    pub fn pi4(&self) -> &Mat {
        &self.pi4
    }
    pub fn n1(&self) -> &Mat {
        &self.n1
    }
    pub fn pi1_left(&self) -> &Mat {
        &self.pi1_left
    }
    pub fn pi2_left(&self) -> &Mat {
        &self.pi2_left
    }
    pub fn pi3_left(&self) -> &Mat {
        &self.pi3_left
    }
    pub fn noise(&self) -> &LaplaceParams {
        &self.noise
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The matrices a cloud needs to run target algorithms for this scheme.
    pub fn target_material(&self) -> TargetMaterial {
        TargetMaterial {
            dims: self.dims,
            pi1_left: self.pi1_left.clone(),
            pi2: self.pi2.clone(),
            pi2_left: self.pi2_left.clone(),
            pi3: self.pi3.clone(),
            pi4: self.pi4.clone(),
        }
    }

    /// Encodes `y` with a fresh Laplace draw. The draw is not returned.
    pub fn encode_input<R: Rng + ?Sized>(&self, step: u64, y: &Vector, rng: &mut R) -> Result<EncodedInput> {
        let s = privacy::laplace_sample(&self.noise, self.dims.noise_dim(), rng)?;
        self.encode_input_with_noise(step, y, &s)
    }

    /// Encodes `y` with caller-supplied kernel noise `s`.
    pub fn encode_input_with_noise(&self, step: u64, y: &Vector, s: &Vector) -> Result<EncodedInput> {
        ensure_dim("input y", self.dims.ny, y.len())?;
        ensure_dim("noise s", self.dims.noise_dim(), s.len())?;
        Ok(EncodedInput {
            step,
            ytilde: &self.pi1 * y + &self.n1 * s,
        })
    }

    pub fn decode_input(&self, e: &EncodedInput) -> Result<Vector> {
        ensure_dim("encoded input", self.dims.ny_tilde, e.ytilde.len())?;
        Ok(&self.pi1_left * &e.ytilde)
    }

    pub fn encode_utility(&self, u: &Vector, input: &EncodedInput) -> Result<EncodedUtility> {
        encode_utility(&self.pi3, &self.pi4, self.dims, u, input)
    }

    /// `Pi3_left (utilde - Pi4 ytilde)`; both halves must belong to the same step.
    pub fn decode_utility(&self, eu: &EncodedUtility, ei: &EncodedInput) -> Result<Vector> {
        if eu.step != ei.step {
            return Err(Error::Protocol(format!(
                "utility for step {} decoded against input of step {}",
                eu.step, ei.step
            )));
        }
        ensure_dim("encoded utility", self.dims.nu_tilde, eu.utilde.len())?;
        ensure_dim("encoded input", self.dims.ny_tilde, ei.ytilde.len())?;
        Ok(&self.pi3_left * (&eu.utilde - &self.pi4 * &ei.ytilde))
    }

    pub fn immerse_state(&self, zeta: &Vector) -> Result<Vector> {
        ensure_dim("state", self.dims.nzeta, zeta.len())?;
        Ok(&self.pi2 * zeta)
    }

    pub fn recover_state(&self, zeta_tilde: &Vector) -> Result<Vector> {
        ensure_dim("encoded state", self.dims.nzeta_tilde, zeta_tilde.len())?;
        Ok(&self.pi2_left * zeta_tilde)
    }

    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(SCHEME_MAGIC)?;
        w.write_all(&SCHEME_VERSION.to_le_bytes())?;
        write_dims(w, &self.dims)?;
        for m in [
            &self.pi1,
            &self.pi2,
            &self.pi3,
            &self.pi4,
            &self.n1,
            &self.pi1_left,
            &self.pi2_left,
            &self.pi3_left,
        ] {
            linalg::write_mat(w, m)?;
        }
        linalg::write_vector(w, &self.noise.mu)?;
        w.write_all(&self.noise.sigma.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read + ?Sized>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        linalg::read_exact(r, &mut magic)?;
        if &magic != SCHEME_MAGIC {
            return Err(Error::Format(format!("bad scheme magic {magic:?}")));
        }
        let mut version = [0u8; 2];
        linalg::read_exact(r, &mut version)?;
        let version = u16::from_le_bytes(version);
        if version != SCHEME_VERSION {
            return Err(Error::Format(format!(
                "unsupported scheme version {version} (expected {SCHEME_VERSION})"
            )));
        }
        let dims = read_dims(r)?;
        let mut next = || linalg::read_mat(r);
        let (pi1, pi2, pi3, pi4, n1) = (next()?, next()?, next()?, next()?, next()?);
        let (pi1_left, pi2_left, pi3_left) = (next()?, next()?, next()?);
        let mu = linalg::read_vector(r)?;
        let mut b = [0u8; 8];
        linalg::read_exact(r, &mut b)?;
        let sigma = f64::from_le_bytes(b);
        let seed = linalg::read_u64(r)?;
        let noise = LaplaceParams::new(mu, sigma).map_err(|e| Error::Format(e.to_string()))?;
        let scheme = Self {
            dims,
            pi1,
            pi2,
            pi3,
            pi4,
            n1,
            pi1_left,
            pi2_left,
            pi3_left,
            noise,
            seed,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn write_dims<W: Write + ?Sized>(w: &mut W, d: &Dims) -> Result<()> {
    for n in [d.ny, d.nu, d.nzeta, d.ny_tilde, d.nu_tilde, d.nzeta_tilde] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_dims<R: Read + ?Sized>(r: &mut R) -> Result<Dims> {
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = usize::try_from(linalg::read_u64(r)?)
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
    }
    let dims = Dims {
        ny: dims[0],
        nu: dims[1],
        nzeta: dims[2],
        ny_tilde: dims[3],
        nu_tilde: dims[4],
        nzeta_tilde: dims[5],
    };
    dims.validate()
        .map_err(|e| Error::Format(format!("dimension header: {e}")))?;
    Ok(dims)
}

pub fn save_scheme(scheme: &EncodingScheme, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    scheme.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_scheme(path: impl AsRef<Path>) -> Result<EncodingScheme> {
    let mut r = BufReader::new(File::open(path)?);
    EncodingScheme::read_from(&mut r)
}

fn encode_utility(pi3: &Mat, pi4: &Mat, dims: Dims, u: &Vector, input: &EncodedInput) -> Result<EncodedUtility> {
    ensure_dim("utility u", dims.nu, u.len())?;
    ensure_dim("encoded input", dims.ny_tilde, input.ytilde.len())?;
    Ok(EncodedUtility {
        step: input.step,
        utilde: pi3 * u + pi4 * &input.ytilde,
    })
}

/// Matrices shared with the cloud: enough to run a target algorithm, not
/// enough to decode its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaterial {
    dims: Dims,
    pi1_left: Mat,
    pi2: Mat,
    pi2_left: Mat,
    pi3: Mat,
    pi4: Mat,
}

impl TargetMaterial {
    /// Shape-checked constructor; no rank conditions are enforced.
    pub fn from_parts(dims: Dims, pi1_left: Mat, pi2: Mat, pi2_left: Mat, pi3: Mat, pi4: Mat) -> Result<Self> {
        check_shape("Pi1_left", &pi1_left, dims.ny, dims.ny_tilde)?;
        check_shape("Pi2", &pi2, dims.nzeta_tilde, dims.nzeta)?;
        check_shape("Pi2_left", &pi2_left, dims.nzeta, dims.nzeta_tilde)?;
        check_shape("Pi3", &pi3, dims.nu_tilde, dims.nu)?;
        check_shape("Pi4", &pi4, dims.nu_tilde, dims.ny_tilde)?;
        Ok(Self {
            dims,
            pi1_left,
            pi2,
            pi2_left,
            pi3,
            pi4,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn pi1_left(&self) -> &Mat {
        &self.pi1_left
    }
    pub fn pi2(&self) -> &Mat {
        &self.pi2
    }
    pub fn pi2_left(&self) -> &Mat {
        &self.pi2_left
    }
    pub fn pi3(&self) -> &Mat {
        &self.pi3
    }
    pub fn pi4(&self) -> &Mat {
        &self.pi4
    }

    /// Six u64 dims, then Pi1_left, Pi2, Pi2_left, Pi3, Pi4.
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        write_dims(w, &self.dims)?;
        for m in [&self.pi1_left, &self.pi2, &self.pi2_left, &self.pi3, &self.pi4] {
            linalg::write_mat(w, m)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read + ?Sized>(r: &mut R) -> Result<Self> {
        let dims = read_dims(r)?;
        let mut next = || linalg::read_mat(r);
        let (pi1_left, pi2, pi2_left, pi3, pi4) = (next()?, next()?, next()?, next()?, next()?);
        Self::from_parts(dims, pi1_left, pi2, pi2_left, pi3, pi4)
    }

    /// Cloud-side recovery of the input the original algorithm consumes.
    pub fn decode_input(&self, e: &EncodedInput) -> Result<Vector> {
        ensure_dim("encoded input", self.dims.ny_tilde, e.ytilde.len())?;
        Ok(&self.pi1_left * &e.ytilde)
    }

    pub fn encode_utility(&self, u: &Vector, input: &EncodedInput) -> Result<EncodedUtility> {
        encode_utility(&self.pi3, &self.pi4, self.dims, u, input)
    }
}
