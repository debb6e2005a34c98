//! Laplace noise, sensitivities and the element-wise differential-privacy
//! bounds of the affine encoding.
//!
//! The noise scale `sigma` is the per-component Laplace scale `b` of the
//! density `exp(-|x - mu| / b) / 2b`; it is *not* a standard deviation (the
//! variance of one component is `2 b²`).
//!
//! For encoded input coordinate `i` and encoded utility coordinate `j` the
//! bounds are
//!
//! ```text
//! eps_y[i] = |Pi1[i]|_1 * delta_y / (|N1[i]|_2 * sigma)
//! eps_u[j] = |Pi3[j]|_1 * delta_u / (|(Pi4 N1)[j]|_2 * sigma)
//! ```
//!
//! Guarantees are per coordinate and per step; nothing here composes across
//! repeated releases of the same input.

use std::fmt;
use std::io::Write;

use rand::distributions::Open01;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::scheme::EncodingScheme;

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceParams {
    pub mu: Vector,
    /// Per-component scale `b`. Zero is accepted as the degenerate point mass at `mu`.
    pub sigma: f64,
}

impl LaplaceParams {
    pub fn new(mu: Vector, sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Config(format!("Laplace scale must be >= 0, got {sigma}")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("Laplace mean must be finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn centered(dim: usize, sigma: f64) -> Result<Self> {
        Self::new(Vector::zeros(dim), sigma)
    }
}

/// One Laplace draw by inverse CDF from a uniform on the open unit interval.
pub fn laplace_scalar<R: Rng + ?Sized>(mu: f64, b: f64, rng: &mut R) -> f64 {
    if b == 0.0 {
        return mu;
    }
    let p: f64 = rng.sample(Open01);
    let u = p - 0.5;
    mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn laplace_cdf(x: f64, mu: f64, b: f64) -> f64 {
    let z = (x - mu) / b;
    if z < 0.0 {
        0.5 * z.exp()
    } else {
        1.0 - 0.5 * (-z).exp()
    }
}

/// I.i.d. Laplace vector with per-component means `params.mu`.
pub fn laplace_sample<R: Rng + ?Sized>(
    params: &LaplaceParams,
    dim: usize,
    rng: &mut R,
) -> Result<Vector> {
    if dim == 0 {
        return Err(Error::Config("Laplace sample dimension must be >= 1".into()));
    }
    crate::error::ensure_dim("Laplace mean", dim, params.mu.len())?;
    Ok(Vector::from_iterator(
        dim,
        params.mu.iter().map(|&m| laplace_scalar(m, params.sigma, rng)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub delta_y: f64,
    pub delta_u: f64,
}

impl Sensitivity {
    pub fn new(delta_y: f64, delta_u: f64) -> Result<Self> {
        for (name, d) in [("delta_y", delta_y), ("delta_u", delta_u)] {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {d}")));
            }
        }
        Ok(Self { delta_y, delta_u })
    }
}

/// Row-wise bound `|coding[i]|_1 * delta / (|noise_dirs[i]|_2 * sigma)`.
///
/// `coding` is the matrix multiplying the private signal and `noise_dirs`
/// the matrix multiplying the Laplace vector in the same encoded coordinate.
pub fn epsilon_rows(coding: &Mat, noise_dirs: &Mat, delta: f64, sigma: f64) -> Result<Vec<f64>> {
    crate::error::ensure_dim("noise direction rows", coding.nrows(), noise_dirs.nrows())?;
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::Config(format!("sensitivity must be >= 0, got {delta}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise scale must be > 0, got {sigma}")));
    }
    let (l1, _) = linalg::norms(coding);
    let (_, l2) = linalg::norms(noise_dirs);
    l1.iter()
        .zip(&l2)
        .enumerate()
        .map(|(i, (&a, &n))| {
            if n == 0.0 {
                Err(Error::InvalidScheme(format!(
                    "noise direction row {i} is zero; the coordinate carries no noise"
                )))
            } else {
                Ok(a * delta / (n * sigma))
            }
        })
        .collect()
}

pub fn epsilon_y(scheme: &EncodingScheme, delta_y: f64) -> Result<Vec<f64>> {
    epsilon_rows(scheme.pi1(), scheme.n1(), delta_y, scheme.noise().sigma)
}

/// Utility bound, reading the noise row as row `j` of the product `Pi4 * N1`.
pub fn epsilon_u(scheme: &EncodingScheme, delta_u: f64) -> Result<Vec<f64>> {
    let pi4_n1 = scheme.pi4() * scheme.n1();
    epsilon_rows(scheme.pi3(), &pi4_n1, delta_u, scheme.noise().sigma)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Smallest `sigma` for which every row bound meets its target.
///
/// The bounds are proportional to `1/sigma`, so the answer is the largest row
/// value of `|coding[i]|_1 * delta / (|noise[i]|_2 * target)` over both maps.
pub fn calibrate_sigma(
    scheme: &EncodingScheme,
    sensitivity: Sensitivity,
    eps_y_target: f64,
    eps_u_target: f64,
) -> Result<f64> {
    calibrate_sigma_for(
        scheme.pi1(),
        scheme.n1(),
        scheme.pi3(),
        scheme.pi4(),
        sensitivity,
        eps_y_target,
        eps_u_target,
    )
}

/// Matrix-level form of [`calibrate_sigma`].
pub fn calibrate_sigma_for(
    pi1: &Mat,
    n1: &Mat,
    pi3: &Mat,
    pi4: &Mat,
    sensitivity: Sensitivity,
    eps_y_target: f64,
    eps_u_target: f64,
) -> Result<f64> {
    for (name, t) in [("eps_y target", eps_y_target), ("eps_u target", eps_u_target)] {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Config(format!("{name} must be > 0, got {t}")));
        }
    }
    // At sigma = 1 the rows are exactly the numerators over the noise norms.
    let ey = epsilon_rows(pi1, n1, sensitivity.delta_y, 1.0)?;
    let eu = epsilon_rows(pi3, &(pi4 * n1), sensitivity.delta_u, 1.0)?;
    let sigma = (max_of(&ey) / eps_y_target).max(max_of(&eu) / eps_u_target);
    if !(sigma > 0.0) {
        return Err(Error::Config(
            "both sensitivities are zero; any positive sigma meets the targets".into(),
        ));
    }
    Ok(sigma)
}

#[derive(Debug, Clone)]
pub struct PrivacyReport {
    pub eps_y_rows: Vec<f64>,
    pub eps_u_rows: Vec<f64>,
    pub eps_y_max: f64,
    pub eps_u_max: f64,
    pub sensitivity: Sensitivity,
    pub sigma: f64,
    /// Condition numbers of Pi1..Pi4.
    pub condition_numbers: [f64; 4],
}

pub fn privacy_report(scheme: &EncodingScheme, sensitivity: Sensitivity) -> Result<PrivacyReport> {
    let eps_y_rows = epsilon_y(scheme, sensitivity.delta_y)?;
    let eps_u_rows = epsilon_u(scheme, sensitivity.delta_u)?;
    let pi4 = scheme.pi4();
    let pi4_cond = if pi4.nrows() >= pi4.ncols() {
        linalg::condition_number(pi4)
    } else {
        linalg::condition_number(&pi4.transpose())
    };
    Ok(PrivacyReport {
        eps_y_max: max_of(&eps_y_rows),
        eps_u_max: max_of(&eps_u_rows),
        eps_y_rows,
        eps_u_rows,
        sensitivity,
        sigma: scheme.noise().sigma,
        condition_numbers: [
            linalg::condition_number(scheme.pi1()),
            linalg::condition_number(scheme.pi2()),
            linalg::condition_number(scheme.pi3()),
            pi4_cond,
        ],
    })
}

/// Distance from the `eps = 0` ideal: the largest bound over all coordinates.
pub fn perfect_secrecy_margin(report: &PrivacyReport) -> f64 {
    report.eps_y_max.max(report.eps_u_max)
}

impl PrivacyReport {
    /// `map,row,epsilon` rows for every encoded coordinate.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["map", "row", "epsilon"])?;
        for (map, rows) in [("y", &self.eps_y_rows), ("u", &self.eps_u_rows)] {
            for (i, e) in rows.iter().enumerate() {
                out.write_record([map.to_string(), i.to_string(), format!("{e:e}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for PrivacyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "element-wise privacy report")?;
        writeln!(f, "  sigma (Laplace scale b)  {:e}", self.sigma)?;
        writeln!(
            f,
            "  sensitivities            delta_y={:e} delta_u={:e}",
            self.sensitivity.delta_y, self.sensitivity.delta_u
        )?;
        writeln!(f, "  eps_y max                {:e}", self.eps_y_max)?;
        writeln!(f, "  eps_u max                {:e}", self.eps_u_max)?;
        writeln!(f, "  perfect-secrecy margin   {:e}", perfect_secrecy_margin(self))?;
        let [c1, c2, c3, c4] = self.condition_numbers;
        writeln!(
            f,
            "  cond(Pi1..Pi4)           {c1:.3e} {c2:.3e} {c3:.3e} {c4:.3e}"
        )?;
        for (i, e) in self.eps_y_rows.iter().enumerate() {
            writeln!(f, "  eps_y[{i}] = {e:e}")?;
        }
        for (j, e) in self.eps_u_rows.iter().enumerate() {
            writeln!(f, "  eps_u[{j}] = {e:e}")?;
        }
        Ok(())
    }
}

/// Histogram estimate of the worst log-probability ratio for one encoded coordinate.
#[derive(Debug, Clone)]
pub struct CoordinateProbe {
    pub coordinate: usize,
    pub analytic_eps: f64,
    /// Largest `|ln(count_y / count_y')|` over bins with enough mass.
    pub max_log_ratio: f64,
    /// Largest `|ln ratio| - slack` over the same bins, where
    /// `slack = z * sqrt(1/a + 1/b)` for bin counts `a`, `b`.
    pub max_excess: f64,
    pub bins_used: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub delta_l1: f64,
    pub trials: usize,
    pub z: f64,
    pub coordinates: Vec<CoordinateProbe>,
}

impl ProbeReport {
    /// Whether every coordinate's excess stays below its analytic bound.
    pub fn within_bound(&self) -> bool {
        self.coordinates
            .iter()
            .all(|c| c.max_excess <= c.analytic_eps)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub trials: usize,
    pub bins: usize,
    /// Bins where either count is below this are skipped.
    pub min_count: usize,
    /// Standard-error multiplier for the per-bin slack.
    pub z: f64,
}

impl ProbeConfig {
    pub const MIN_TRIALS: usize = 100_000;

    pub fn new(trials: usize, bins: usize) -> Self {
        Self {
            trials,
            bins,
            min_count: 50,
            z: 4.0,
        }
    }
}

/// Empirical check of the input bound: encode `y` and `y_prime` `trials` times
/// each and compare per-coordinate histograms of the encoded values.
///
/// Advisory only: the bound it is compared against treats each encoded
/// coordinate as Laplace, which is exact only when that row of `N1` has a
/// single nonzero entry.
pub fn adjacency_ratio_probe<R: Rng + ?Sized>(
    scheme: &EncodingScheme,
    y: &Vector,
    y_prime: &Vector,
    config: ProbeConfig,
    rng: &mut R,
) -> Result<ProbeReport> {
    if config.trials < ProbeConfig::MIN_TRIALS {
        return Err(Error::Config(format!(
            "probe needs at least {} trials, got {}",
            ProbeConfig::MIN_TRIALS,
            config.trials
        )));
    }
    if config.bins < 2 {
        return Err(Error::Config("probe needs at least two bins".into()));
    }
    let dims = scheme.dims();
    crate::error::ensure_dim("probe input", dims.ny, y.len())?;
    crate::error::ensure_dim("probe input", dims.ny, y_prime.len())?;

    let delta_l1 = (y - y_prime).lp_norm(1);
    let eps = epsilon_y(scheme, delta_l1)?;

    let n = dims.ny_tilde;
    let mut a: Vec<Vec<f64>> = vec![Vec::with_capacity(config.trials); n];
    let mut b: Vec<Vec<f64>> = vec![Vec::with_capacity(config.trials); n];
    for _ in 0..config.trials {
        let e = scheme.encode_input(0, y, rng)?;
        let e2 = scheme.encode_input(0, y_prime, rng)?;
        for i in 0..n {
            a[i].push(e.ytilde[i]);
            b[i].push(e2.ytilde[i]);
        }
    }

    let coordinates = (0..n)
        .map(|i| {
            let (max_log_ratio, max_excess, bins_used) =
                histogram_log_ratio(&a[i], &b[i], config);
            CoordinateProbe {
                coordinate: i,
                analytic_eps: eps[i],
                max_log_ratio,
                max_excess,
                bins_used,
            }
        })
        .collect();

    Ok(ProbeReport {
        delta_l1,
        trials: config.trials,
        z: config.z,
        coordinates,
    })
}

fn histogram_log_ratio(a: &[f64], b: &[f64], config: ProbeConfig) -> (f64, f64, usize) {
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let q = |p: f64| pooled[((pooled.len() - 1) as f64 * p) as usize];
    let (lo, hi) = (q(0.005), q(0.995));
    if !(hi > lo) {
        return (0.0, f64::NEG_INFINITY, 0);
    }
    let width = (hi - lo) / config.bins as f64;
    let bin_of = |x: f64| -> Option<usize> {
        if x < lo || x >= hi {
            None
        } else {
            Some((((x - lo) / width) as usize).min(config.bins - 1))
        }
    };
    let mut ca = vec![0usize; config.bins];
    let mut cb = vec![0usize; config.bins];
    a.iter().filter_map(|&x| bin_of(x)).for_each(|k| ca[k] += 1);
    b.iter().filter_map(|&x| bin_of(x)).for_each(|k| cb[k] += 1);

    let scale = a.len() as f64 / b.len() as f64;
    let mut max_lr = 0.0_f64;
    let mut max_excess = f64::NEG_INFINITY;
    let mut used = 0;
    for (&x, &y) in ca.iter().zip(&cb) {
        if x < config.min_count || y < config.min_count {
            continue;
        }
        used += 1;
        let (x, y) = (x as f64, y as f64);
        let lr = (x / (y * scale)).ln().abs();
        let slack = config.z * (1.0 / x + 1.0 / y).sqrt();
        max_lr = max_lr.max(lr);
        max_excess = max_excess.max(lr - slack);
    }
    (max_lr, max_excess, used)
}
