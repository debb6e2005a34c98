//! Dynamic algorithms `zeta' = f(zeta, y, w)`, `u = g(zeta, y, w)` and their
//! encoded target versions.
//!
//! A [`TargetAlgorithm`] owns the lifted state `zetatilde` and runs
//!
//! ```text
//! u         = g(Pi2_left zetatilde, Pi1_left ytilde, w)
//! zetatilde = Pi2 f(Pi2_left zetatilde, Pi1_left ytilde, w)
//! utilde    = Pi3 u + Pi4 ytilde
//! ```
//!
//! or, with `local_steps = T`, `T` transitions on one input followed by the
//! utility at the final state.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::scheme::{Dims, EncodedInput, EncodedUtility, EncodingScheme, TargetMaterial};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlgDims {
    pub nzeta: usize,
    pub ny: usize,
    pub nu: usize,
    pub nw: usize,
}

impl AlgDims {
    fn check_against(&self, d: &Dims) -> Result<()> {
        ensure_dim("algorithm state", d.nzeta, self.nzeta)?;
        ensure_dim("algorithm input", d.ny, self.ny)?;
        ensure_dim("algorithm utility", d.nu, self.nu)
    }
}

/// An algorithm in the form `zeta' = f(zeta, y, w)`, `u = g(zeta, y, w)`.
///
/// `step` is passed through for error context and time-varying laws; `f` and
/// `g` must otherwise be deterministic.
pub trait DynamicAlgorithm: Send + Sync {
    fn dims(&self) -> AlgDims;
    fn initial_state(&self) -> Vector;
    fn transition(&self, step: u64, zeta: &Vector, y: &Vector, w: &Vector) -> Result<Vector>;
    fn utility(&self, step: u64, zeta: &Vector, y: &Vector, w: &Vector) -> Result<Vector>;
}

type StepFn = dyn Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync;

/// Algorithm built from two closures.
pub struct FnAlgorithm {
    dims: AlgDims,
    zeta0: Vector,
    f: Box<StepFn>,
    g: Box<StepFn>,
}

impl FnAlgorithm {
    pub fn new<F, G>(dims: AlgDims, zeta0: Vector, f: F, g: G) -> Result<Self>
    where
        F: Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        G: Fn(&Vector, &Vector, &Vector) -> Vector + Send + Sync + 'static,
    {
        ensure_dim("initial state", dims.nzeta, zeta0.len())?;
        Ok(Self {
            dims,
            zeta0,
            f: Box::new(f),
            g: Box::new(g),
        })
    }

    /// `zeta' = zeta`, `u = y`.
    pub fn echo(n: usize) -> Self {
        let dims = AlgDims {
            nzeta: n,
            ny: n,
            nu: n,
            nw: 0,
        };
        Self::new(dims, Vector::zeros(n), |z, _, _| z.clone(), |_, y, _| y.clone())
            .expect("dimensions are consistent")
    }

    /// `zeta' = 0`, `u = 0`.
    pub fn zero(nzeta: usize, ny: usize, nu: usize) -> Self {
        let dims = AlgDims { nzeta, ny, nu, nw: 0 };
        Self::new(
            dims,
            Vector::zeros(nzeta),
            move |_, _, _| Vector::zeros(nzeta),
            move |_, _, _| Vector::zeros(nu),
        )
        .expect("dimensions are consistent")
    }
}

impl DynamicAlgorithm for FnAlgorithm {
    fn dims(&self) -> AlgDims {
        self.dims
    }
    fn initial_state(&self) -> Vector {
        self.zeta0.clone()
    }
    fn transition(&self, _step: u64, zeta: &Vector, y: &Vector, w: &Vector) -> Result<Vector> {
        let out = (self.f)(zeta, y, w);
        ensure_dim("transition output", self.dims.nzeta, out.len())?;
        Ok(out)
    }
    fn utility(&self, _step: u64, zeta: &Vector, y: &Vector, w: &Vector) -> Result<Vector> {
        let out = (self.g)(zeta, y, w);
        ensure_dim("utility output", self.dims.nu, out.len())?;
        Ok(out)
    }
}

/// `zeta' = A zeta + B y + E w`, `u = C zeta + D y`.
#[derive(Debug, Clone)]
pub struct LinearAlgorithm {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub e: Mat,
    pub zeta0: Vector,
}

impl LinearAlgorithm {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat, e: Mat, zeta0: Vector) -> Result<Self> {
        let n = a.nrows();
        ensure_dim("A columns", n, a.ncols())?;
        ensure_dim("B rows", n, b.nrows())?;
        ensure_dim("C columns", n, c.ncols())?;
        ensure_dim("D rows", c.nrows(), d.nrows())?;
        ensure_dim("D columns", b.ncols(), d.ncols())?;
        ensure_dim("E rows", n, e.nrows())?;
        ensure_dim("initial state", n, zeta0.len())?;
        Ok(Self { a, b, c, d, e, zeta0 })
    }

    /// Random system with spectral radius bounded by `radius` via the
    /// infinity norm of `A`. Inputs are weighted by `input_scale`.
    pub fn random<R: Rng + ?Sized>(dims: AlgDims, radius: f64, input_scale: f64, rng: &mut R) -> Self {
        let mut uniform = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let mut a = uniform(dims.nzeta, dims.nzeta);
        let row_max = a.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
        if row_max > 0.0 {
            a *= radius / row_max;
        }
        let b = uniform(dims.nzeta, dims.ny) * input_scale;
        let c = uniform(dims.nu, dims.nzeta);
        let d = uniform(dims.nu, dims.ny) * input_scale;
        let e = uniform(dims.nzeta, dims.nw) * input_scale;
        let zeta0 = Vector::from_fn(dims.nzeta, |_, _| rng.gen_range(-1.0..1.0));
        Self { a, b, c, d, e, zeta0 }
    }
}

impl DynamicAlgorithm for LinearAlgorithm {
    fn dims(&self) -> AlgDims {
        AlgDims {
            nzeta: self.a.nrows(),
            ny: self.b.ncols(),
            nu: self.c.nrows(),
            nw: self.e.ncols(),
        }
    }
    fn initial_state(&self) -> Vector {
        self.zeta0.clone()
    }
    fn transition(&self, _step: u64, zeta: &Vector, y: &Vector, w: &Vector) -> Result<Vector> {
        check_args(self, zeta, y, w)?;
        Ok(&self.a * zeta + &self.b * y + &self.e * w)
    }
    fn utility(&self, _step: u64, zeta: &Vector, y: &Vector, w: &Vector) -> Result<Vector> {
        check_args(self, zeta, y, w)?;
        Ok(&self.c * zeta + &self.d * y)
    }
}

fn check_args(alg: &dyn DynamicAlgorithm, zeta: &Vector, y: &Vector, w: &Vector) -> Result<()> {
    let d = alg.dims();
    ensure_dim("state", d.nzeta, zeta.len())?;
    ensure_dim("input", d.ny, y.len())?;
    ensure_dim("disturbance", d.nw, w.len())
}

/// An algorithm run for `local_steps` transitions per input.
#[derive(Clone)]
pub struct TwoScaleAlgorithm {
    pub inner: Arc<dyn DynamicAlgorithm>,
    pub local_steps: usize,
}

impl TwoScaleAlgorithm {
    pub fn new(inner: Arc<dyn DynamicAlgorithm>, local_steps: usize) -> Result<Self> {
        if local_steps == 0 {
            return Err(Error::Config("local steps must be >= 1".into()));
        }
        Ok(Self { inner, local_steps })
    }

    /// Plain global step: `T` transitions with `ws[t]`, then `g` with `ws[T]`.
    pub fn step(&self, k: u64, zeta: &Vector, y: &Vector, ws: &[Vector]) -> Result<(Vector, Vector)> {
        ensure_dim("local disturbances", self.local_steps + 1, ws.len())?;
        let mut z = zeta.clone();
        for w in &ws[..self.local_steps] {
            z = checked(k, "transition", self.inner.transition(k, &z, y, w)?)?;
        }
        let u = checked(k, "utility", self.inner.utility(k, &z, y, &ws[self.local_steps])?)?;
        Ok((z, u))
    }
}

fn checked(step: u64, what: &str, v: Vector) -> Result<Vector> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Numeric {
            step,
            what: format!("non-finite {what} output"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timescale {
    Single,
    Local(usize),
}

/// The encoded algorithm run by the cloud.
pub struct TargetAlgorithm {
    alg: Arc<dyn DynamicAlgorithm>,
    material: TargetMaterial,
    timescale: Timescale,
    zeta_tilde: Vector,
    step: u64,
}

/// Single-scale target, starting at `Pi2 zeta0`.
pub fn build_target(alg: Arc<dyn DynamicAlgorithm>, material: &TargetMaterial) -> Result<TargetAlgorithm> {
    TargetAlgorithm::new(alg, material, Timescale::Single)
}

pub fn build_target_two_scale(alg: &TwoScaleAlgorithm, material: &TargetMaterial) -> Result<TargetAlgorithm> {
    TargetAlgorithm::new(alg.inner.clone(), material, Timescale::Local(alg.local_steps))
}

impl TargetAlgorithm {
    fn new(alg: Arc<dyn DynamicAlgorithm>, material: &TargetMaterial, timescale: Timescale) -> Result<Self> {
        alg.dims().check_against(&material.dims())?;
        let zeta0 = alg.initial_state();
        ensure_dim("initial state", alg.dims().nzeta, zeta0.len())?;
        let zeta_tilde = material.pi2() * zeta0;
        Ok(Self {
            alg,
            material: material.clone(),
            timescale,
            zeta_tilde,
            step: 0,
        })
    }

    pub fn state(&self) -> &Vector {
        &self.zeta_tilde
    }

    /// Index of the next expected input.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn material(&self) -> &TargetMaterial {
        &self.material
    }

    pub fn local_steps(&self) -> usize {
        match self.timescale {
            Timescale::Single => 1,
            Timescale::Local(t) => t,
        }
    }

    /// One global step with the same `w` for every local iteration.
    pub fn target_step(&mut self, e: &EncodedInput, w: &Vector) -> Result<EncodedUtility> {
        let n = match self.timescale {
            Timescale::Single => 1,
            Timescale::Local(t) => t + 1,
        };
        let ws = vec![w.clone(); n];
        self.target_step_with(e, &ws)
    }

    /// One global step. Single-scale targets take one `w`; two-scale targets
    /// take `T + 1`, one per transition and one for the utility.
    pub fn target_step_with(&mut self, e: &EncodedInput, ws: &[Vector]) -> Result<EncodedUtility> {
        if e.step != self.step {
            return Err(Error::Protocol(format!(
                "target expected step {}, got {}",
                self.step, e.step
            )));
        }
        let k = self.step;
        let m = &self.material;
        let y_bar = m.decode_input(e)?;
        let nw = self.alg.dims().nw;
        for w in ws {
            ensure_dim("disturbance", nw, w.len())?;
        }
        let (next, u) = match self.timescale {
            Timescale::Single => {
                ensure_dim("disturbances", 1, ws.len())?;
                let zeta = m.pi2_left() * &self.zeta_tilde;
                let u = checked(k, "utility", self.alg.utility(k, &zeta, &y_bar, &ws[0])?)?;
                let z = checked(k, "transition", self.alg.transition(k, &zeta, &y_bar, &ws[0])?)?;
                (m.pi2() * z, u)
            }
            Timescale::Local(t) => {
                ensure_dim("local disturbances", t + 1, ws.len())?;
                let mut zt = self.zeta_tilde.clone();
                for w in &ws[..t] {
                    let zeta = m.pi2_left() * &zt;
                    let z = checked(k, "transition", self.alg.transition(k, &zeta, &y_bar, w)?)?;
                    zt = m.pi2() * z;
                }
                let zeta = m.pi2_left() * &zt;
                let u = checked(k, "utility", self.alg.utility(k, &zeta, &y_bar, &ws[t])?)?;
                (zt, u)
            }
        };
        let eu = m.encode_utility(&u, e)?;
        if !next.iter().chain(eu.utilde.iter()).all(|x| x.is_finite()) {
            return Err(Error::Numeric {
                step: k,
                what: "non-finite encoded state or utility".into(),
            });
        }
        self.zeta_tilde = next;
        self.step += 1;
        Ok(eu)
    }
}

/// Plain run of `alg`. Returns `K + 1` states and `K` utilities.
pub fn run_reference(alg: &dyn DynamicAlgorithm, inputs: &[(Vector, Vector)]) -> Result<(Vec<Vector>, Vec<Vector>)> {
    let mut zeta = alg.initial_state();
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut utilities = Vec::with_capacity(inputs.len());
    states.push(zeta.clone());
    for (k, (y, w)) in inputs.iter().enumerate() {
        let k = k as u64;
        utilities.push(checked(k, "utility", alg.utility(k, &zeta, y, w)?)?);
        zeta = checked(k, "transition", alg.transition(k, &zeta, y, w)?)?;
        states.push(zeta.clone());
    }
    Ok((states, utilities))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImmersionResidual {
    pub step: u64,
    /// `max |zetatilde_k - Pi2 zeta_k|`.
    pub residual: f64,
    /// `max |zetatilde_k|`.
    pub state_norm: f64,
}

/// Plain and encoded runs of the same inputs side by side.
#[derive(Debug, Clone)]
pub struct Lockstep {
    pub residuals: Vec<ImmersionResidual>,
    pub plain_utilities: Vec<Vector>,
    pub decoded_utilities: Vec<Vector>,
}

impl Lockstep {
    /// Largest `|u - u_hat|_inf / max(1, |u|_inf)` over the run.
    pub fn max_relative_utility_error(&self) -> f64 {
        self.plain_utilities
            .iter()
            .zip(&self.decoded_utilities)
            .map(|(u, uh)| (u - uh).amax() / u.amax().max(1.0))
            .fold(0.0, f64::max)
    }

    /// Largest `residual / (1 + |zetatilde|_inf)` over the run.
    pub fn max_relative_residual(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.residual / (1.0 + r.state_norm))
            .fold(0.0, f64::max)
    }
}

/// Runs the plain algorithm and its single-scale target through the full
/// encode, target, decode path.
pub fn lockstep<R: Rng + ?Sized>(
    alg: Arc<dyn DynamicAlgorithm>,
    scheme: &EncodingScheme,
    inputs: &[(Vector, Vector)],
    rng: &mut R,
) -> Result<Lockstep> {
    let material = scheme.target_material();
    let mut target = build_target(alg.clone(), &material)?;
    let (states, plain_utilities) = run_reference(alg.as_ref(), inputs)?;
    let residual = |k: u64, zt: &Vector, z: &Vector| ImmersionResidual {
        step: k,
        residual: (zt - scheme.pi2() * z).amax(),
        state_norm: zt.amax(),
    };
    let mut residuals = vec![residual(0, target.state(), &states[0])];
    let mut decoded_utilities = Vec::with_capacity(inputs.len());
    for (k, (y, w)) in inputs.iter().enumerate() {
        let ei = scheme.encode_input(k as u64, y, rng)?;
        let eu = target.target_step(&ei, w)?;
        decoded_utilities.push(scheme.decode_utility(&eu, &ei)?);
        residuals.push(residual(k as u64 + 1, target.state(), &states[k + 1]));
    }
    Ok(Lockstep {
        residuals,
        plain_utilities,
        decoded_utilities,
    })
}

pub fn immersion_residuals<R: Rng + ?Sized>(
    alg: Arc<dyn DynamicAlgorithm>,
    scheme: &EncodingScheme,
    inputs: &[(Vector, Vector)],
    rng: &mut R,
) -> Result<Vec<ImmersionResidual>> {
    Ok(lockstep(alg, scheme, inputs, rng)?.residuals)
}

/// Writes `step,{prefix}_0,...` rows, one per vector.
pub fn write_trajectory_csv<W: Write>(w: W, prefix: &str, rows: &[Vector]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n = rows.first().map_or(0, |v| v.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..n).map(|i| format!("{prefix}_{i}")));
    out.write_record(&header)?;
    for (k, v) in rows.iter().enumerate() {
        ensure_dim("trajectory row", n, v.len())?;
        let mut rec = vec![k.to_string()];
        rec.extend(v.iter().map(|x| format!("{x:e}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::LaplaceParams;
    use crate::scheme::{keygen, Scales};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn make_scheme(ny: usize, nu: usize, nzeta: usize, scales: Scales, sigma: f64, seed: u64) -> EncodingScheme {
        let dims = Dims::new((ny, nu, nzeta), (ny + 2, nu + 2, nzeta + 1)).unwrap();
        let noise = LaplaceParams::centered(dims.noise_dim(), sigma).unwrap();
        keygen(dims, scales, noise, seed).unwrap()
    }

    fn inputs(ny: usize, nw: usize, k: usize, rng: &mut ChaCha20Rng) -> Vec<(Vector, Vector)> {
        (0..k)
            .map(|_| {
                (
                    Vector::from_fn(ny, |_, _| rng.gen_range(-1.0..1.0)),
                    Vector::from_fn(nw, |_, _| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect()
    }

    #[test]
    fn echo_decodes_to_input() {
        let s = make_scheme(2, 2, 2, Scales::default(), 1e4, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ins = inputs(2, 0, 20, &mut rng);
        let r = lockstep(Arc::new(FnAlgorithm::echo(2)), &s, &ins, &mut rng).unwrap();
        for ((y, _), uh) in ins.iter().zip(&r.decoded_utilities) {
            assert!((y - uh).amax() <= 1e-6);
        }
    }

    #[test]
    fn zero_algorithm_emits_offset_only() {
        let s = make_scheme(1, 1, 1, Scales::unit(), 1.0, 2);
        let mut t = build_target(Arc::new(FnAlgorithm::zero(1, 1, 1)), &s.target_material()).unwrap();
        let ei = EncodedInput {
            step: 0,
            ytilde: Vector::from_vec(vec![1.0, 2.0, 3.0]),
        };
        let eu = t.target_step(&ei, &Vector::zeros(0)).unwrap();
        assert_eq!(eu.utilde, s.pi4() * &ei.ytilde);
        assert!(t.state().iter().all(|&x| x == 0.0));
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn initial_residual_is_exactly_zero() {
        let s = make_scheme(2, 1, 3, Scales::default(), 1e4, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let dims = AlgDims { nzeta: 3, ny: 2, nu: 1, nw: 1 };
        let alg = LinearAlgorithm::random(dims, 0.9, 1.0, &mut rng);
        let res = immersion_residuals(Arc::new(alg), &s, &inputs(2, 1, 3, &mut rng), &mut rng).unwrap();
        assert_eq!(res[0].residual, 0.0);
    }

    #[test]
    fn linear_target_tracks_plain_run() {
        let s = make_scheme(2, 2, 4, Scales::default(), 1e4, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let dims = AlgDims { nzeta: 4, ny: 2, nu: 2, nw: 1 };
        let alg = LinearAlgorithm::random(dims, 0.9, 1.0, &mut rng);
        let ins = inputs(2, 1, 500, &mut rng);
        let r = lockstep(Arc::new(alg), &s, &ins, &mut rng).unwrap();
        assert!(r.max_relative_residual() <= 1e-9, "{}", r.max_relative_residual());
        assert!(r.max_relative_utility_error() <= 1e-6);
    }

    #[test]
    fn linear_closed_form_reference() {
        // zeta' = 0.5 zeta + y, u = zeta with y = 1: zeta_k = 2 (1 - 0.5^k)
        let m = |x: f64| Mat::from_element(1, 1, x);
        let alg = LinearAlgorithm::new(m(0.5), m(1.0), m(1.0), m(0.0), Mat::zeros(1, 0), Vector::zeros(1)).unwrap();
        let ins = vec![(Vector::from_element(1, 1.0), Vector::zeros(0)); 10];
        let (states, us) = run_reference(&alg, &ins).unwrap();
        for (k, z) in states.iter().enumerate() {
            assert!((z[0] - 2.0 * (1.0 - 0.5f64.powi(k as i32))).abs() < 1e-15);
        }
        assert_eq!(us[3], states[3]);
    }

    #[test]
    fn step_mismatch_rejected() {
        let s = make_scheme(1, 1, 1, Scales::unit(), 1.0, 5);
        let mut t = build_target(Arc::new(FnAlgorithm::echo(1)), &s.target_material()).unwrap();
        let ei = EncodedInput {
            step: 3,
            ytilde: Vector::zeros(3),
        };
        assert!(matches!(t.target_step(&ei, &Vector::zeros(0)), Err(Error::Protocol(_))));
    }

    #[test]
    fn non_finite_output_reports_step() {
        let s = make_scheme(1, 1, 1, Scales::unit(), 1.0, 6);
        let dims = AlgDims { nzeta: 1, ny: 1, nu: 1, nw: 0 };
        let alg = FnAlgorithm::new(
            dims,
            Vector::from_element(1, 1.0),
            |z, _, _| z * 1e300,
            |z, _, _| z.clone(),
        )
        .unwrap();
        let mut t = build_target(Arc::new(alg), &s.target_material()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut failed = None;
        for k in 0..5 {
            let ei = s.encode_input(k, &Vector::zeros(1), &mut rng).unwrap();
            if let Err(e) = t.target_step(&ei, &Vector::zeros(0)) {
                failed = Some(e);
                break;
            }
        }
        assert!(matches!(failed, Some(Error::Numeric { step: 1, .. })), "{failed:?}");
    }

    #[test]
    fn one_local_step_matches_single_scale_state() {
        let s = make_scheme(2, 1, 3, Scales::default(), 1e4, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let dims = AlgDims { nzeta: 3, ny: 2, nu: 1, nw: 1 };
        let alg: Arc<dyn DynamicAlgorithm> = Arc::new(LinearAlgorithm::random(dims, 0.9, 1.0, &mut rng));
        let m = s.target_material();
        let mut single = build_target(alg.clone(), &m).unwrap();
        let mut local = build_target_two_scale(&TwoScaleAlgorithm::new(alg.clone(), 1).unwrap(), &m).unwrap();
        for (k, (y, w)) in inputs(2, 1, 50, &mut rng).iter().enumerate() {
            let ei = s.encode_input(k as u64, y, &mut rng).unwrap();
            single.target_step(&ei, w).unwrap();
            let eu = local.target_step(&ei, w).unwrap();
            assert_eq!(single.state(), local.state());
            let zeta = m.pi2_left() * local.state();
            let u = alg.utility(k as u64, &zeta, &(m.pi1_left() * &ei.ytilde), w).unwrap();
            assert_eq!(eu, m.encode_utility(&u, &ei).unwrap());
        }
    }

    fn gradient_toy_gap(scales: Scales, sigma: f64) -> f64 {
        // gradient descent on 0.5 |zeta - y|^2 with rate 0.1
        let dims = AlgDims { nzeta: 2, ny: 2, nu: 2, nw: 0 };
        let alg = FnAlgorithm::new(
            dims,
            Vector::zeros(2),
            |z, y, _| z - (z - y) * 0.1,
            |z, _, _| z.clone(),
        )
        .unwrap();
        let two = TwoScaleAlgorithm::new(Arc::new(alg), 50).unwrap();
        let s = make_scheme(2, 2, 2, scales, sigma, 8);
        let mut t = build_target_two_scale(&two, &s.target_material()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let y = Vector::from_vec(vec![0.25, -0.75]);
        let ei = s.encode_input(0, &y, &mut rng).unwrap();
        let eu = t.target_step(&ei, &Vector::zeros(0)).unwrap();
        let decoded = s.decode_utility(&eu, &ei).unwrap();
        let (_, plain) = two.step(0, &Vector::zeros(2), &y, &vec![Vector::zeros(0); 51]).unwrap();
        (decoded - plain).amax()
    }

    #[test]
    fn two_scale_gradient_toy_matches_plain() {
        let unit = gradient_toy_gap(Scales::unit(), 1.0);
        assert!(unit <= 1e-8, "{unit:e}");
        // small coding matrices against large noise leave ~1e-8 of input
        // decoding error, which the contraction carries through
        let small = gradient_toy_gap(Scales::default(), 1e4);
        assert!(small <= 1e-6, "{small:e}");
    }

    #[test]
    fn dims_must_match_scheme() {
        let s = make_scheme(1, 1, 1, Scales::unit(), 1.0, 9);
        assert!(matches!(
            build_target(Arc::new(FnAlgorithm::echo(2)), &s.target_material()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn trajectory_csv_layout() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, "z", &[Vector::from_vec(vec![1.0, 2.0]), Vector::zeros(2)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("step,z_0,z_1"));
        assert_eq!(text.lines().count(), 3);
    }
}
