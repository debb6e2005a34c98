//! Two-stage chemical reactor with delayed recycle under an adaptive
//! output-feedback controller, run plainly and through an encoded cloud
//! session.
//!
//! Plant, with `s = sin(k)` and `x1_tau` the delayed first state:
//!
//! ```text
//! x1' = -(1/theta1 + k1) x1 + (1 - R2)/V1 x2 + v1 s x1_tau^2
//! x2' = -(1/theta2 + k2) x1 + R1/V2 x1_tau + F2/V2 u + v2 s x1_tau^3 + v3 x2
//! y   = x1
//! ```
//!
//! Iterated literally these difference equations leave any bounded region
//! within a few steps, so by default they are read as a continuous-time
//! right-hand side and integrated with forward Euler (see [`Discretization`]).

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::algorithm::{AlgDims, DynamicAlgorithm};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::Vector;
use crate::privacy::LaplaceParams;
use crate::protocol::{Client, Cloud, Loopback, Registry, Transport};
use crate::scheme::{keygen, Dims, EncodingScheme, Scales};

pub const CONTROLLER_NAME: &str = "reactor-controller";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReactorParams {
    pub theta1: f64,
    pub theta2: f64,
    pub k1: f64,
    pub k2: f64,
    pub r1: f64,
    pub r2: f64,
    pub v1: f64,
    pub v2: f64,
    pub f2: f64,
    /// Unknown-parameter triple `(v1, v2, v3)`.
    pub vartheta: [f64; 3],
    pub x0: [f64; 2],
}

impl Default for ReactorParams {
    fn default() -> Self {
        Self {
            theta1: 2.0,
            theta2: 2.0,
            k1: 0.3,
            k2: 0.3,
            r1: 0.5,
            r2: 0.5,
            v1: 0.5,
            v2: 0.5,
            f2: 0.5,
            vartheta: [1.0, 1.0, -1.0],
            x0: [-0.5, 2.0],
        }
    }
}

impl ReactorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("V1", self.v1),
            ("V2", self.v2),
            ("F2", self.f2),
        ] {
            if v == 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("reactor parameter {name} must be finite and nonzero")));
            }
        }
        let rest = [self.k1, self.k2, self.r1, self.r2, self.x0[0], self.x0[1]];
        if !rest.iter().chain(&self.vartheta).all(|v| v.is_finite()) {
            return Err(Error::Config("reactor parameters must be finite".into()));
        }
        Ok(())
    }

    /// Time-varying delay `0.5 (3 + sin t)`.
    pub fn delay(&self, t: f64) -> f64 {
        0.5 * (3.0 + t.sin())
    }

    fn rhs(&self, x1: f64, x2: f64, x1_tau: f64, u: f64, s: f64) -> [f64; 2] {
        let [a1, a2, a3] = self.vartheta;
        [
            -(1.0 / self.theta1 + self.k1) * x1 + (1.0 - self.r2) / self.v1 * x2 + a1 * s * x1_tau * x1_tau,
            -(1.0 / self.theta2 + self.k2) * x1
                + self.r1 / self.v2 * x1_tau
                + self.f2 / self.v2 * u
                + a2 * s * x1_tau.powi(3)
                + a3 * x2,
        ]
    }
}

/// How the plant and controller equations advance one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Discretization {
    /// `x_{k+1} = F(x_k, ...)` with `sin(k)` and delay `d_k` in steps.
    Verbatim,
    /// `x_{k+1} = x_k + h F(x_k, ...)` at time `t = k h`, with `sin(t)` and
    /// the delay `d(t)` converted to `round(d / h)` steps.
    ForwardEuler { step: f64 },
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization::ForwardEuler { step: 0.1 }
    }
}

impl Discretization {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Discretization::Verbatim => Ok(()),
            Discretization::ForwardEuler { step } if step > 0.0 && step.is_finite() => Ok(()),
            Discretization::ForwardEuler { step } => {
                Err(Error::Config(format!("Euler step must be > 0, got {step}")))
            }
        }
    }

    fn time(&self, k: u64) -> f64 {
        match *self {
            Discretization::Verbatim => k as f64,
            Discretization::ForwardEuler { step } => k as f64 * step,
        }
    }

    fn steps_per_unit(&self) -> f64 {
        match *self {
            Discretization::Verbatim => 1.0,
            Discretization::ForwardEuler { step } => 1.0 / step,
        }
    }

    /// Delayed index `tau = round(k - d)` in steps, clamped at 0.
    pub fn delayed_index(&self, params: &ReactorParams, k: u64) -> u64 {
        let d = params.delay(self.time(k)) * self.steps_per_unit();
        (k as f64 - d).round().max(0.0) as u64
    }

    /// Largest possible `k - tau`, which bounds the history depth.
    fn max_lag(&self) -> usize {
        // d <= 2 time units
        (2.0 * self.steps_per_unit()).ceil() as usize + 1
    }
}

/// Plant state with the `x1` history the delayed term reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactorState {
    pub x1: f64,
    pub x2: f64,
    pub k: u64,
    /// `x1_{k-len+1} ..= x1_k`; indices before 0 read as `x1_0`.
    history: VecDeque<f64>,
    depth: usize,
}

impl ReactorState {
    pub fn new(params: &ReactorParams, disc: &Discretization) -> Self {
        let depth = disc.max_lag() + 1;
        let mut history = VecDeque::with_capacity(depth);
        history.push_back(params.x0[0]);
        Self {
            x1: params.x0[0],
            x2: params.x0[1],
            k: 0,
            history,
            depth,
        }
    }

    pub fn output(&self) -> f64 {
        self.x1
    }

    /// `x1` at step `tau <= k`.
    pub fn x1_at(&self, tau: u64) -> f64 {
        assert!(tau <= self.k, "delayed index {tau} beyond current step {}", self.k);
        let back = (self.k - tau) as usize;
        assert!(back < self.depth, "delay of {back} steps exceeds history depth {}", self.depth);
        if back >= self.history.len() {
            // before the start of the run
            return self.history[0];
        }
        self.history[self.history.len() - 1 - back]
    }
}

/// Advances the plant one step under input `u`; returns the new output.
pub fn reactor_step(state: &mut ReactorState, params: &ReactorParams, disc: &Discretization, u: f64) -> Result<f64> {
    let k = state.k;
    let tau = disc.delayed_index(params, k);
    let x1_tau = state.x1_at(tau);
    let s = disc.time(k).sin();
    let f = params.rhs(state.x1, state.x2, x1_tau, u, s);
    let (x1, x2) = match *disc {
        Discretization::Verbatim => (f[0], f[1]),
        Discretization::ForwardEuler { step } => (state.x1 + step * f[0], state.x2 + step * f[1]),
    };
    if !(x1.is_finite() && x2.is_finite()) {
        return Err(Error::Numeric {
            step: k,
            what: format!("reactor state diverged (x1={x1}, x2={x2})"),
        });
    }
    state.x1 = x1;
    state.x2 = x2;
    state.k += 1;
    state.history.push_back(x1);
    if state.history.len() > state.depth {
        state.history.pop_front();
    }
    Ok(x1)
}

/// Controller state `[z_hat, r, l]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    pub z_hat: f64,
    pub r: f64,
    pub l: f64,
}

impl Default for ControllerState {
    fn default() -> Self {
        Self {
            z_hat: 0.0,
            r: 1.0,
            l: 1.0,
        }
    }
}

impl ControllerState {
    pub fn to_vector(&self) -> Vector {
        Vector::from_vec(vec![self.z_hat, self.r, self.l])
    }

    pub fn from_vector(v: &Vector) -> Result<Self> {
        ensure_dim("controller state", 3, v.len())?;
        Ok(Self {
            z_hat: v[0],
            r: v[1],
            l: v[2],
        })
    }
}

/// Per-step intermediate quantities of the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerTerms {
    pub rho: f64,
    pub zeta_aux: f64,
    pub delta: f64,
    /// `max{r delta - r^2, rho y^2 + zeta_aux^2}`, shared by both updates.
    pub gain: f64,
    pub u: f64,
}

pub fn controller_terms(c: &ControllerState, y: f64, k: u64) -> Result<ControllerTerms> {
    if !(c.r > 0.0) {
        return Err(Error::Domain {
            step: k,
            what: format!("controller gain r must stay positive, got {}", c.r),
        });
    }
    let (y2, l) = (y * y, c.l);
    let y4 = y2 * y2;
    let rho = (0.1 + y2).powi(2) + 1.01;
    let inner = c.z_hat + c.r * y + l * rho * y;
    let zeta_aux = inner / c.r.sqrt();
    let q = 1.02 + 0.2 * y2 + y4;
    let delta = 2.0 * (2.0 * l * l + l.powi(4) * q)
        * (1.0404 + 1.224 * y2 + 10.56 * y4 + 6.0 * y4 * y2 + 25.0 * y4 * y4)
        + 4.0 * y4 * q.powi(4);
    let gain = (c.r * delta - c.r * c.r).max(rho * y2 + zeta_aux * zeta_aux);
    let u = -c.r * inner;
    Ok(ControllerTerms {
        rho,
        zeta_aux,
        delta,
        gain,
        u,
    })
}

/// One controller update; returns the next state and the action `u_k`.
///
/// The update is given as a right-hand side `F`; `Verbatim` takes
/// `F` as the next state, `ForwardEuler` takes `c + h F`, matching the plant.
pub fn controller_step(c: &ControllerState, y: f64, k: u64, disc: &Discretization) -> Result<(ControllerState, f64)> {
    let t = controller_terms(c, y, k)?;
    let f = [t.u - c.r * c.z_hat - c.r * c.r * y - t.gain * y, t.gain, t.rho * y * y];
    let next = match *disc {
        Discretization::Verbatim => ControllerState {
            z_hat: f[0],
            r: f[1],
            l: f[2],
        },
        Discretization::ForwardEuler { step } => ControllerState {
            z_hat: c.z_hat + step * f[0],
            r: c.r + step * f[1],
            l: c.l + step * f[2],
        },
    };
    Ok((next, t.u))
}

/// The controller as a dynamic algorithm: state `[z_hat, r, l]`, input `y`,
/// utility `u`, no disturbance channel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReactorController {
    pub discretization: Discretization,
}

impl ReactorController {
    pub fn new(discretization: Discretization) -> Result<Self> {
        discretization.validate()?;
        Ok(Self { discretization })
    }

    /// Registry name: `reactor-controller` for the default Euler step,
    /// `reactor-controller:verbatim` or `reactor-controller:<h>` otherwise.
    pub fn registry_name(&self) -> String {
        match self.discretization {
            d if d == Discretization::default() => CONTROLLER_NAME.to_string(),
            Discretization::Verbatim => format!("{CONTROLLER_NAME}:verbatim"),
            Discretization::ForwardEuler { step } => format!("{CONTROLLER_NAME}:{step:e}"),
        }
    }

    /// Inverse of [`registry_name`](Self::registry_name).
    pub fn from_registry_name(name: &str) -> Option<Self> {
        let rest = name.strip_prefix(CONTROLLER_NAME)?;
        let disc = match rest {
            "" => Discretization::default(),
            ":verbatim" => Discretization::Verbatim,
            r => Discretization::ForwardEuler {
                step: r.strip_prefix(':')?.parse().ok()?,
            },
        };
        Self::new(disc).ok()
    }
}

impl DynamicAlgorithm for ReactorController {
    fn dims(&self) -> AlgDims {
        AlgDims {
            nzeta: 3,
            ny: 1,
            nu: 1,
            nw: 0,
        }
    }
    fn initial_state(&self) -> Vector {
        ControllerState::default().to_vector()
    }
    fn transition(&self, step: u64, zeta: &Vector, y: &Vector, _w: &Vector) -> Result<Vector> {
        ensure_dim("measurement", 1, y.len())?;
        let c = ControllerState::from_vector(zeta)?;
        let (next, _) = controller_step(&c, y[0], step, &self.discretization)?;
        Ok(next.to_vector())
    }
    fn utility(&self, step: u64, zeta: &Vector, y: &Vector, _w: &Vector) -> Result<Vector> {
        ensure_dim("measurement", 1, y.len())?;
        let t = controller_terms(&ControllerState::from_vector(zeta)?, y[0], step)?;
        Ok(Vector::from_element(1, t.u))
    }
}

/// Scheme dimensions of the reactor loop: `y, u` lifted 1 -> 3, the
/// controller state 3 -> 4.
pub fn reactor_dims() -> Dims {
    Dims::new((1, 1, 3), (3, 3, 4)).expect("static dimensions are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub steps: usize,
    pub params: ReactorParams,
    pub discretization: Discretization,
    pub scales: Scales,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            params: ReactorParams::default(),
            discretization: Discretization::default(),
            scales: Scales::high_privacy(),
            sigma: 1e4,
            seed: 1,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("closed loop needs at least one step".into()));
        }
        self.params.validate()?;
        self.discretization.validate()
    }

    pub fn keygen(&self) -> Result<EncodingScheme> {
        let dims = reactor_dims();
        keygen(dims, self.scales, LaplaceParams::centered(dims.noise_dim(), self.sigma)?, self.seed)
    }
}

/// One closed-loop run. Vectors indexed by step `k = 0..steps`; `x` and
/// `controller` carry one extra final entry.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<f64>,
    /// Action of a plain controller fed the same measurements.
    pub u: Vec<f64>,
    /// Action applied to the plant: `u` in plain mode, the decoded cloud
    /// output in encoded mode.
    pub u_applied: Vec<f64>,
    pub ytilde: Vec<Vector>,
    pub utilde: Vec<Vector>,
    pub controller: Vec<ControllerState>,
    /// Encoded controller state after each step (encoded mode only).
    pub zeta_tilde: Vec<Vector>,
    /// `max |zetatilde_k - Pi2 zeta_k|` after each step (encoded mode only).
    pub residual: Vec<f64>,
    /// Cumulative wall time in seconds after each step.
    pub elapsed_s: Vec<f64>,
}

pub fn run_plain(cfg: &ControlConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut plant = ReactorState::new(&cfg.params, &cfg.discretization);
    let mut c = ControllerState::default();
    let mut out = Trajectory::default();
    out.x.push([plant.x1, plant.x2]);
    out.controller.push(c);
    let start = Instant::now();
    for k in 0..cfg.steps as u64 {
        let y = plant.output();
        let (next, u) = controller_step(&c, y, k, &cfg.discretization)?;
        c = next;
        reactor_step(&mut plant, &cfg.params, &cfg.discretization, u)?;
        out.y.push(y);
        out.u.push(u);
        out.u_applied.push(u);
        out.x.push([plant.x1, plant.x2]);
        out.controller.push(c);
        out.elapsed_s.push(start.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Encoded loop over an in-process cloud; records immersion residuals.
pub fn run_encoded(cfg: &ControlConfig, scheme: Arc<EncodingScheme>) -> Result<(Trajectory, crate::protocol::Transcript)> {
    let cloud = Arc::new(Cloud::new(Registry::builtin()));
    let transport = Loopback::new(cloud.clone());
    run_encoded_with(cfg, scheme, transport, Some(&cloud))
}

/// Encoded loop over any transport. With `probe`, the cloud's encoded
/// controller state is read after each step to measure immersion residuals.
pub fn run_encoded_with<T: Transport>(
    cfg: &ControlConfig,
    scheme: Arc<EncodingScheme>,
    transport: T,
    probe: Option<&Cloud>,
) -> Result<(Trajectory, crate::protocol::Transcript)> {
    cfg.validate()?;
    ensure_dim("controller state", 3, scheme.dims().nzeta)?;
    let pi2 = scheme.pi2().clone();
    let name = ReactorController::new(cfg.discretization)?.registry_name();
    let mut client = Client::connect(scheme, cfg.seed, &name, transport)?;
    let mut plant = ReactorState::new(&cfg.params, &cfg.discretization);
    let mut shadow = ControllerState::default();
    let mut out = Trajectory::default();
    out.x.push([plant.x1, plant.x2]);
    out.controller.push(shadow);
    let start = Instant::now();
    let mut shadow_time = 0.0;
    let none = Vector::zeros(0);
    for k in 0..cfg.steps as u64 {
        let y = plant.output();
        let ex = client.step_detailed(&Vector::from_element(1, y), &none)?;
        let u_hat = ex.u[0];
        reactor_step(&mut plant, &cfg.params, &cfg.discretization, u_hat)?;

        let t0 = Instant::now();
        let (next, u) = controller_step(&shadow, y, k, &cfg.discretization)?;
        shadow = next;
        shadow_time += t0.elapsed().as_secs_f64();
        if let Some((_, zt)) = probe.and_then(|c| c.session_state(client.session().id())) {
            out.residual.push((&zt - &pi2 * shadow.to_vector()).amax());
            out.zeta_tilde.push(zt);
        }
        out.y.push(y);
        out.u.push(u);
        out.u_applied.push(u_hat);
        out.ytilde.push(ex.input.ytilde);
        out.utilde.push(ex.utility.utilde);
        out.x.push([plant.x1, plant.x2]);
        out.controller.push(shadow);
        out.elapsed_s.push(start.elapsed().as_secs_f64() - shadow_time);
    }
    let transcript = client.close()?;
    Ok((out, transcript))
}

/// Plain-versus-encoded summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    /// `max_k |u_k - u_hat_k|` between the plain run and the encoded run.
    pub max_action_gap: f64,
    /// `max_k |u_k - u_hat_k|` within the encoded run (same measurements).
    pub max_lockstep_gap: f64,
    /// `max_k |x_k - x_hat_k|_inf` between the two runs.
    pub max_state_gap: f64,
    /// `max_k |x_hat_k|_inf` of the encoded run.
    pub max_state_norm: f64,
    /// `max_k residual_k / (1 + |zetatilde_k|_inf)`.
    pub max_relative_residual: f64,
    pub plain_time_s: f64,
    pub encoded_time_s: f64,
}

impl Comparison {
    pub fn runtime_ratio(&self) -> f64 {
        self.encoded_time_s / self.plain_time_s.max(f64::MIN_POSITIVE)
    }
}

pub fn compare(plain: &Trajectory, encoded: &Trajectory) -> Comparison {
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let max_state_gap = plain
        .x
        .iter()
        .zip(&encoded.x)
        .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
        .fold(0.0, f64::max);
    let max_state_norm = encoded
        .x
        .iter()
        .map(|x| x[0].abs().max(x[1].abs()))
        .fold(0.0, f64::max);
    let max_relative_residual = encoded
        .residual
        .iter()
        .zip(&encoded.zeta_tilde)
        .map(|(r, zt)| r / (1.0 + zt.amax()))
        .fold(0.0, f64::max);
    Comparison {
        max_action_gap: gap(&plain.u_applied, &encoded.u_applied),
        max_lockstep_gap: gap(&encoded.u, &encoded.u_applied),
        max_state_gap,
        max_state_norm,
        max_relative_residual,
        plain_time_s: plain.elapsed_s.last().copied().unwrap_or(0.0),
        encoded_time_s: encoded.elapsed_s.last().copied().unwrap_or(0.0),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// Writes `reactor_trajectory.csv` and `reactor_states.csv` into `dir`.
pub fn export_figures_data(plain: &Trajectory, encoded: &Trajectory, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_trajectory_csv(std::fs::File::create(dir.join("reactor_trajectory.csv"))?, plain, encoded)?;
    write_states_csv(std::fs::File::create(dir.join("reactor_states.csv"))?, plain, encoded)
}

/// `step,x1,x2,y,ytilde_0..,u,u_hat,err,t_plain_s,t_encoded_s`: encoded-run
/// plant and measurements against the plain run's actions.
pub fn write_trajectory_csv<W: Write>(w: W, plain: &Trajectory, encoded: &Trajectory) -> Result<()> {
    let steps = plain.y.len().min(encoded.y.len());
    let ny_tilde = encoded.ytilde.first().map_or(0, |v| v.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["step", "x1", "x2", "y"].iter().map(|s| s.to_string()).collect();
    header.extend((0..ny_tilde).map(|i| format!("ytilde_{i}")));
    header.extend(["u", "u_hat", "err", "t_plain_s", "t_encoded_s"].iter().map(|s| s.to_string()));
    out.write_record(&header)?;
    for k in 0..steps {
        let x = encoded.x[k];
        let mut rec = vec![k.to_string(), fmt(x[0]), fmt(x[1]), fmt(encoded.y[k])];
        rec.extend(encoded.ytilde[k].iter().map(|&v| fmt(v)));
        let (u, u_hat) = (plain.u_applied[k], encoded.u_applied[k]);
        rec.extend([
            fmt(u),
            fmt(u_hat),
            fmt((u - u_hat).abs()),
            fmt(plain.elapsed_s[k]),
            fmt(encoded.elapsed_s[k]),
        ]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// `step,x1_plain,x2_plain,x1_encoded,x2_encoded,z_hat,r,l,residual`.
pub fn write_states_csv<W: Write>(w: W, plain: &Trajectory, encoded: &Trajectory) -> Result<()> {
    let steps = plain.y.len().min(encoded.y.len());
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "x1_plain",
        "x2_plain",
        "x1_encoded",
        "x2_encoded",
        "z_hat",
        "r",
        "l",
        "residual",
    ])?;
    for k in 0..steps {
        let (p, e, c) = (plain.x[k + 1], encoded.x[k + 1], plain.controller[k + 1]);
        let res = encoded.residual.get(k).copied().unwrap_or(f64::NAN);
        out.write_record([
            k.to_string(),
            fmt(p[0]),
            fmt(p[1]),
            fmt(e[0]),
            fmt(e[1]),
            fmt(c.z_hat),
            fmt(c.r),
            fmt(c.l),
            fmt(res),
        ])?;
    }
    out.flush()?;
    Ok(())
}
