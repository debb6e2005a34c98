//! Command-line driver. Every command reads a [`RunConfig`], applies flag
//! overrides and writes its artifacts under the configured output directory.
//!
//! Exit codes: 0 ok, 2 configuration, 3 numeric, 4 protocol or transport.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::casestudy::control::{self, Discretization, ReactorController};
use crate::casestudy::ml::{self, Architecture, DataSource, Optimizer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::privacy::{privacy_report, PrivacyReport};
use crate::protocol::{replay, Client, Cloud, Loopback, Registry, Server, StreamTransport, Transcript, Transport};
use crate::protocol::TranscriptWriter;
use crate::scheme::{load_scheme, save_scheme, EncodingScheme};

#[derive(Debug, Parser)]
#[command(name = "imcode", version, about = "Immersion-based coding for cloud computation on encoded data")]
pub struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the artifact directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a scheme and write it with its privacy report.
    Keygen(KeygenArgs),
    /// Privacy bounds of an existing scheme file.
    PrivacyReport(ReportArgs),
    /// Reactor closed loop, plain and through an encoded cloud session.
    DemoControl(ControlArgs),
    /// Plain versus encoded training on a shared minibatch schedule.
    DemoMl(MlArgs),
    /// Run a cloud server.
    Serve(ServeArgs),
    /// Drive a session against a server.
    Client(ClientArgs),
    /// Re-run a transcript against a fresh cloud and check every reply.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    /// `ny,nu,nzeta`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// `ny_tilde,nu_tilde,nzeta_tilde`.
    #[arg(long, value_delimiter = ',')]
    pub lifted: Option<Vec<usize>>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub target_eps_y: Option<f64>,
    #[arg(long)]
    pub target_eps_u: Option<f64>,
    /// Scheme file to write.
    #[arg(long)]
    pub scheme: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub scheme: Option<PathBuf>,
    #[arg(long)]
    pub delta_y: Option<f64>,
    #[arg(long)]
    pub delta_u: Option<f64>,
    /// Per-coordinate CSV to write.
    #[arg(long, default_value = "privacy_report.csv")]
    pub csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// Use the raw difference equations with no step size.
    #[arg(long, conflicts_with = "euler_step")]
    pub verbatim: bool,
    #[arg(long)]
    pub euler_step: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataKind {
    Blobs,
    Digits,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Debug, Args)]
pub struct MlArgs {
    #[arg(long, value_enum)]
    pub data: Option<DataKind>,
    /// Number of records for generated data.
    #[arg(long)]
    pub records: Option<usize>,
    /// Hidden width; selects the MLP instead of logistic regression.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptKind>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "ml_metrics.csv")]
    pub metrics: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub max_connections: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub scheme: Option<PathBuf>,
    #[arg(long)]
    pub algorithm: Option<String>,
    /// Open-loop input CSV; without it a reactor controller closes the loop
    /// around the simulated plant.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long)]
    pub outputs: Option<PathBuf>,
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Use an in-process cloud instead of a socket.
    #[arg(long)]
    pub loopback: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub transcript: PathBuf,
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    match cli.command {
        Command::Keygen(a) => keygen(cfg, a, out),
        Command::PrivacyReport(a) => report(cfg, a, out),
        Command::DemoControl(a) => demo_control(cfg, a, out),
        Command::DemoMl(a) => demo_ml(cfg, a, out),
        Command::Serve(a) => serve(cfg, a, out),
        Command::Client(a) => client(cfg, a, out),
        Command::Replay(a) => replay_cmd(a, out),
    }
}

fn create(cfg: &RunConfig, path: &PathBuf) -> Result<(PathBuf, File)> {
    let p = cfg.artifact(path);
    if let Some(dir) = p.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(&p)?;
    Ok((p, f))
}

fn write_report(cfg: &RunConfig, r: &PrivacyReport, csv: &PathBuf, out: &mut dyn Write) -> Result<()> {
    let (path, f) = create(cfg, csv)?;
    r.write_csv(f)?;
    writeln!(out, "{r}")?;
    writeln!(out, "eps_y_max = {:e}", r.eps_y_max)?;
    writeln!(out, "eps_u_max = {:e}", r.eps_u_max)?;
    writeln!(out, "per-coordinate bounds: {}", path.display())?;
    Ok(())
}

fn keygen(mut cfg: RunConfig, a: KeygenArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(d) = a.dims {
        cfg.scheme.dims = triple("--dims", &d)?;
    }
    if let Some(d) = a.lifted {
        cfg.scheme.lifted = triple("--lifted", &d)?;
    }
    if let Some(s) = a.sigma {
        cfg.scheme.sigma = s;
    }
    if a.target_eps_y.is_some() || a.target_eps_u.is_some() {
        cfg.privacy.target_eps_y = a.target_eps_y;
        cfg.privacy.target_eps_u = a.target_eps_u;
    }
    if let Some(p) = a.scheme {
        cfg.scheme.path = p;
    }
    let scheme = cfg.keygen()?;
    let path = cfg.artifact(&cfg.scheme.path);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_scheme(&scheme, &path)?;
    writeln!(out, "scheme written to {} (sigma = {:e})", path.display(), scheme.noise().sigma)?;
    let r = privacy_report(&scheme, cfg.privacy.sensitivity()?)?;
    let (txt, mut f) = create(&cfg, &PathBuf::from("privacy_report.txt"))?;
    writeln!(f, "{r}")?;
    writeln!(out, "privacy report: {}", txt.display())?;
    write_report(&cfg, &r, &PathBuf::from("privacy_report.csv"), out)
}

fn triple(flag: &str, v: &[usize]) -> Result<[usize; 3]> {
    v.try_into()
        .map_err(|_| Error::Config(format!("{flag} takes three comma-separated sizes, got {}", v.len())))
}

fn load(cfg: &RunConfig, path: Option<PathBuf>) -> Result<EncodingScheme> {
    let p = cfg.artifact(path.unwrap_or_else(|| cfg.scheme.path.clone()));
    load_scheme(&p).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read scheme {}: {io}", p.display())),
        e => e,
    })
}

fn report(mut cfg: RunConfig, a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(d) = a.delta_y {
        cfg.privacy.delta_y = d;
    }
    if let Some(d) = a.delta_u {
        cfg.privacy.delta_u = d;
    }
    let scheme = load(&cfg, a.scheme)?;
    let r = privacy_report(&scheme, cfg.privacy.sensitivity()?)?;
    write_report(&cfg, &r, &a.csv, out)
}

fn demo_control(mut cfg: RunConfig, a: ControlArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.control.steps = s;
    }
    if a.verbatim {
        cfg.control.discretization = Discretization::Verbatim;
    }
    if let Some(h) = a.euler_step {
        cfg.control.discretization = Discretization::ForwardEuler { step: h };
    }
    if let Some(s) = a.sigma {
        cfg.control.sigma = s;
    }
    let c = &cfg.control;
    let plain = control::run_plain(c)?;
    let scheme = Arc::new(c.keygen()?);
    let (encoded, transcript) = control::run_encoded(c, scheme)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    control::export_figures_data(&plain, &encoded, &cfg.out_dir)?;
    let tpath = cfg.artifact("control.imts");
    transcript.save(&tpath)?;
    let cmp = control::compare(&plain, &encoded);
    writeln!(out, "steps                      {}", c.steps)?;
    writeln!(out, "max |u - u_hat|            {:e}", cmp.max_action_gap)?;
    writeln!(out, "max |x - x_hat|            {:e}", cmp.max_state_gap)?;
    writeln!(out, "max |x_hat|                {:.4}", cmp.max_state_norm)?;
    writeln!(out, "max relative residual      {:e}", cmp.max_relative_residual)?;
    writeln!(out, "runtime ratio enc/plain    {:.2}", cmp.runtime_ratio())?;
    writeln!(out, "trajectories in {}, transcript {}", cfg.out_dir.display(), tpath.display())?;
    Ok(())
}

fn demo_ml(mut cfg: RunConfig, a: MlArgs, out: &mut dyn Write) -> Result<()> {
    let m = &mut cfg.ml;
    if let Some(kind) = a.data {
        let n = a.records.unwrap_or(600);
        m.data = match kind {
            DataKind::Blobs => DataSource::Blobs {
                n,
                classes: 3,
                dim: 2,
                spread: 0.05,
            },
            DataKind::Digits => DataSource::Digits { n },
        };
    } else if let Some(n) = a.records {
        match &mut m.data {
            DataSource::Blobs { n: k, .. } | DataSource::Digits { n: k } => *k = n,
            DataSource::Csv { .. } => return Err(Error::Config("--records does not apply to CSV data".into())),
        }
    }
    if let Some(h) = a.hidden {
        m.arch = Architecture::Mlp { hidden: h };
    }
    let lr = a.learning_rate.unwrap_or(match m.optimizer {
        Optimizer::Sgd { eta } => eta,
        Optimizer::Adam { alpha, .. } => alpha,
    });
    m.optimizer = match (a.optimizer, m.optimizer) {
        (Some(OptKind::Sgd), _) | (None, Optimizer::Sgd { .. }) => Optimizer::sgd(lr),
        (Some(OptKind::Adam), _) => Optimizer::adam(lr),
        (None, Optimizer::Adam { beta1, beta2, eps, .. }) => Optimizer::Adam {
            alpha: lr,
            beta1,
            beta2,
            eps,
        },
    };
    if let Some(e) = a.epochs {
        m.epochs = e;
    }
    let b = ml::benchmark(&cfg.ml)?;
    let (path, f) = create(&cfg, &a.metrics)?;
    b.write_csv(f)?;
    writeln!(out, "epochs                     {}", cfg.ml.epochs)?;
    writeln!(out, "max |w_plain - w_decoded|  {:e}", b.max_param_gap())?;
    writeln!(out, "accuracies equal           {}", b.accuracies_equal())?;
    writeln!(out, "final accuracy             {:.4}", b.plain.accuracy.last().copied().unwrap_or(0.0))?;
    writeln!(out, "time ratio encoded/plain   {:.2}", b.time_ratio())?;
    writeln!(out, "schedule checksum          {:016x}", b.schedule_checksum)?;
    writeln!(out, "metrics: {}", path.display())?;
    Ok(())
}

fn serve(mut cfg: RunConfig, a: ServeArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(addr) = a.addr {
        cfg.serve.addr = addr;
    }
    if a.max_connections.is_some() {
        cfg.serve.max_connections = a.max_connections;
    }
    let server = Server::bind(&cfg.serve.addr, Arc::new(Cloud::new(Registry::builtin())))?;
    writeln!(out, "listening on {}", server.local_addr()?)?;
    out.flush()?;
    let failed = server.run(cfg.serve.max_connections)?;
    if failed > 0 {
        return Err(Error::Protocol(format!("{failed} connection(s) ended with an error")));
    }
    Ok(())
}

fn read_inputs(path: &PathBuf, ny: usize, nw: usize) -> Result<Vec<(Vector, Vector)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("input row {i}: bad number {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != ny + nw {
            return Err(Error::Format(format!(
                "input row {i} has {} values, expected {ny} + {nw}",
                vals.len()
            )));
        }
        rows.push((Vector::from_column_slice(&vals[..ny]), Vector::from_column_slice(&vals[ny..])));
    }
    Ok(rows)
}

fn client(mut cfg: RunConfig, a: ClientArgs, out: &mut dyn Write) -> Result<()> {
    let c = &mut cfg.client;
    if let Some(v) = a.addr {
        c.addr = v;
    }
    if let Some(v) = a.algorithm {
        c.algorithm = v;
    }
    if a.inputs.is_some() {
        c.inputs = a.inputs;
    }
    if let Some(v) = a.outputs {
        c.outputs = v;
    }
    if let Some(v) = a.transcript {
        c.transcript = v;
    }
    let scheme = Arc::new(load(&cfg, a.scheme)?);
    let transport: Box<dyn Transport> = if a.loopback {
        Box::new(Loopback::new(Arc::new(Cloud::new(Registry::builtin()))))
    } else {
        Box::new(StreamTransport::connect(&cfg.client.addr)?)
    };
    let transcript_path = cfg.artifact(&cfg.client.transcript);
    if let Some(dir) = transcript_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (outputs, mut f) = create(&cfg, &cfg.client.outputs)?;
    let steps = match &cfg.client.inputs {
        Some(inputs) => {
            let alg = Registry::builtin()
                .resolve(&cfg.client.algorithm)
                .ok_or_else(|| Error::Config(format!("unknown algorithm {:?}", cfg.client.algorithm)))?;
            let rows = read_inputs(&cfg.artifact(inputs), scheme.dims().ny, alg.dims().nw)?;
            let writer = TranscriptWriter::create(&transcript_path)?;
            let mut session = Client::connect_recording(scheme.clone(), cfg.seed, &cfg.client.algorithm, transport, Some(writer))?;
            let mut w = csv::Writer::from_writer(&mut f);
            let mut header = vec!["step".to_string()];
            header.extend((0..scheme.dims().nu).map(|i| format!("u_{i}")));
            w.write_record(&header)?;
            for (k, (y, wk)) in rows.iter().enumerate() {
                let u = session.step(y, wk).map_err(|e| step_context(e, k))?;
                let mut rec = vec![k.to_string()];
                rec.extend(u.iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
            session.close()?;
            rows.len()
        }
        None => {
            let ctl = ReactorController::from_registry_name(&cfg.client.algorithm).ok_or_else(|| {
                Error::Config(format!(
                    "algorithm {:?} needs an --inputs file; only the reactor controller runs closed loop",
                    cfg.client.algorithm
                ))
            })?;
            cfg.control.discretization = ctl.discretization;
            let (traj, transcript) = control::run_encoded_with(&cfg.control, scheme, transport, None)?;
            transcript.save(&transcript_path)?;
            let mut w = csv::Writer::from_writer(&mut f);
            w.write_record(["step", "y", "u_hat"])?;
            for k in 0..traj.y.len() {
                w.write_record([k.to_string(), format!("{:e}", traj.y[k]), format!("{:e}", traj.u_applied[k])])?;
            }
            w.flush()?;
            traj.y.len()
        }
    };
    writeln!(out, "{steps} steps; outputs {}, transcript {}", outputs.display(), transcript_path.display())?;
    Ok(())
}

fn step_context(e: Error, k: usize) -> Error {
    match e {
        Error::Protocol(m) => Error::Protocol(format!("step {k}: {m}")),
        Error::Framing(m) => Error::Framing(format!("step {k}: {m}")),
        e => e,
    }
}

fn replay_cmd(a: ReplayArgs, out: &mut dyn Write) -> Result<()> {
    let t = Transcript::load(&a.transcript).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read transcript {}: {io}", a.transcript.display())),
        e => e,
    })?;
    let cloud = Cloud::new(Registry::builtin());
    let r = replay(&t, &cloud)?;
    writeln!(out, "replayed {} exchanges; every reply byte-identical", r.exchanges)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String) {
        let mut out = Vec::new();
        let code = main_with(std::iter::once("imcode").chain(args.iter().copied()), &mut out);
        (code, String::from_utf8(out).unwrap())
    }

    #[test]
    fn keygen_report_and_replay_flow() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let (code, text) = run_args(&["--out-dir", d, "keygen"]);
        assert_eq!(code, 0, "{text}");
        assert!(text.contains("eps_y_max"));
        let first = std::fs::read(dir.path().join("scheme.imk")).unwrap();
        run_args(&["--out-dir", d, "keygen"]);
        assert_eq!(std::fs::read(dir.path().join("scheme.imk")).unwrap(), first);

        let (code, text) = run_args(&["--out-dir", d, "privacy-report"]);
        assert_eq!(code, 0, "{text}");
        let (code, _) = run_args(&["--out-dir", d, "client", "--loopback"]);
        assert_eq!(code, 0);
        let t = dir.path().join("session.imts");
        let (code, text) = run_args(&["replay", t.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(text.contains("replayed 102 exchanges"), "{text}");
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        assert_eq!(run_args(&["--out-dir", d, "keygen", "--lifted", "1,3,4"]).0, 2);
        assert_eq!(run_args(&["--out-dir", d, "privacy-report"]).0, 2);
        assert_eq!(run_args(&["--out-dir", d, "demo-control", "--verbatim"]).0, 3);
        assert_eq!(run_args(&["no-such-command"]).0, 2);
        let bad = dir.path().join("bad.imts");
        let mut t = Transcript::new();
        t.push(crate::protocol::Direction::ClientToCloud, b"junk");
        t.save(&bad).unwrap();
        assert_eq!(run_args(&["replay", bad.to_str().unwrap()]).0, 4);
    }

    #[test]
    fn open_loop_client_with_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        run_args(&["--out-dir", d, "keygen", "--dims", "2,2,2", "--lifted", "4,3,3", "--sigma", "1"]);
        std::fs::write(dir.path().join("in.csv"), "0.5,-1\n2,3\n").unwrap();
        let (code, text) =
            run_args(&["--out-dir", d, "client", "--loopback", "--algorithm", "echo:2", "--inputs", "in.csv"]);
        assert_eq!(code, 0, "{text}");
        let csv = std::fs::read_to_string(dir.path().join("client_outputs.csv")).unwrap();
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        // default scheme has a large Pi4, which leaves ~1e-8 of decode error
        assert!((rows[0][0] - 0.5).abs() < 1e-6 && (rows[1][1] - 3.0).abs() < 1e-6, "{rows:?}");
    }
}
