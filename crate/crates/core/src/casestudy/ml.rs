//! Privacy-preserving training: SGD and Adam run by a cloud on an encoded
//! database, with the trained model recovered exactly by the data owner.
//!
//! Each record `y_i = [features, label / (classes - 1)]` is encoded as
//! `Pi1 y_i + N1 s_i`. The cloud decodes the records it trains on, keeps the
//! optimizer state immersed as `zetatilde = Pi2 zeta`, advances it with
//! `zetatilde + Pi2 (opt(Pi2_left zetatilde) - Pi2_left zetatilde)` and
//! releases `Pi3 w_T + Pi4 ytilde_0`, anchored to record 0.

use std::hash::Hasher;
use std::io::{Read, Write};
use std::time::Instant;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::privacy::LaplaceParams;
use crate::scheme::{keygen, Dims, EncodedInput, EncodedUtility, EncodingScheme, Scales, TargetMaterial};

/// Labelled records with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One record per row.
    pub features: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<usize>, classes: usize) -> Result<Self> {
        ensure_dim("labels", features.nrows(), labels.len())?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {l} outside 0..{classes}")));
        }
        if !features.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Config("features must lie in [0, 1]".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Record as encoded: features followed by the label scaled into `[0, 1]`.
    pub fn record(&self, i: usize) -> Vector {
        let d = self.dim();
        Vector::from_fn(d + 1, |j, _| {
            if j < d {
                self.features[(i, j)]
            } else {
                self.labels[i] as f64 / (self.classes - 1) as f64
            }
        })
    }

    /// Isotropic Gaussian clusters around random centres, clamped to the
    /// unit cube. Labels cycle through the classes.
    pub fn blobs(n: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let centres = Mat::from_fn(classes, dim, |_, _| rng.gen_range(0.2..0.8));
        let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(format!("blob spread: {e}")))?;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let features = Mat::from_fn(n, dim, |i, j| {
            (centres[(labels[i], j)] + noise.sample(&mut rng)).clamp(0.0, 1.0)
        });
        Self::new(features, labels, classes)
    }

    /// Noisy, randomly shifted 8x8 renderings of the digits 0-9.
    pub fn digits(n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).expect("valid");
        let mut features = Mat::zeros(n, 64);
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        for (i, &label) in labels.iter().enumerate() {
            let (dx, dy): (i32, i32) = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
            let ink: f64 = rng.gen_range(0.7..1.0);
            for r in 0..8i32 {
                for c in 0..8i32 {
                    let (sr, sc) = (r - dy, c - dx);
                    let on = (0..8).contains(&sr)
                        && (0..8).contains(&sc)
                        && DIGITS[label][sr as usize].as_bytes()[sc as usize] == b'#';
                    let v: f64 = if on { ink } else { 0.0 } + noise.sample(&mut rng);
                    features[(i, (r * 8 + c) as usize)] = v.clamp(0.0, 1.0);
                }
            }
        }
        Self::new(features, labels, 10)
    }

    /// Reads `feature_0, ..., feature_{d-1}, label` rows with a header line.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let Some((last, head)) = rec.iter().collect::<Vec<_>>().split_last().map(|(l, h)| (*l, h.to_vec())) else {
                return Err(Error::Format("empty dataset row".into()));
            };
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number {s:?} in dataset")))
            };
            rows.push(head.into_iter().map(parse).collect::<Result<Vec<_>>>()?);
            labels.push(
                last.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad label {last:?} in dataset")))?,
            );
        }
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Format("dataset rows have different lengths".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        let features = Mat::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(features, labels, classes)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    fn rows(&self, idx: &[usize]) -> (Mat, Vec<usize>) {
        (self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

const DIGITS: [[&str; 8]; 10] = [
    ["..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", "..####.."],
    ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#.."],
    [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "......#.", "..####.."],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Multinomial logistic regression.
    Logistic,
    /// One tanh hidden layer.
    Mlp { hidden: usize },
}

/// Classifier with cross-entropy loss. Parameters are packed row-major:
/// `W (classes x inputs), b` for logistic; `W1, b1, W2, b2` for the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub inputs: usize,
    pub classes: usize,
}

fn push_row_major(out: &mut Vec<f64>, m: &Mat) {
    for r in m.row_iter() {
        out.extend(r.iter());
    }
}

fn softmax_cross_entropy(logits: &Mat, labels: &[usize]) -> (f64, Mat) {
    let b = logits.nrows();
    let mut g = logits.clone();
    let mut loss = 0.0;
    for i in 0..b {
        let mut row = g.row_mut(i);
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z: f64 = row.sum();
        loss += z.ln() - (logits[(i, labels[i])] - m);
        row /= z;
        row[labels[i]] -= 1.0;
    }
    (loss / b as f64, g / b as f64)
}

impl Model {
    pub fn new(arch: Architecture, inputs: usize, classes: usize) -> Result<Self> {
        if inputs == 0 || classes < 2 || matches!(arch, Architecture::Mlp { hidden: 0 }) {
            return Err(Error::Config(format!(
                "invalid model {arch:?} with {inputs} inputs and {classes} classes"
            )));
        }
        Ok(Self { arch, inputs, classes })
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.inputs, self.classes);
        match self.arch {
            Architecture::Logistic => c * d + c,
            Architecture::Mlp { hidden: h } => h * d + h + c * h + c,
        }
    }

    /// Zeros for logistic regression; uniform `+-1/sqrt(fan_in)` weights and
    /// zero biases for the MLP.
    pub fn init(&self, seed: u64) -> Vector {
        match self.arch {
            Architecture::Logistic => Vector::zeros(self.param_count()),
            Architecture::Mlp { hidden: h } => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let mut w = Vec::with_capacity(self.param_count());
                let a1 = 1.0 / (self.inputs as f64).sqrt();
                w.extend((0..h * self.inputs).map(|_| rng.gen_range(-a1..a1)));
                w.extend(std::iter::repeat_n(0.0, h));
                let a2 = 1.0 / (h as f64).sqrt();
                w.extend((0..self.classes * h).map(|_| rng.gen_range(-a2..a2)));
                w.extend(std::iter::repeat_n(0.0, self.classes));
                Vector::from_vec(w)
            }
        }
    }

    fn layer(w: &[f64], rows: usize, cols: usize) -> (Mat, Vector, usize) {
        let m = Mat::from_row_slice(rows, cols, &w[..rows * cols]);
        let b = Vector::from_column_slice(&w[rows * cols..rows * cols + rows]);
        (m, b, rows * cols + rows)
    }

    fn affine(x: &Mat, m: &Mat, b: &Vector) -> Mat {
        let mut z = x * m.transpose();
        for mut row in z.row_iter_mut() {
            row += b.transpose();
        }
        z
    }

    fn logits(&self, w: &Vector, x: &Mat) -> Result<Mat> {
        ensure_dim("model parameters", self.param_count(), w.len())?;
        ensure_dim("model inputs", self.inputs, x.ncols())?;
        let w = w.as_slice();
        Ok(match self.arch {
            Architecture::Logistic => {
                let (m, b, _) = Self::layer(w, self.classes, self.inputs);
                Self::affine(x, &m, &b)
            }
            Architecture::Mlp { hidden } => {
                let (m1, b1, off) = Self::layer(w, hidden, self.inputs);
                let (m2, b2, _) = Self::layer(&w[off..], self.classes, hidden);
                Self::affine(&Self::affine(x, &m1, &b1).map(f64::tanh), &m2, &b2)
            }
        })
    }

    /// Mean cross-entropy over the rows of `x` and its gradient.
    pub fn loss_and_grad(&self, w: &Vector, x: &Mat, labels: &[usize]) -> Result<(f64, Vector)> {
        ensure_dim("labels", x.nrows(), labels.len())?;
        if x.nrows() == 0 {
            return Err(Error::Config("empty minibatch".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Config(format!("label {l} outside 0..{}", self.classes)));
        }
        ensure_dim("model parameters", self.param_count(), w.len())?;
        ensure_dim("model inputs", self.inputs, x.ncols())?;
        let ws = w.as_slice();
        let mut grad = Vec::with_capacity(self.param_count());
        let loss = match self.arch {
            Architecture::Logistic => {
                let (m, b, _) = Self::layer(ws, self.classes, self.inputs);
                let (loss, g) = softmax_cross_entropy(&Self::affine(x, &m, &b), labels);
                push_row_major(&mut grad, &(g.transpose() * x));
                grad.extend(g.row_sum().iter());
                loss
            }
            Architecture::Mlp { hidden } => {
                let (m1, b1, off) = Self::layer(ws, hidden, self.inputs);
                let (m2, b2, _) = Self::layer(&ws[off..], self.classes, hidden);
                let h = Self::affine(x, &m1, &b1).map(f64::tanh);
                let (loss, g) = softmax_cross_entropy(&Self::affine(&h, &m2, &b2), labels);
                let dh = (&g * &m2).component_mul(&h.map(|v| 1.0 - v * v));
                push_row_major(&mut grad, &(dh.transpose() * x));
                grad.extend(dh.row_sum().iter());
                push_row_major(&mut grad, &(g.transpose() * &h));
                grad.extend(g.row_sum().iter());
                loss
            }
        };
        let grad = Vector::from_vec(grad);
        if !loss.is_finite() || !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                what: "non-finite loss or gradient".into(),
            });
        }
        Ok((loss, grad))
    }

    pub fn predict(&self, w: &Vector, x: &Mat) -> Result<Vec<usize>> {
        let z = self.logits(w, x)?;
        Ok(z.row_iter().map(|r| r.transpose().argmax().0).collect())
    }

    pub fn accuracy(&self, w: &Vector, data: &Dataset) -> Result<f64> {
        let pred = self.predict(w, &data.features)?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Rescales `g` to l2 norm `c` when it is longer.
pub fn clip(g: &Vector, c: f64) -> Vector {
    let n = g.norm();
    if n > c {
        g * (c / n)
    } else {
        g.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd { eta: f64 },
    Adam { alpha: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(eta: f64) -> Self {
        Optimizer::Sgd { eta }
    }

    pub fn adam(alpha: f64) -> Self {
        Optimizer::Adam {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { eta } => eta > 0.0 && eta.is_finite(),
            Optimizer::Adam {
                alpha,
                beta1,
                beta2,
                eps,
            } => {
                alpha > 0.0
                    && alpha.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }

    /// State `w` for SGD, `[w; m; v]` for Adam.
    pub fn state_dim(&self, nw: usize) -> usize {
        match self {
            Optimizer::Sgd { .. } => nw,
            Optimizer::Adam { .. } => 3 * nw,
        }
    }

    pub fn initial_state(&self, w0: &Vector) -> Vector {
        let mut z = Vector::zeros(self.state_dim(w0.len()));
        z.rows_mut(0, w0.len()).copy_from(w0);
        z
    }

    /// Next state from an already clipped gradient; `t` counts updates from 0.
    pub fn step(&self, state: &Vector, grad: &Vector, t: u64) -> Result<Vector> {
        let nw = grad.len();
        ensure_dim("optimizer state", self.state_dim(nw), state.len())?;
        Ok(match *self {
            Optimizer::Sgd { eta } => sgd_step(state, grad, eta),
            Optimizer::Adam {
                alpha,
                beta1,
                beta2,
                eps,
            } => {
                let (w, m, v) = (state.rows(0, nw), state.rows(nw, nw), state.rows(2 * nw, nw));
                let (w, m, v) = adam_step(
                    &w.into_owned(),
                    &m.into_owned(),
                    &v.into_owned(),
                    grad,
                    t,
                    (alpha, beta1, beta2, eps),
                );
                let mut out = Vector::zeros(3 * nw);
                out.rows_mut(0, nw).copy_from(&w);
                out.rows_mut(nw, nw).copy_from(&m);
                out.rows_mut(2 * nw, nw).copy_from(&v);
                out
            }
        })
    }
}

pub fn sgd_step(w: &Vector, grad: &Vector, eta: f64) -> Vector {
    w - grad * eta
}

/// One Adam update; bias corrections use `t + 1` so the first update is
/// well defined.
pub fn adam_step(
    w: &Vector,
    m: &Vector,
    v: &Vector,
    grad: &Vector,
    t: u64,
    (alpha, beta1, beta2, eps): (f64, f64, f64, f64),
) -> (Vector, Vector, Vector) {
    let m = m * beta1 + grad * (1.0 - beta1);
    let v = v * beta2 + grad.component_mul(grad) * (1.0 - beta2);
    let e = (t + 1) as i32;
    let c1 = alpha / (1.0 - beta1.powi(e));
    let c2 = 1.0 - beta2.powi(e);
    let p = Vector::from_fn(w.len(), |i, _| c1 * m[i] / ((v[i] / c2).sqrt() + eps));
    (w - p, m, v)
}

/// Minibatch indices for every update, fixed before training so the plain
/// and encoded runs see the same batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    /// `epochs[e][b]` is the index list of batch `b` in epoch `e`.
    pub epochs: Vec<Vec<Vec<usize>>>,
}

impl Schedule {
    /// Each epoch reshuffles `0..n` and takes `batches_per_epoch` disjoint
    /// batches of `batch_size`.
    pub fn shuffled(n: usize, batch_size: usize, batches_per_epoch: usize, epochs: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batches_per_epoch == 0 {
            return Err(Error::Config("batch size and batches per epoch must be positive".into()));
        }
        if batch_size * batches_per_epoch > n {
            return Err(Error::Config(format!(
                "{batches_per_epoch} batches of {batch_size} exceed the {n} records"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        let epochs = (0..epochs)
            .map(|_| {
                perm.shuffle(&mut rng);
                perm.chunks(batch_size)
                    .take(batches_per_epoch)
                    .map(<[usize]>::to_vec)
                    .collect()
            })
            .collect();
        Ok(Self { epochs })
    }

    /// FNV-1a over every index with a separator after each batch.
    pub fn checksum(&self) -> u64 {
        let mut h = FnvHasher::default();
        for epoch in &self.epochs {
            for batch in epoch {
                for &i in batch {
                    h.write_u64(i as u64);
                }
                h.write_u64(u64::MAX);
            }
        }
        h.finish()
    }

    fn max_index(&self) -> Option<usize> {
        self.epochs.iter().flatten().flatten().copied().max()
    }
}

/// Everything both parties agree on about the training algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub model: Model,
    pub optimizer: Optimizer,
    /// Global l2 clipping threshold applied to every gradient.
    pub clip: f64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip threshold must be > 0, got {}", self.clip)));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.optimizer.state_dim(self.model.param_count())
    }

    /// State increment of one update on the given batch.
    fn increment(&self, state: &Vector, data: &Dataset, batch: &[usize], t: u64) -> Result<Vector> {
        let nw = self.model.param_count();
        let w = state.rows(0, nw).into_owned();
        let (x, labels) = data.rows(batch);
        let (_, g) = self.model.loss_and_grad(&w, &x, &labels).map_err(|e| match e {
            Error::Numeric { what, .. } => Error::Numeric { step: t, what },
            e => e,
        })?;
        Ok(self.optimizer.step(state, &clip(&g, self.clip), t)? - state)
    }
}

/// Per-epoch weights, accuracies and cumulative wall time.
#[derive(Debug, Clone, Default)]
pub struct TrainRun {
    /// `epochs + 1` entries, starting with the initial weights.
    pub weights: Vec<Vector>,
    /// Training accuracy of each entry of `weights`.
    pub accuracy: Vec<f64>,
    /// Cumulative seconds after each epoch.
    pub elapsed_s: Vec<f64>,
}

pub fn train_plain(spec: &TrainSpec, data: &Dataset, schedule: &Schedule, w0: &Vector) -> Result<TrainRun> {
    spec.validate()?;
    check_schedule(schedule, data.len())?;
    let nw = spec.model.param_count();
    let mut state = spec.optimizer.initial_state(w0);
    let mut run = TrainRun::default();
    run.weights.push(w0.clone());
    let start = Instant::now();
    let mut paused = 0.0;
    let mut t = 0;
    for epoch in &schedule.epochs {
        for batch in epoch {
            state += spec.increment(&state, data, batch, t)?;
            t += 1;
        }
        run.elapsed_s.push(start.elapsed().as_secs_f64() - paused);
        let t0 = Instant::now();
        run.weights.push(state.rows(0, nw).into_owned());
        paused += t0.elapsed().as_secs_f64();
    }
    for w in &run.weights {
        run.accuracy.push(spec.model.accuracy(w, data)?);
    }
    Ok(run)
}

fn check_schedule(schedule: &Schedule, n: usize) -> Result<()> {
    if schedule.epochs.is_empty() {
        return Err(Error::Config("schedule has no epochs".into()));
    }
    if schedule.epochs.iter().flatten().any(Vec::is_empty) {
        return Err(Error::Config("schedule contains an empty minibatch".into()));
    }
    match schedule.max_index() {
        Some(m) if m >= n => Err(Error::Config(format!("schedule index {m} beyond {n} records"))),
        _ => Ok(()),
    }
}

/// Scheme dimensions for training `spec` on `features`-dimensional records.
/// `extra` gives the lift `(y, u, state)`; the input lift is the noise width.
pub fn ml_dims(spec: &TrainSpec, features: usize, extra: (usize, usize, usize)) -> Result<Dims> {
    let (ny, nu, nz) = (features + 1, spec.model.param_count(), spec.state_dim());
    Dims::new((ny, nu, nz), (ny + extra.0, nu + extra.1, nz + extra.2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    /// Record `i` is encoded with step `i`.
    pub records: Vec<EncodedInput>,
    pub classes: usize,
}

impl EncodedDataset {
    /// The record the released model is anchored to.
    pub fn anchor(&self) -> Result<&EncodedInput> {
        self.records
            .first()
            .ok_or_else(|| Error::Config("encoded dataset has no anchor record".into()))
    }
}

/// Encodes every record with its own Laplace draw.
pub fn encode_dataset<R: Rng + ?Sized>(scheme: &EncodingScheme, data: &Dataset, rng: &mut R) -> Result<EncodedDataset> {
    ensure_dim("record width", scheme.dims().ny, data.dim() + 1)?;
    let records = (0..data.len())
        .map(|i| scheme.encode_input(i as u64, &data.record(i), rng))
        .collect::<Result<_>>()?;
    Ok(EncodedDataset {
        records,
        classes: data.classes,
    })
}

/// Cloud-side view of the database: decoded features and labels rounded to
/// the nearest class.
pub fn decode_dataset(material: &TargetMaterial, enc: &EncodedDataset) -> Result<Dataset> {
    let ny = material.dims().ny;
    if ny < 2 || enc.classes < 2 || enc.records.is_empty() {
        return Err(Error::Config("encoded dataset is empty or malformed".into()));
    }
    let d = ny - 1;
    let mut features = Mat::zeros(enc.records.len(), d);
    let mut labels = Vec::with_capacity(enc.records.len());
    let top = (enc.classes - 1) as f64;
    for (i, r) in enc.records.iter().enumerate() {
        let y = material.decode_input(r)?;
        features.row_mut(i).copy_from(&y.rows(0, d).transpose());
        labels.push((y[d] * top).round().clamp(0.0, top) as usize);
    }
    Ok(Dataset {
        features,
        labels,
        classes: enc.classes,
    })
}

/// Output of the cloud's training run.
#[derive(Debug, Clone)]
pub struct TargetRun {
    /// Encoded optimizer state at the start and after every epoch.
    pub checkpoints: Vec<Vector>,
    /// `Pi3 w_T + Pi4 ytilde_0`, tagged with the anchor's step.
    pub utility: EncodedUtility,
    /// Cumulative seconds after each epoch, dataset decoding included.
    pub elapsed_s: Vec<f64>,
}

/// Trains on the encoded database without the owner's keys. The schedule
/// must hash to `expected_checksum`, the value the owner committed to.
pub fn target_optimize(
    material: &TargetMaterial,
    spec: &TrainSpec,
    enc: &EncodedDataset,
    schedule: &Schedule,
    expected_checksum: u64,
    zeta_tilde0: &Vector,
) -> Result<TargetRun> {
    spec.validate()?;
    let dims = material.dims();
    ensure_dim("model parameters", dims.nu, spec.model.param_count())?;
    ensure_dim("optimizer state", dims.nzeta, spec.state_dim())?;
    ensure_dim("encoded state", dims.nzeta_tilde, zeta_tilde0.len())?;
    if schedule.checksum() != expected_checksum {
        return Err(Error::Protocol(format!(
            "minibatch schedule checksum {:016x} does not match the agreed {expected_checksum:016x}",
            schedule.checksum()
        )));
    }
    let start = Instant::now();
    let data = decode_dataset(material, enc)?;
    check_schedule(schedule, data.len())?;
    let mut zt = zeta_tilde0.clone();
    let mut run = TargetRun {
        checkpoints: vec![zt.clone()],
        utility: EncodedUtility {
            step: 0,
            utilde: Vector::zeros(0),
        },
        elapsed_s: Vec::with_capacity(schedule.epochs.len()),
    };
    let mut t = 0;
    for epoch in &schedule.epochs {
        for batch in epoch {
            let zeta = material.pi2_left() * &zt;
            zt += material.pi2() * spec.increment(&zeta, &data, batch, t)?;
            if !zt.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    step: t,
                    what: "encoded optimizer state is not finite".into(),
                });
            }
            t += 1;
        }
        run.checkpoints.push(zt.clone());
        run.elapsed_s.push(start.elapsed().as_secs_f64());
    }
    let w = (material.pi2_left() * &zt).rows(0, dims.nu).into_owned();
    run.utility = material.encode_utility(&w, enc.anchor()?)?;
    Ok(run)
}

/// Owner-side recovery `Pi3_left (wtilde - Pi4 ytilde_0)`.
pub fn decode_model(scheme: &EncodingScheme, utility: &EncodedUtility, enc: &EncodedDataset) -> Result<Vector> {
    scheme.decode_utility(utility, enc.anchor()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Blobs { n: usize, classes: usize, dim: usize, spread: f64 },
    Digits { n: usize },
    Csv { path: std::path::PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlConfig {
    pub data: DataSource,
    pub arch: Architecture,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub clip: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub scales: Scales,
    pub sigma: f64,
    /// Lift of `(record, model, optimizer state)` dimensions.
    pub extra: (usize, usize, usize),
    pub seed: u64,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Blobs {
                n: 600,
                classes: 3,
                dim: 2,
                spread: 0.05,
            },
            arch: Architecture::Logistic,
            optimizer: Optimizer::sgd(0.001),
            epochs: 50,
            clip: 1000.0,
            batch_size: 64,
            batches_per_epoch: 1,
            scales: Scales::default(),
            sigma: 1e4,
            extra: (4, 2, 2),
            seed: 7,
        }
    }
}

impl MlConfig {
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Blobs {
                n,
                classes,
                dim,
                spread,
            } => Dataset::blobs(*n, *classes, *dim, *spread, self.seed),
            DataSource::Digits { n } => Dataset::digits(*n, self.seed),
            DataSource::Csv { path } => Dataset::read_csv(std::fs::File::open(path)?),
        }
    }

    pub fn spec(&self, data: &Dataset) -> Result<TrainSpec> {
        let spec = TrainSpec {
            model: Model::new(self.arch, data.dim(), data.classes)?,
            optimizer: self.optimizer,
            clip: self.clip,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn schedule(&self, n: usize) -> Result<Schedule> {
        Schedule::shuffled(n, self.batch_size, self.batches_per_epoch, self.epochs, self.seed ^ 0x5c4e_d01e)
    }

    pub fn keygen(&self, spec: &TrainSpec, features: usize) -> Result<EncodingScheme> {
        let dims = ml_dims(spec, features, self.extra)?;
        keygen(dims, self.scales, LaplaceParams::centered(dims.noise_dim(), self.sigma)?, self.seed)
    }
}

/// Plain and encoded training side by side.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub plain: TrainRun,
    /// Owner-side evaluation of the cloud's checkpoints.
    pub siml: TrainRun,
    /// Model recovered from the released utility.
    pub decoded: Vector,
    pub schedule_checksum: u64,
}

impl Benchmark {
    /// `max |w_plain - w_decoded|`.
    pub fn max_param_gap(&self) -> f64 {
        let last = self.plain.weights.last().expect("at least the initial weights");
        (last - &self.decoded).amax()
    }

    pub fn accuracies_equal(&self) -> bool {
        self.plain.accuracy == self.siml.accuracy
    }

    pub fn time_ratio(&self) -> f64 {
        let p = self.plain.elapsed_s.last().copied().unwrap_or(0.0);
        let s = self.siml.elapsed_s.last().copied().unwrap_or(0.0);
        s / p.max(f64::MIN_POSITIVE)
    }

    /// `epoch,plain_acc,siml_acc,plain_time_s,siml_time_s`; epoch 0 is the
    /// initial model at time 0.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "plain_acc", "siml_acc", "plain_time_s", "siml_time_s"])?;
        for e in 0..self.plain.accuracy.len() {
            let time = |r: &TrainRun| if e == 0 { 0.0 } else { r.elapsed_s[e - 1] };
            out.write_record([
                e.to_string(),
                self.plain.accuracy[e].to_string(),
                self.siml.accuracy[e].to_string(),
                format!("{:e}", time(&self.plain)),
                format!("{:e}", time(&self.siml)),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the configured experiment both ways on a shared schedule.
pub fn benchmark(cfg: &MlConfig) -> Result<Benchmark> {
    let data = cfg.dataset()?;
    let spec = cfg.spec(&data)?;
    let schedule = cfg.schedule(data.len())?;
    let w0 = spec.model.init(cfg.seed);
    let plain = train_plain(&spec, &data, &schedule, &w0)?;
    let scheme = cfg.keygen(&spec, data.dim())?;
    benchmark_with(&scheme, &spec, &data, &schedule, &w0, plain, cfg.seed)
}

/// Encoded half of [`benchmark`] against an existing plain run.
pub fn benchmark_with(
    scheme: &EncodingScheme,
    spec: &TrainSpec,
    data: &Dataset,
    schedule: &Schedule,
    w0: &Vector,
    plain: TrainRun,
    seed: u64,
) -> Result<Benchmark> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    let start = Instant::now();
    let enc = encode_dataset(scheme, data, &mut rng)?;
    let zt0 = scheme.immerse_state(&spec.optimizer.initial_state(w0))?;
    let encode_s = start.elapsed().as_secs_f64();
    let checksum = schedule.checksum();
    let target = target_optimize(&scheme.target_material(), spec, &enc, schedule, checksum, &zt0)?;
    let t0 = Instant::now();
    let decoded = decode_model(scheme, &target.utility, &enc)?;
    let decode_s = t0.elapsed().as_secs_f64();

    let nw = spec.model.param_count();
    let mut siml = TrainRun::default();
    for zt in &target.checkpoints {
        let w = scheme.recover_state(zt)?.rows(0, nw).into_owned();
        siml.accuracy.push(spec.model.accuracy(&w, data)?);
        siml.weights.push(w);
    }
    let epochs = target.elapsed_s.len();
    siml.elapsed_s = target
        .elapsed_s
        .iter()
        .enumerate()
        .map(|(e, t)| encode_s + t + if e + 1 == epochs { decode_s } else { 0.0 })
        .collect();
    Ok(Benchmark {
        plain,
        siml,
        decoded,
        schedule_checksum: checksum,
    })
}
