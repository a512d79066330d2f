//! Meta-learning tasks: synthetic generators, budget sampling, real-data
//! ingestion and JSON-lines persistence.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accounting::PrivacyBudget;
use crate::dpsetconv::ContextSet;
use crate::error::{Error, Result};
use crate::gp::{gp_sample, gp_sample_lowrank, LOWRANK_TOL};
use crate::kernel::KernelSpec;
use crate::serial::to_json_line;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Eq,
    Matern32,
    Sawtooth,
    Real,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eq" => Ok(Family::Eq),
            "matern32" | "matern" => Ok(Family::Matern32),
            "sawtooth" => Ok(Family::Sawtooth),
            "real" => Ok(Family::Real),
            other => Err(Error::domain(format!("unknown task family '{other}'"))),
        }
    }
}

/// Closed interval `[lo, hi]`; `lo == hi` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn fixed(v: f64) -> Self {
        Interval(v, v)
    }

    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 <= self.1) {
            return Err(Error::domain(format!("{what} range [{}, {}] is not ordered", self.0, self.1)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.0 <= v && v <= self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub family: Family,
    /// GP lengthscale ℓ.
    pub lengthscale: Interval,
    /// Sawtooth inverse period τ⁻¹.
    pub inv_period: Interval,
    pub signal_scale: f64,
    pub noise_scale: Interval,
    /// Inclusive range of the context size N.
    pub context_size: (usize, usize),
    pub context_range: Interval,
    pub target_range: Interval,
    pub target_count: usize,
    pub epsilon: Interval,
    pub delta: f64,
}

impl GeneratorConfig {
    fn synthetic(family: Family) -> Self {
        Self {
            family,
            lengthscale: Interval::fixed(1.0),
            inv_period: Interval::fixed(0.5),
            signal_scale: 1.0,
            noise_scale: Interval::fixed(0.2),
            context_size: (1, 512),
            context_range: Interval(-2.0, 2.0),
            target_range: Interval(-6.0, 6.0),
            target_count: 512,
            epsilon: Interval(0.9, 4.0),
            delta: 1e-3,
        }
    }

    /// EQ GP tasks with a fixed lengthscale.
    pub fn eq(lengthscale: f64) -> Self {
        Self {
            lengthscale: Interval::fixed(lengthscale),
            ..Self::synthetic(Family::Eq)
        }
    }

    /// EQ GP tasks with ℓ drawn per task.
    pub fn eq_amortised() -> Self {
        Self {
            lengthscale: Interval(0.2, 2.5),
            ..Self::synthetic(Family::Eq)
        }
    }

    /// Sawtooth tasks with a fixed period τ.
    pub fn sawtooth(period: f64) -> Self {
        Self {
            inv_period: Interval::fixed(1.0 / period),
            noise_scale: Interval::fixed(0.05),
            ..Self::synthetic(Family::Sawtooth)
        }
    }

    pub fn sawtooth_amortised() -> Self {
        Self {
            inv_period: Interval(0.2, 1.25),
            noise_scale: Interval::fixed(0.05),
            ..Self::synthetic(Family::Sawtooth)
        }
    }

    /// Matérn-3/2 tasks on [−1, 1] used for sim-to-real training.
    pub fn matern_sim_to_real() -> Self {
        Self {
            family: Family::Matern32,
            lengthscale: Interval(0.5, 2.0),
            noise_scale: Interval(0.3, 0.8),
            context_range: Interval(-1.0, 1.0),
            target_range: Interval(-1.0, 1.0),
            ..Self::synthetic(Family::Matern32)
        }
    }

    /// Same generator with targets drawn from the context range, as used at
    /// evaluation time.
    pub fn for_evaluation(mut self) -> Self {
        self.target_range = self.context_range;
        self
    }

    pub fn with_context_size(mut self, n: usize) -> Self {
        self.context_size = (n, n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.lengthscale.validate("lengthscale")?;
        self.inv_period.validate("inverse period")?;
        self.noise_scale.validate("noise scale")?;
        self.context_range.validate("context input")?;
        self.target_range.validate("target input")?;
        self.epsilon.validate("epsilon")?;
        if self.context_size.0 > self.context_size.1 {
            return Err(Error::domain("context size range is not ordered"));
        }
        if self.lengthscale.lo() <= 0.0 || self.inv_period.lo() <= 0.0 || self.signal_scale <= 0.0 {
            return Err(Error::domain("lengthscale, inverse period and signal scale must be > 0"));
        }
        if self.noise_scale.lo() < 0.0 || self.epsilon.lo() < 0.0 {
            return Err(Error::domain("noise scale and epsilon must be >= 0"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::domain(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.family == Family::Real {
            return Err(Error::domain("real tasks come from split_real_task, not a generator"));
        }
        Ok(())
    }
}

/// Record of how a task was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<f64>,
}

impl TaskMeta {
    fn empty(family: Family) -> Self {
        Self {
            family,
            lengthscale: None,
            period: None,
            signal_scale: None,
            noise_scale: None,
            direction: None,
            phase: None,
        }
    }

    /// The generating kernel, for GP tasks.
    pub fn kernel(&self) -> Option<KernelSpec> {
        let (l, sv, sn) = (self.lengthscale?, self.signal_scale?, self.noise_scale?);
        match self.family {
            Family::Eq => KernelSpec::eq(l, sv, sn).ok(),
            Family::Matern32 => KernelSpec::matern32(l, sv, sn).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub context: ContextSet,
    pub target_xs: Vec<f64>,
    pub target_ys: Vec<f64>,
    pub budget: PrivacyBudget,
    pub meta: TaskMeta,
}

/// Uniform ε from the configured range with the configured δ.
pub fn sample_budget<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<PrivacyBudget> {
    cfg.epsilon.validate("epsilon")?;
    PrivacyBudget::new(cfg.epsilon.sample(rng), cfg.delta)
}

fn sample_inputs<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(cfg.context_size.0..=cfg.context_size.1);
    let cx = (0..n).map(|_| cfg.context_range.sample(rng)).collect();
    let tx = (0..cfg.target_count).map(|_| cfg.target_range.sample(rng)).collect();
    (cx, tx)
}

/// A task whose outputs are a joint draw from an EQ or Matérn-3/2 GP over
/// the context and target inputs.
///
/// EQ draws use the low-rank sampler, which is exact to a trace tolerance
/// of 1e-10·σ_v²; Matérn draws use a dense factorisation because their
/// spectrum decays too slowly for a low-rank factor to pay off.
pub fn gen_gp_task<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Task> {
    cfg.validate()?;
    let lengthscale = cfg.lengthscale.sample(rng);
    let noise = cfg.noise_scale.sample(rng);
    let spec = match cfg.family {
        Family::Eq => KernelSpec::eq(lengthscale, cfg.signal_scale, noise)?,
        Family::Matern32 => KernelSpec::matern32(lengthscale, cfg.signal_scale, noise)?,
        other => return Err(Error::domain(format!("{other:?} is not a GP family"))),
    };
    let (cx, tx) = sample_inputs(cfg, rng);
    let budget = sample_budget(cfg, rng)?;
    let all: Vec<f64> = cx.iter().chain(&tx).copied().collect();
    let ys = match cfg.family {
        Family::Eq => gp_sample_lowrank(&spec, &all, LOWRANK_TOL, rng),
        _ => gp_sample(&spec, &all, rng)?,
    };
    let n = cx.len();
    Ok(Task {
        context: ContextSet {
            xs: cx,
            ys: ys[..n].to_vec(),
        },
        target_xs: tx,
        target_ys: ys[n..].to_vec(),
        budget,
        meta: TaskMeta {
            lengthscale: Some(lengthscale),
            signal_scale: Some(cfg.signal_scale),
            noise_scale: Some(noise),
            ..TaskMeta::empty(cfg.family)
        },
    })
}

/// Noise-free truncated sawtooth (2/π)·Σ_{m=1,2} sin(2mπ·d·x/τ + φ)/m.
pub fn sawtooth_signal(x: f64, period: f64, direction: f64, phase: f64) -> f64 {
    let arg = 2.0 * PI * direction * x / period;
    (2.0 / PI) * ((arg + phase).sin() + 0.5 * (2.0 * arg + phase).sin())
}

pub fn gen_sawtooth_task<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Task> {
    cfg.validate()?;
    if cfg.family != Family::Sawtooth {
        return Err(Error::domain("generator is not configured for sawtooth tasks"));
    }
    let period = 1.0 / cfg.inv_period.sample(rng);
    let noise = cfg.noise_scale.sample(rng);
    let direction: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cx, tx) = sample_inputs(cfg, rng);
    let budget = sample_budget(cfg, rng)?;
    let mut observe = |x: f64| {
        let e: f64 = rng.sample(StandardNormal);
        sawtooth_signal(x, period, direction as f64, phase) + noise * e
    };
    let cy: Vec<f64> = cx.iter().map(|&x| observe(x)).collect();
    let ty: Vec<f64> = tx.iter().map(|&x| observe(x)).collect();
    Ok(Task {
        context: ContextSet { xs: cx, ys: cy },
        target_xs: tx,
        target_ys: ty,
        budget,
        meta: TaskMeta {
            period: Some(period),
            noise_scale: Some(noise),
            direction: Some(direction),
            phase: Some(phase),
            ..TaskMeta::empty(Family::Sawtooth)
        },
    })
}

/// Dispatches on the configured family.
pub fn gen_task<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Task> {
    match cfg.family {
        Family::Sawtooth => gen_sawtooth_task(cfg, rng),
        _ => gen_gp_task(cfg, rng),
    }
}

/// Reproducible, index-addressable task sequence. Task `i` comes from its
/// own ChaCha stream, so the sequence does not depend on how tasks are
/// split between threads.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub config: GeneratorConfig,
    pub seed: u64,
}

impl TaskStream {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, seed })
    }

    pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        rng
    }

    pub fn task(&self, index: u64) -> Result<Task> {
        gen_task(&self.config, &mut Self::rng_for(self.seed, index))
    }

    pub fn tasks(&self, start: u64, count: usize) -> Result<Vec<Task>> {
        use rayon::prelude::*;
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.task(start + i))
            .collect()
    }
}

/// Affine maps applied to a real dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalisation {
    pub x_min: f64,
    pub x_max: f64,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Normalisation {
    pub fn denormalise_x(&self, x: f64) -> f64 {
        self.x_min + (x + 1.0) * 0.5 * (self.x_max - self.x_min)
    }

    pub fn denormalise_y(&self, y: f64) -> f64 {
        self.y_mean + y * self.y_sd
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealDataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub normalisation: Normalisation,
}

impl RealDataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Reads two named columns of a headed CSV, maps inputs onto [−1, 1] and
/// standardises outputs.
pub fn load_real_dataset(path: &Path, input_column: &str, output_column: &str) -> Result<RealDataset> {
    let ingest = |msg: String| Error::Ingestion(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(e.to_string()))?;
    let headers = reader.headers().map_err(|e| ingest(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingest(format!("missing column '{name}'")))
    };
    let (ix, iy) = (find(input_column)?, find(output_column)?);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ingest(e.to_string()))?;
        let cell = |i: usize, name: &str| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ingest(format!("row {}: column '{name}' has non-numeric value '{raw}'", row + 2)))
        };
        xs.push(cell(ix, input_column)?);
        ys.push(cell(iy, output_column)?);
    }
    if xs.len() < 2 {
        return Err(ingest(format!("need at least 2 rows, found {}", xs.len())));
    }
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x_max <= x_min {
        return Err(ingest(format!("column '{input_column}' is constant")));
    }
    let n = ys.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / n;
    let y_sd = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(y_sd > 0.0) {
        return Err(ingest(format!("column '{output_column}' has zero variance")));
    }
    let normalisation = Normalisation {
        x_min,
        x_max,
        y_mean,
        y_sd,
    };
    Ok(RealDataset {
        xs: xs.iter().map(|x| 2.0 * (x - x_min) / (x_max - x_min) - 1.0).collect(),
        ys: ys.iter().map(|y| (y - y_mean) / y_sd).collect(),
        normalisation,
    })
}

/// Random `n`-point context, every other point a target.
pub fn split_real_task<R: Rng + ?Sized>(
    data: &RealDataset,
    n: usize,
    rng: &mut R,
    budget: PrivacyBudget,
) -> Result<Task> {
    if n >= data.len() {
        return Err(Error::domain(format!(
            "context size {n} leaves no targets among {} points",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (ctx, tgt) = order.split_at(n);
    Ok(Task {
        context: ContextSet {
            xs: ctx.iter().map(|&i| data.xs[i]).collect(),
            ys: ctx.iter().map(|&i| data.ys[i]).collect(),
        },
        target_xs: tgt.iter().map(|&i| data.xs[i]).collect(),
        target_ys: tgt.iter().map(|&i| data.ys[i]).collect(),
        budget,
        meta: TaskMeta::empty(Family::Real),
    })
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    cx: Vec<f64>,
    cy: Vec<f64>,
    tx: Vec<f64>,
    ty: Vec<f64>,
    eps: f64,
    delta: f64,
    meta: TaskMeta,
}

impl From<&Task> for TaskRecord {
    fn from(t: &Task) -> Self {
        TaskRecord {
            cx: t.context.xs.clone(),
            cy: t.context.ys.clone(),
            tx: t.target_xs.clone(),
            ty: t.target_ys.clone(),
            eps: t.budget.epsilon(),
            delta: t.budget.delta(),
            meta: t.meta.clone(),
        }
    }
}

impl TaskRecord {
    fn into_task(self) -> std::result::Result<Task, String> {
        if self.tx.len() != self.ty.len() {
            return Err("target inputs and outputs differ in length".into());
        }
        let context = ContextSet::new(self.cx, self.cy).map_err(|e| e.to_string())?;
        let budget = PrivacyBudget::new(self.eps, self.delta).map_err(|e| e.to_string())?;
        Ok(Task {
            context,
            target_xs: self.tx,
            target_ys: self.ty,
            budget,
            meta: self.meta,
        })
    }
}

/// One JSON object per line, floats with 17 significant digits.
pub fn task_to_json_line(task: &Task) -> String {
    to_json_line(&TaskRecord::from(task)).expect("task records serialise")
}

pub fn write_tasks(path: &Path, tasks: &[Task]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for task in tasks {
        writeln!(out, "{}", task_to_json_line(task)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a task file. Blank lines are skipped; any malformed line is
/// reported with its 1-based line number.
pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: TaskRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        tasks.push(record.into_task().map_err(parse_err)?);
    }
    Ok(tasks)
}
