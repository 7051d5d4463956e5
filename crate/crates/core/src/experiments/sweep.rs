use super::config::{Mode, SweepConfig};
use crate::algorithms::{coral_fit, erm_fit, ifm_run, irm_fit, oracle_w_star, simple_algo, Algorithm, IfmInput, TrainedPredictor};
use crate::env_model::{analytic_moments, flip_test_environment, sample_dataset, sample_environments, Dataset, EnvParams, ModelSpec};
use crate::error::{Error, Result};
use crate::gaussian_risk::{estimate_moments, zero_one_accuracy};
use crate::rng::{derive_seed, stream, Purpose};
use crate::theory_checks::spurious_leak_vector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::time::Instant;

pub const CSV_HEADER: [&str; 10] = [
    "algorithm",
    "E",
    "seed",
    "train_acc_min",
    "train_acc_mean",
    "test_acc_min",
    "test_acc_mean",
    "spurious_leak",
    "rounds",
    "wall_time_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub e: usize,
    /// Seed of the cell's problem instance.
    pub seed: u64,
    pub train_acc_min: f64,
    pub train_acc_mean: f64,
    pub test_acc_min: f64,
    pub test_acc_mean: f64,
    pub spurious_leak: f64,
    pub rounds: usize,
    pub wall_time_ms: f64,
}

impl SweepRow {
    fn failed(algorithm: Algorithm, e: usize, seed: u64) -> Self {
        SweepRow {
            algorithm,
            e,
            seed,
            train_acc_min: f64::NAN,
            train_acc_mean: f64::NAN,
            test_acc_min: f64::NAN,
            test_acc_mean: f64::NAN,
            spurious_leak: f64::NAN,
            rounds: 0,
            wall_time_ms: 0.0,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.test_acc_mean.is_nan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub algorithm: Algorithm,
    pub e: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub errors: Vec<CellError>,
}

impl SweepResult {
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| (r.algorithm, r.e, r.seed));
        self.errors.sort_by_key(|r| (r.algorithm, r.e, r.seed));
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.algorithm.name().to_string(),
                r.e.to_string(),
                r.seed.to_string(),
                r.train_acc_min.to_string(),
                r.train_acc_mean.to_string(),
                r.test_acc_min.to_string(),
                r.test_acc_mean.to_string(),
                r.spurious_leak.to_string(),
                r.rounds.to_string(),
                r.wall_time_ms.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads rows back; error tags are not part of the CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::Parse(format!("unexpected CSV header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| rec[i].parse::<f64>().map_err(|e| Error::Parse(format!("column {}: {e}", CSV_HEADER[i])));
            let u = |i: usize| rec[i].parse::<u64>().map_err(|e| Error::Parse(format!("column {}: {e}", CSV_HEADER[i])));
            rows.push(SweepRow {
                algorithm: rec[0].parse()?,
                e: u(1)? as usize,
                seed: u(2)?,
                train_acc_min: f(3)?,
                train_acc_mean: f(4)?,
                test_acc_min: f(5)?,
                test_acc_mean: f(6)?,
                spurious_leak: f(7)?,
                rounds: u(8)? as usize,
                wall_time_ms: f(9)?,
            });
        }
        Ok(SweepResult { rows, errors: Vec::new() })
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        Self::read_csv(s.as_bytes())
    }

    /// Rows of one algorithm at one environment count.
    pub fn cell(&self, algorithm: Algorithm, e: usize) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.algorithm == algorithm && r.e == e)
    }

    /// Mean test accuracy over the successful trials of a cell.
    pub fn mean_test_accuracy(&self, algorithm: Algorithm, e: usize) -> Option<f64> {
        let accs: Vec<f64> = self.cell(algorithm, e).filter(|r| !r.is_failed()).map(|r| r.test_acc_mean).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Seed of the `(E, trial)` cell.
pub fn cell_seed(master: u64, e: usize, trial: usize) -> u64 {
    derive_seed(master, &[e as u64, trial as u64])
}

/// Shared inputs of one `(E, trial)` cell.
struct Cell {
    e: usize,
    seed: u64,
    spec: ModelSpec,
    train: Vec<EnvParams>,
    test: Vec<EnvParams>,
}

impl Cell {
    fn new(cfg: &SweepConfig, e: usize, trial: usize) -> Result<Self> {
        let seed = cell_seed(cfg.seed, e, trial);
        let spec = cfg.spec(seed)?;
        let train = sample_environments(&spec, e, &cfg.sampler())?;
        let test = train.iter().map(flip_test_environment).collect::<Result<_>>()?;
        Ok(Cell { e, seed, spec, train, test })
    }

    fn datasets(&self, n: usize) -> Result<Vec<Dataset>> {
        self.train
            .iter()
            .enumerate()
            .map(|(i, env)| sample_dataset(&self.spec, env, n, &mut stream(self.seed, Purpose::TrainData, i as u64)))
            .collect()
    }
}

fn needs_data(alg: Algorithm, mode: Mode) -> bool {
    match alg {
        Algorithm::Oracle => false,
        Algorithm::Ifm | Algorithm::Simple => mode != Mode::Analytic,
        _ => true,
    }
}

fn fit(cfg: &SweepConfig, cell: &Cell, alg: Algorithm, data: Option<&[Dataset]>) -> Result<TrainedPredictor> {
    let mut g = stream(cell.seed, Purpose::Cell, alg as u64);
    let data = || data.ok_or_else(|| Error::InvalidParameter("training data missing".into()));
    match alg {
        Algorithm::Ifm => match cfg.mode {
            Mode::Analytic => {
                let m: Vec<_> = cell.train.iter().map(|env| analytic_moments(&cell.spec, env)).collect();
                ifm_run(IfmInput::Moments(&m), &cfg.ifm_config(), &mut g)
            }
            Mode::Sampled { .. } => ifm_run(IfmInput::Datasets(data()?), &cfg.ifm_config(), &mut g),
        },
        Algorithm::Simple => {
            let (a, b) = match cfg.mode {
                Mode::Analytic => (analytic_moments(&cell.spec, &cell.train[0]), analytic_moments(&cell.spec, &cell.train[1])),
                Mode::Sampled { .. } => {
                    let d = data()?;
                    (estimate_moments(&d[0])?, estimate_moments(&d[1])?)
                }
            };
            simple_algo(&a, &b, cell.spec.d_s)
        }
        Algorithm::Oracle => oracle_w_star(&cell.spec),
        Algorithm::Erm => erm_fit(data()?, &cfg.optimizer),
        Algorithm::Irm => irm_fit(data()?, cfg.irm_penalty, &cfg.optimizer),
        Algorithm::Coral => coral_fit(data()?, &cfg.coral, &cfg.optimizer, &mut g),
        Algorithm::CoralDisjoint => coral_fit(data()?, &cfg.coral_disjoint, &cfg.optimizer, &mut g),
    }
}

fn evaluate(cfg: &SweepConfig, cell: &Cell, alg: Algorithm, data: Option<&[Dataset]>) -> std::result::Result<SweepRow, (SweepRow, String)> {
    let start = Instant::now();
    let pred = match fit(cfg, cell, alg, data) {
        Ok(p) => p,
        Err(e) => return Err((SweepRow::failed(alg, cell.e, cell.seed), e.to_string())),
    };
    let clf = pred.classifier();
    let train: Vec<f64> = cell.train.iter().map(|env| zero_one_accuracy(&clf, &cell.spec, env)).collect();
    let test: Vec<f64> = cell.test.iter().map(|env| zero_one_accuracy(&clf, &cell.spec, env)).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let leak = spurious_leak_vector(&pred.v, &cell.spec).unwrap_or(f64::NAN);
    Ok(SweepRow {
        algorithm: alg,
        e: cell.e,
        seed: cell.seed,
        train_acc_min: min(&train),
        train_acc_mean: mean(&train),
        test_acc_min: min(&test),
        test_acc_mean: mean(&test),
        spurious_leak: leak,
        rounds: pred.rounds(),
        wall_time_ms: if cfg.record_timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
    })
}

fn run_cell(cfg: &SweepConfig, e: usize, trial: usize) -> SweepResult {
    let mut out = SweepResult::default();
    let seed = cell_seed(cfg.seed, e, trial);
    let cell = match Cell::new(cfg, e, trial) {
        Ok(c) => c,
        Err(err) => {
            for &alg in &cfg.algorithms {
                out.rows.push(SweepRow::failed(alg, e, seed));
                out.errors.push(CellError { algorithm: alg, e, seed, message: err.to_string() });
            }
            return out;
        }
    };
    let data = if cfg.algorithms.iter().any(|&a| needs_data(a, cfg.mode)) { Some(cell.datasets(cfg.data_samples())) } else { None };
    let results: Vec<_> = cfg
        .algorithms
        .par_iter()
        .map(|&alg| match &data {
            Some(Err(err)) if needs_data(alg, cfg.mode) => Err((SweepRow::failed(alg, e, seed), err.to_string())),
            Some(Ok(d)) => evaluate(cfg, &cell, alg, Some(d)),
            _ => evaluate(cfg, &cell, alg, None),
        })
        .collect();
    for r in results {
        match r {
            Ok(row) => out.rows.push(row),
            Err((row, message)) => {
                out.errors.push(CellError { algorithm: row.algorithm, e, seed, message });
                out.rows.push(row);
            }
        }
    }
    out
}

/// Runs every `(algorithm, E, trial)` cell on a pool of `jobs` threads (`0` = all cores).
///
/// Each cell draws from streams keyed by its own seed, so the rows do not depend
/// on `jobs` or on which other cells are in the grid.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let mut algs = cfg.algorithms.clone();
    algs.sort();
    algs.dedup();
    let cfg = SweepConfig { algorithms: algs, ..cfg.clone() };
    let grid: Vec<(usize, usize)> = cfg.e_values.iter().flat_map(|&e| (0..cfg.trials).map(move |t| (e, t))).collect();
    let pool = thread_pool(jobs)?;
    let parts: Vec<SweepResult> = pool.install(|| grid.par_iter().map(|&(e, t)| run_cell(&cfg, e, t)).collect());
    let mut out = SweepResult::default();
    for p in parts {
        out.rows.extend(p.rows);
        out.errors.extend(p.errors);
    }
    out.sort();
    out.rows.dedup_by(|a, b| a.algorithm == b.algorithm && a.e == b.e && a.seed == b.seed);
    out.errors.dedup();
    Ok(out)
}

/// Worker pool with `jobs` threads, `0` meaning one per core.
pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::InvalidParameter(e.to_string()))
}
