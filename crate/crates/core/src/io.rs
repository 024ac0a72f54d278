//! CSV and flat binary export/import.
//!
//! Binary matrices: `rows` and `cols` as little-endian `u64`, then `rows * cols`
//! complex entries in row-major order, each as little-endian `f64` re, im.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::arrays::{Direction, C64};
use crate::dictionary::Source;
use crate::error::{Error, Result};
use crate::experiment::{empirical_cdf, ExperimentResult, FixOutcome, TrialRecord};
use crate::momp::PathEstimate;
use crate::scene::PropagationPath;

pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<C64>) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].re.to_le_bytes())?;
            w.write_all(&m[(i, j)].im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<DMatrix<C64>> {
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let rows = u64::from_le_bytes(next(&mut r)?) as usize;
    let cols = u64::from_le_bytes(next(&mut r)?) as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= (1 << 32))
        .ok_or_else(|| Error::Parse(format!("implausible matrix header {rows} x {cols}")))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let re = f64::from_le_bytes(next(&mut r)?);
        let im = f64::from_le_bytes(next(&mut r)?);
        data.push(C64::new(re, im));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn save_matrix(path: &Path, m: &DMatrix<C64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<C64>> {
    read_matrix(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub source: String,
    pub gain_re: f64,
    pub gain_im: f64,
    pub phi_x: f64,
    pub phi_y: f64,
    pub phi_z: f64,
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
    pub tau_s: f64,
    pub label: String,
}

impl PathRow {
    pub fn new(source: &str, p: &PropagationPath) -> Self {
        Self {
            source: source.into(),
            gain_re: p.gain.re,
            gain_im: p.gain.im,
            phi_x: p.departure.x,
            phi_y: p.departure.y,
            phi_z: p.departure.z,
            theta_x: p.arrival.x,
            theta_y: p.arrival.y,
            theta_z: p.arrival.z,
            tau_s: p.delay,
            label: p.label.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub source: Source,
    pub j1: usize,
    pub j2: usize,
    pub j3: usize,
    pub phi_x: f64,
    pub phi_y: f64,
    pub phi_z: f64,
    pub rel_delay_s: f64,
    pub gain: f64,
    pub row_norm: f64,
    pub energy: f64,
}

impl From<&PathEstimate> for EstimateRow {
    fn from(e: &PathEstimate) -> Self {
        Self {
            source: e.source,
            j1: e.index[0],
            j2: e.index[1],
            j3: e.index[2],
            phi_x: e.direction.x,
            phi_y: e.direction.y,
            phi_z: e.direction.z,
            rel_delay_s: e.rel_delay,
            gain: e.gain,
            row_norm: e.gain,
            energy: e.energy,
        }
    }
}

impl From<&EstimateRow> for PathEstimate {
    fn from(r: &EstimateRow) -> Self {
        Self {
            source: r.source,
            index: [r.j1, r.j2, r.j3],
            direction: Direction {
                x: r.phi_x,
                y: r.phi_y,
                z: r.phi_z,
            },
            rel_delay: r.rel_delay_s,
            gain: r.row_norm,
            energy: r.energy,
        }
    }
}

/// An estimate row prefixed with its trial index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEstimateRow {
    pub trial: usize,
    pub source: Source,
    pub j1: usize,
    pub j2: usize,
    pub j3: usize,
    pub phi_x: f64,
    pub phi_y: f64,
    pub phi_z: f64,
    pub rel_delay_s: f64,
    pub gain: f64,
    pub row_norm: f64,
    pub energy: f64,
}

impl TrialEstimateRow {
    pub fn new(trial: usize, e: &PathEstimate) -> Self {
        let r = EstimateRow::from(e);
        Self {
            trial,
            source: r.source,
            j1: r.j1,
            j2: r.j2,
            j3: r.j3,
            phi_x: r.phi_x,
            phi_y: r.phi_y,
            phi_z: r.phi_z,
            rel_delay_s: r.rel_delay_s,
            gain: r.gain,
            row_norm: r.row_norm,
            energy: r.energy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixRow {
    pub trial: usize,
    pub method: String,
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
    pub t0_s: f64,
    pub err_m: f64,
    pub residual: f64,
    pub failure: String,
}

impl FixRow {
    pub fn new(trial: usize, method: &str, outcome: &FixOutcome) -> Self {
        match outcome {
            FixOutcome::Fixed { fix, error } => Self {
                trial,
                method: method.into(),
                mx: fix.position.x,
                my: fix.position.y,
                mz: fix.position.z,
                t0_s: fix.t0,
                err_m: *error,
                residual: fix.residual,
                failure: String::new(),
            },
            FixOutcome::Failed(kind) => Self {
                trial,
                method: method.into(),
                mx: f64::NAN,
                my: f64::NAN,
                mz: f64::NAN,
                t0_s: f64::NAN,
                err_m: f64::INFINITY,
                residual: f64::NAN,
                failure: kind.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
    pub t0_s: f64,
    pub nmse: f64,
    pub iterations: usize,
    pub failure: String,
}

impl From<&TrialRecord> for TrialRow {
    fn from(r: &TrialRecord) -> Self {
        Self {
            trial: r.trial,
            mx: r.ms.x,
            my: r.ms.y,
            mz: r.ms.z,
            t0_s: r.t0,
            nmse: r.nmse,
            iterations: r.iterations,
            failure: r.failure.clone().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub method: String,
    pub error_m: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub trials: usize,
    pub failures: usize,
    pub p50_m: f64,
    pub p80_m: f64,
    pub p90_m: f64,
}

pub fn write_csv<T: Serialize, W: Write>(w: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_csv(BufWriter::new(File::create(path)?), rows)
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn load_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_csv(BufReader::new(File::open(path)?))
}

pub fn estimate_rows(estimates: &[PathEstimate]) -> Vec<EstimateRow> {
    estimates.iter().map(EstimateRow::from).collect()
}

pub fn load_estimates(path: &Path) -> Result<Vec<PathEstimate>> {
    Ok(load_csv::<EstimateRow>(path)?.iter().map(PathEstimate::from).collect())
}

pub fn fix_rows(records: &[TrialRecord]) -> Vec<FixRow> {
    records
        .iter()
        .flat_map(|r| r.fixes.iter().map(|(m, f)| FixRow::new(r.trial, m, f)))
        .collect()
}

/// Per-method CDF of the finite errors in `rows`.
pub fn cdf_rows(rows: &[FixRow]) -> Result<Vec<CdfRow>> {
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut out = Vec::new();
    for m in methods {
        let errors: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == m && r.err_m.is_finite())
            .map(|r| r.err_m)
            .collect();
        if errors.is_empty() {
            continue;
        }
        out.extend(empirical_cdf(&errors)?.into_iter().map(|(e, p)| CdfRow {
            method: m.into(),
            error_m: e,
            probability: p,
        }));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

pub fn summary_rows(result: &ExperimentResult) -> Vec<SummaryRow> {
    result
        .summary
        .iter()
        .map(|s| SummaryRow {
            method: s.method.as_str().into(),
            trials: s.trials,
            failures: s.failures,
            p50_m: s.p50,
            p80_m: s.p80,
            p90_m: s.p90,
        })
        .collect()
}

/// Writes `trials.csv`, `fixes.csv`, `estimates.csv`, `summary.csv`, `cdf.csv`
/// and `timing.csv` into `dir`. All but the last are deterministic.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let trials: Vec<TrialRow> = result.records.iter().map(TrialRow::from).collect();
    save_csv(&dir.join("trials.csv"), &trials)?;
    let fixes = fix_rows(&result.records);
    save_csv(&dir.join("fixes.csv"), &fixes)?;

    let estimates: Vec<TrialEstimateRow> = result
        .records
        .iter()
        .flat_map(|r| r.estimates.iter().map(|e| TrialEstimateRow::new(r.trial, e)))
        .collect();
    save_csv(&dir.join("estimates.csv"), &estimates)?;

    save_csv(&dir.join("summary.csv"), &summary_rows(result))?;
    match cdf_rows(&fixes) {
        Ok(cdf) => save_csv(&dir.join("cdf.csv"), &cdf)?,
        Err(Error::EmptyInput) => save_csv::<CdfRow>(&dir.join("cdf.csv"), &[])?,
        Err(e) => return Err(e),
    }

    #[derive(Serialize)]
    struct Timing {
        trial: usize,
        elapsed_ms: f64,
    }
    let timing: Vec<Timing> = result
        .records
        .iter()
        .map(|r| Timing {
            trial: r.trial,
            elapsed_ms: r.elapsed_ms,
        })
        .collect();
    save_csv(&dir.join("timing.csv"), &timing)
}
