//! Parameter sweeps against a reference force-strain curve.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SweepMetric, SweepParameter};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::postproc::{failure_load, read_force_strain_csv, ForceStrainRecord, FORCE_STRAIN_HEADER};

pub const SWEEP_CSV: &str = "sweep_results.csv";
pub const SWEEP_TXT: &str = "sweep_summary.txt";

/// Reference curve: probe strain [µstrain] against force [N].
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCurve {
    pub strain: Vec<f64>,
    pub force: Vec<f64>,
}

pub const REFERENCE_HEADER: &str = "strain_ustrain,force_n";

impl ReferenceCurve {
    /// Read either a `strain_ustrain,force_n` table or a `force_strain.csv`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let first = text.lines().next().unwrap_or("").trim();
        let curve = if first == FORCE_STRAIN_HEADER {
            Self::from_records(&read_force_strain_csv(path)?)
        } else if first == REFERENCE_HEADER {
            let mut c = ReferenceCurve { strain: vec![], force: vec![] };
            for (i, line) in text.lines().enumerate().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: Option<(f64, f64)> = line
                    .split_once(',')
                    .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
                let (e, f) = parsed.ok_or_else(|| {
                    Error::Postproc(format!("{}:{}: expected two numbers", path.display(), i + 1))
                })?;
                c.strain.push(e);
                c.force.push(f);
            }
            c
        } else {
            return Err(Error::Postproc(format!(
                "{}: unknown reference format; expected header '{REFERENCE_HEADER}' or '{FORCE_STRAIN_HEADER}'",
                path.display()
            )));
        };
        if curve.force.len() < 2 {
            return Err(Error::Postproc(format!("{}: reference curve needs at least 2 points", path.display())));
        }
        Ok(curve)
    }

    pub fn from_records(records: &[ForceStrainRecord]) -> Self {
        ReferenceCurve {
            strain: records.iter().map(|r| r.probe_eps3).collect(),
            force: records.iter().map(|r| r.reaction_force).collect(),
        }
    }

    pub fn failure_load(&self) -> f64 {
        self.force.iter().fold(0.0, |m, f| m.max(f.abs()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = format!("{REFERENCE_HEADER}\n");
        for (e, f) in self.strain.iter().zip(&self.force) {
            let _ = writeln!(s, "{e},{f}");
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// |F_model − F_ref| / F_ref for the failure loads.
pub fn relative_failure_error(model: f64, reference: f64) -> f64 {
    (model - reference).abs() / reference
}

/// RMS force difference [N] on the pre-peak branch, with model forces
/// interpolated at the reference strains. Reference points outside the
/// model's strain range are skipped; fewer than two usable points give ∞.
pub fn curve_rmse(records: &[ForceStrainRecord], reference: &ReferenceCurve) -> f64 {
    let Ok(peak) = failure_load(records) else { return f64::INFINITY };
    let mut pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.step <= peak.step && r.probe_eps3.is_finite())
        .map(|r| (r.probe_eps3.abs(), r.reaction_force.abs()))
        .collect();
    pts.insert(0, (0.0, 0.0));
    if pts.windows(2).any(|w| w[1].0 < w[0].0) {
        // non-monotone strain history: compare in order of strain magnitude
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&e, &f) in reference.strain.iter().zip(&reference.force) {
        let e = e.abs();
        let Some(i) = pts.windows(2).position(|w| w[0].0 <= e && e <= w[1].0) else { continue };
        let (a, b) = (pts[i], pts[i + 1]);
        let t = if b.0 > a.0 { (e - a.0) / (b.0 - a.0) } else { 0.0 };
        let model = a.1 + t * (b.1 - a.1);
        sum += (model - f.abs()).powi(2);
        n += 1;
    }
    if n < 2 {
        f64::INFINITY
    } else {
        (sum / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub value: f64,
    pub output_dir: PathBuf,
    pub failure_load: Option<f64>,
    pub relative_error: Option<f64>,
    pub curve_rmse: Option<f64>,
    /// Value of the ranking metric; `None` for failed runs.
    pub metric: Option<f64>,
    pub error: Option<String>,
}

/// Order candidates by metric (ascending), failed runs last; ties go to the
/// smaller parameter value. The sort is stable.
pub fn rank(results: &mut [CandidateResult]) {
    results.sort_by(|a, b| {
        let key = |r: &CandidateResult| r.metric.filter(|m| !m.is_nan()).unwrap_or(f64::INFINITY);
        let failed = |r: &CandidateResult| r.metric.is_none();
        failed(a)
            .cmp(&failed(b))
            .then(key(a).total_cmp(&key(b)))
            .then(a.value.total_cmp(&b.value))
    });
}

fn candidate_dir(out: &Path, param: SweepParameter, i: usize, value: f64) -> PathBuf {
    let name = match param {
        SweepParameter::L0 => "l0",
        SweepParameter::Beta => "beta",
        SweepParameter::Gc0 => "gc0",
    };
    out.join(format!("candidate_{i:02}_{name}_{value}"))
}

/// Evaluate one finished run against the reference.
pub fn evaluate(records: &[ForceStrainRecord], reference: &ReferenceCurve, metric: SweepMetric) -> (f64, f64, f64, f64) {
    let fl = failure_load(records).map(|f| f.force).unwrap_or(0.0);
    let rel = relative_failure_error(fl, reference.failure_load());
    let rmse = curve_rmse(records, reference);
    let m = match metric {
        SweepMetric::FailureLoad => rel,
        SweepMetric::CurveRmse => rmse,
    };
    (fl, rel, rmse, m)
}

/// Run every candidate of the sweep block, write the results table and a
/// text summary into `out`, and return the ranked results.
pub fn run_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<CandidateResult>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep: no [sweep] block in the configuration".into()))?;
    let reference = ReferenceCurve::load(&sweep.reference)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut results = Vec::with_capacity(sweep.values.len());
    for (i, &value) in sweep.values.iter().enumerate() {
        let dir = candidate_dir(out, sweep.parameter, i, value);
        let mut c = cfg.with_parameter(sweep.parameter, value);
        c.sweep = None;
        c.output.dir = dir.clone();
        log::info!("sweep candidate {}/{}: {:?} = {value}", i + 1, sweep.values.len(), sweep.parameter);
        let outcome = c.validate().and_then(|_| pipeline::run(&c, &dir));
        results.push(match outcome {
            Ok(report) => {
                let (fl, rel, rmse, m) = evaluate(&report.records, &reference, sweep.metric);
                CandidateResult {
                    value,
                    output_dir: dir,
                    failure_load: Some(fl),
                    relative_error: Some(rel),
                    curve_rmse: Some(rmse),
                    metric: Some(m),
                    error: None,
                }
            }
            Err(e) => {
                log::error!("sweep candidate {value} failed: {e}");
                CandidateResult {
                    value,
                    output_dir: dir,
                    failure_load: None,
                    relative_error: None,
                    curve_rmse: None,
                    metric: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    rank(&mut results);
    write_results(out, sweep.parameter, sweep.metric, reference.failure_load(), &results)?;
    Ok(results)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_results(
    out: &Path,
    param: SweepParameter,
    metric: SweepMetric,
    reference_load: f64,
    results: &[CandidateResult],
) -> Result<()> {
    let mut csv = String::from("rank,value,failure_load_n,relative_error,curve_rmse_n,status,output_dir\n");
    for (i, r) in results.iter().enumerate() {
        let status = if r.error.is_some() { "failed" } else { "ok" };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            i + 1,
            r.value,
            opt(r.failure_load),
            opt(r.relative_error),
            opt(r.curve_rmse),
            status,
            r.output_dir.display()
        );
    }
    let p = out.join(SWEEP_CSV);
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;

    let mut txt = format!("Sweep over {param:?}, ranked by {metric:?}\nReference failure load: {reference_load:.1} N\n\n");
    let _ = writeln!(txt, "{:>4}  {:>10}  {:>14}  {:>10}  {:>14}", "rank", "value", "F_fail [N]", "rel. err", "curve RMSE [N]");
    for (i, r) in results.iter().enumerate() {
        match &r.error {
            None => {
                let _ = writeln!(
                    txt,
                    "{:>4}  {:>10}  {:>14.1}  {:>9.2}%  {:>14.2}",
                    i + 1,
                    r.value,
                    r.failure_load.unwrap_or(f64::NAN),
                    100.0 * r.relative_error.unwrap_or(f64::NAN),
                    r.curve_rmse.unwrap_or(f64::NAN)
                );
            }
            Some(e) => {
                let _ = writeln!(txt, "{:>4}  {:>10}  failed: {e}", i + 1, r.value);
            }
        }
    }
    let p = out.join(SWEEP_TXT);
    fs::write(&p, txt).map_err(|e| Error::io(&p, e))
}
