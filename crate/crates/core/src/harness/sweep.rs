//! Grid sweeps and their CSV output.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par::{map_ordered, ExecutionMode};

use super::pipeline::{Cell, Experiment, Scheme, TrialRecord, TrialStatus};

pub const SWEEP_SCHEMA: &str = "# diffjscc sweep schema v1";
pub const SUMMARY_SCHEMA: &str = "# summary schema v1";

pub const RECORD_HEADER: &str =
    "seed,scheme,snr_db,rho,mask_ratio,trial,mse,psnr_db,est_alpha_error,est_phase_error,iterations,status,wall_time";
pub const SUMMARY_HEADER: &str =
    "scheme,snr_db,rho,mask_ratio,trials,failures,mse_mean,mse_stderr,psnr_mean,psnr_stderr";

/// Written in place of values that do not apply or could not be computed.
pub const NA: &str = "na";

fn num(v: Option<f64>) -> String {
    match v {
        None => NA.to_string(),
        Some(x) if x == f64::INFINITY => "inf".to_string(),
        Some(x) => format!("{x}"),
    }
}

fn status(s: &TrialStatus) -> String {
    match s {
        TrialStatus::Ok => "ok".to_string(),
        TrialStatus::Failed(msg) => {
            let clean: String = msg
                .chars()
                .map(|c| if c == ',' || c == '\n' { ';' } else { c })
                .collect();
            format!("failed: {clean}")
        }
    }
}

pub fn record_line(r: &TrialRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.seed,
        r.scheme.label(),
        r.snr_db,
        r.rho,
        r.mask_ratio,
        r.trial,
        num(r.mse),
        num(r.psnr_db),
        num(r.est_alpha_error),
        num(r.est_phase_error),
        r.iterations.map(|i| i.to_string()).unwrap_or_else(|| NA.into()),
        status(&r.status),
        r.wall_time,
    )
}

/// Per-cell mean and standard error over successful trials.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub rho: usize,
    pub mask_ratio: f64,
    pub trials: usize,
    pub failures: usize,
    pub mse_mean: Option<f64>,
    pub mse_stderr: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub psnr_stderr: Option<f64>,
}

fn mean_stderr(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || !mean.is_finite() {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

pub fn summarize(records: &[TrialRecord]) -> CellSummary {
    let first = &records[0];
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let mses: Vec<f64> = ok.iter().filter_map(|r| r.mse).collect();
    let psnrs: Vec<f64> = ok.iter().filter_map(|r| r.psnr_db).collect();
    let (mse_mean, mse_stderr) = mean_stderr(&mses);
    let (psnr_mean, psnr_stderr) = mean_stderr(&psnrs);
    CellSummary {
        scheme: first.scheme,
        snr_db: first.snr_db,
        rho: first.rho,
        mask_ratio: first.mask_ratio,
        trials: records.len(),
        failures: records.len() - ok.len(),
        mse_mean,
        mse_stderr,
        psnr_mean,
        psnr_stderr,
    }
}

pub fn summary_line(s: &CellSummary) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        s.scheme.label(),
        s.snr_db,
        s.rho,
        s.mask_ratio,
        s.trials,
        s.failures,
        num(s.mse_mean),
        num(s.mse_stderr),
        num(s.psnr_mean),
        num(s.psnr_stderr),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<CellSummary>,
}

impl SweepResult {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{SWEEP_SCHEMA}").unwrap();
        writeln!(out, "{RECORD_HEADER}").unwrap();
        for r in &self.records {
            writeln!(out, "{}", record_line(r)).unwrap();
        }
        writeln!(out, "{SUMMARY_SCHEMA}").unwrap();
        writeln!(out, "{SUMMARY_HEADER}").unwrap();
        for s in &self.summaries {
            writeln!(out, "{}", summary_line(s)).unwrap();
        }
        out
    }

    pub fn summary(&self, scheme: Scheme, snr_db: f64, rho: usize) -> Option<&CellSummary> {
        self.summaries
            .iter()
            .find(|s| s.scheme == scheme && s.snr_db == snr_db && s.rho == rho)
    }
}

/// Every `(scheme, snr, ρ, trial)` of the grid. Rows come back in that
/// nesting order whatever the execution mode.
pub fn run_grid(exp: &Experiment, mode: ExecutionMode) -> SweepResult {
    let cells = exp.cells();
    let trials = exp.cfg.trials;
    let mut jobs: Vec<(Scheme, Cell, usize)> = Vec::new();
    for &scheme in &exp.cfg.pipeline.schemes {
        for cell in &cells {
            for t in 0..trials {
                jobs.push((scheme, *cell, t));
            }
        }
    }
    let records = map_ordered(mode, jobs, |(scheme, cell, t)| exp.run_pipeline(scheme, &cell, t));
    let summaries = records.chunks(trials).map(summarize).collect();
    SweepResult { records, summaries }
}

/// Runs the grid and writes the CSV to `out`. The output file is created
/// before any trial runs so an unwritable path fails fast.
pub fn run_sweep(exp: &Experiment, out: &Path, mode: ExecutionMode) -> Result<SweepResult> {
    let mut file = File::create(out).map_err(|e| Error::io(out, e))?;
    let result = run_grid(exp, mode);
    file.write_all(result.to_csv().as_bytes())
        .map_err(|e| Error::io(out, e))?;
    Ok(result)
}

/// Drops the last column of every data row, for comparisons that must ignore
/// timing.
pub fn strip_wall_time(csv: &str) -> String {
    let mut in_records = false;
    let mut out = String::new();
    for line in csv.lines() {
        if line == SWEEP_SCHEMA {
            in_records = true;
        } else if line == SUMMARY_SCHEMA {
            in_records = false;
        }
        let kept = if in_records && !line.starts_with('#') {
            line.rsplit_once(',').map(|(head, _)| head).unwrap_or(line)
        } else {
            line
        };
        out.push_str(kept);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    fn exp(text: &str) -> Experiment {
        Experiment::new(ExperimentConfig::from_toml(text).unwrap()).unwrap()
    }

    #[test]
    fn minimal_grid_has_one_row_and_one_summary() {
        let e = exp("trials = 1\nlatent_dim = 8\n");
        let r = run_grid(&e, ExecutionMode::Sequential);
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.summaries.len(), 1);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], SWEEP_SCHEMA);
        assert_eq!(lines[3], SUMMARY_SCHEMA);
    }

    #[test]
    fn row_count_is_grid_product() {
        let e = exp(
            "trials = 3\nlatent_dim = 8\n[channel]\nkind = \"fast_fading\"\nsnr_db = [0.0, 5.0]\nblock_lengths = [1, 2]\n\
             [pipeline]\nschemes = [\"diffusion\", \"diffusion_no_fill\"]\n",
        );
        let r = run_grid(&e, ExecutionMode::Parallel);
        assert_eq!(r.records.len(), 2 * 2 * 2 * 3);
        assert_eq!(r.summaries.len(), 8);
        assert!(r.summaries.iter().all(|s| s.trials == 3));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let e = exp("trials = 4\nlatent_dim = 8\n[channel]\nkind = \"fast_fading\"\nsnr_db = [0.0, 5.0]\n");
        let a = strip_wall_time(&run_grid(&e, ExecutionMode::Sequential).to_csv());
        let b = strip_wall_time(&run_grid(&e, ExecutionMode::Workers(3)).to_csv());
        assert_eq!(a, b);
    }

    #[test]
    fn unwritable_output_fails_before_running() {
        let e = exp("trials = 1\nlatent_dim = 8\n");
        let r = run_sweep(&e, Path::new("/nonexistent/dir/out.csv"), ExecutionMode::Sequential);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn standard_error_of_constant_is_zero() {
        let (m, s) = mean_stderr(&[2.0, 2.0, 2.0]);
        assert_eq!(m, Some(2.0));
        assert_eq!(s, Some(0.0));
        assert_eq!(mean_stderr(&[1.0]).1, None);
    }

    #[test]
    fn strip_removes_only_record_timing() {
        let csv = format!("{SWEEP_SCHEMA}\n{RECORD_HEADER}\n1,a,0.5\n{SUMMARY_SCHEMA}\nx,y\n");
        let s = strip_wall_time(&csv);
        assert!(s.contains("\n1,a\n"));
        assert!(s.ends_with("x,y\n"));
    }
}
