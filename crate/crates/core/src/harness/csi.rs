//! Monte-Carlo runs of the blind `(α, φ)` estimator.

use std::fmt::Write as _;

use crate::channel::{draw_channel, transmit, ChannelKind};
use crate::error::{Error, Result};
use crate::estimator::{joint_estimate, normalized_observation, true_csi, EstimatorModel};
use crate::par::{map_ordered, ExecutionMode};
use crate::signal::{power_normalize, to_complex};

use super::pipeline::Experiment;
use super::rng::{stream, DATA_STREAM, GAIN_STREAM};

pub const CSI_SCHEMA: &str = "# diffjscc csi schema v1";
pub const CSI_HEADER: &str = "trial,snr_db,true_alpha,est_alpha,true_phase,est_phase,iterations,converged";

#[derive(Debug, Clone, PartialEq)]
pub struct CsiRow {
    pub trial: usize,
    pub snr_db: f64,
    pub true_alpha: f64,
    pub est_alpha: f64,
    pub true_phase: f64,
    pub est_phase: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `trials` estimates per configured SNR. Uses the configured estimators,
/// or the moment estimators of the source when none are loaded.
pub fn run_csi(exp: &Experiment, mode: ExecutionMode) -> Result<Vec<CsiRow>> {
    let cfg = &exp.cfg;
    if cfg.channel.kind == ChannelKind::FastFading {
        return Err(Error::Config("CSI estimation needs a single-gain channel".into()));
    }
    let moment;
    let (snr_model, phase_model) = match &exp.estimators {
        Some((s, p)) => (s, p),
        None => {
            if (cfg.source.fourth_moment() - 3.0).abs() < 1e-12 || cfg.source.complex_mean() == 0.0 {
                return Err(Error::Config(
                    "moment estimation needs a source with nonzero excess kurtosis and mean".into(),
                ));
            }
            moment = EstimatorModel::moment(&cfg.source);
            (&moment, &moment)
        }
    };
    let opts = cfg.estimator.joint_options();
    let jobs: Vec<(usize, f64, usize)> = cfg
        .channel
        .snr_db
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| (0..cfg.trials).map(move |t| (i, s, t)))
        .collect();
    map_ordered(mode, jobs, |(snr_index, snr_db, trial)| {
        let mut data = stream(cfg.seed, DATA_STREAM, snr_index, 0, trial);
        let mut gain = stream(cfg.seed, GAIN_STREAM, snr_index, 0, trial);
        let (f, _) = cfg.source.sample(cfg.latent_dim, &mut data)?;
        let z = to_complex(&power_normalize(&f)?)?;
        let ch = draw_channel(cfg.channel.kind, snr_db, z.len(), 1, &mut gain)?;
        let y = transmit(&z, &ch, &mut data)?;
        let est = joint_estimate(snr_model, phase_model, &normalized_observation(&y)?, &opts)?.estimate;
        let (true_alpha, true_phase) = true_csi(ch.block_gains()[0], ch.noise_variance());
        Ok(CsiRow {
            trial,
            snr_db,
            true_alpha,
            est_alpha: est.alpha,
            true_phase,
            est_phase: est.phase,
            iterations: est.iterations,
            converged: est.converged,
        })
    })
    .into_iter()
    .collect()
}

pub fn csi_csv(rows: &[CsiRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{CSI_SCHEMA}").unwrap();
    writeln!(out, "{CSI_HEADER}").unwrap();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.trial, r.snr_db, r.true_alpha, r.est_alpha, r.true_phase, r.est_phase, r.iterations, r.converged
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    #[test]
    fn rows_per_snr_and_trial() {
        let cfg = ExperimentConfig::from_toml(
            "trials = 3\nlatent_dim = 256\n[source]\nkind = \"structured\"\nmean_offset = 0.8\ncorrelation = 0.5\n\
             [channel]\nkind = \"slow_fading\"\nsnr_db = [0.0, 10.0]\n",
        )
        .unwrap();
        let exp = Experiment::new(cfg).unwrap();
        let rows = run_csi(&exp, ExecutionMode::Sequential).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(csi_csv(&rows).lines().count(), 8);
        assert!(rows.iter().all(|r| r.est_alpha > 0.0 && r.est_alpha < 1.0));
    }

    #[test]
    fn gaussian_source_fails_cleanly() {
        let exp = Experiment::new(ExperimentConfig::from_toml("trials = 1\nlatent_dim = 8\n").unwrap()).unwrap();
        assert!(matches!(
            run_csi(&exp, ExecutionMode::Sequential),
            Err(Error::Config(_))
        ));
    }
}
