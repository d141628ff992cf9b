//! One trial of the end-to-end chain: sample, normalize, transmit, equalize
//! (or estimate blindly), mask, denoise, score.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    draw_channel, equalize, noise_variance_from_snr_db, transmit, ChannelKind, ChannelRealization, EqualizedOutput,
};
use crate::denoiser::{AnalyticDenoiser, Denoiser, DenoiserModel, NetworkDenoiser};
use crate::engine::{denoise_fast, denoise_slow, SamplerConfig};
use crate::error::{Error, Result};
use crate::estimator::{joint_estimate, normalized_observation, true_csi, wrap_phase, EstimatorModel};
use crate::latent_ops::{apply_mask, mask_tokens, mse, psnr_from_mse, TokenGrid};
use crate::schedule::NoiseSchedule;
use crate::signal::{power_normalize, to_complex, LatentVector};

use super::config::{EstimatorKind, ExperimentConfig, ModelKind};
use super::rng::{stream, DATA_STREAM, GAIN_STREAM};

/// What the receiver does with the equalized output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// No denoising.
    Equalized,
    /// Diffusion denoising; water filling on heterogeneous noise.
    Diffusion,
    /// Diffusion denoising without water filling.
    DiffusionNoFill,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Equalized => "equalized",
            Scheme::Diffusion => "diffusion",
            Scheme::DiffusionNoFill => "diffusion_no_fill",
        }
    }
}

/// One point of the `(snr, ρ)` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub snr_index: usize,
    pub snr_db: f64,
    pub rho_index: usize,
    pub rho: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub seed: u64,
    pub scheme: Scheme,
    pub snr_db: f64,
    pub rho: usize,
    pub mask_ratio: f64,
    pub trial: usize,
    pub mse: Option<f64>,
    /// `+∞` for a perfect reconstruction.
    pub psnr_db: Option<f64>,
    pub est_alpha_error: Option<f64>,
    pub est_phase_error: Option<f64>,
    pub iterations: Option<usize>,
    pub status: TrialStatus,
    pub wall_time: f64,
}

impl TrialRecord {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

struct Outcome {
    mse: f64,
    est: Option<(f64, f64, usize)>,
}

/// Config plus loaded models, ready to run trials.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserModel,
    pub estimators: Option<(EstimatorModel, EstimatorModel)>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.schedule()?;
        let sampler = cfg.schedule.sampler();
        let denoiser = match cfg.denoiser.kind {
            ModelKind::Analytic => {
                DenoiserModel::Analytic(AnalyticDenoiser::new(cfg.source.clone(), cfg.denoiser.conditioning))
            }
            ModelKind::Trained => {
                let path = cfg.denoiser.model_path.as_deref().expect("validated");
                let net = NetworkDenoiser::load(path)?;
                if net.latent_dim() != Some(cfg.latent_dim) {
                    return Err(Error::Config(format!(
                        "{} was trained for {:?} dims, config asks for {}",
                        path.display(),
                        net.latent_dim(),
                        cfg.latent_dim
                    )));
                }
                DenoiserModel::Network(net)
            }
        };
        let estimators = if cfg.pipeline.pilot_free {
            Some(match cfg.estimator.kind {
                EstimatorKind::Moment => (EstimatorModel::moment(&cfg.source), EstimatorModel::moment(&cfg.source)),
                EstimatorKind::Trained => (
                    EstimatorModel::load(cfg.estimator.snr_model.as_deref().expect("validated"))?,
                    EstimatorModel::load(cfg.estimator.phase_model.as_deref().expect("validated"))?,
                ),
            })
        } else {
            None
        };
        Ok(Experiment {
            cfg,
            schedule,
            sampler,
            denoiser,
            estimators,
        })
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for (snr_index, &snr_db) in self.cfg.channel.snr_db.iter().enumerate() {
            for (rho_index, &rho) in self.cfg.channel.block_lengths.iter().enumerate() {
                out.push(Cell {
                    snr_index,
                    snr_db,
                    rho_index,
                    rho,
                });
            }
        }
        out
    }

    /// Runs one trial. Failures are recorded, never propagated.
    pub fn run_pipeline(&self, scheme: Scheme, cell: &Cell, trial: usize) -> TrialRecord {
        let start = Instant::now();
        let result = self.trial_inner(scheme, cell, trial);
        let mut rec = TrialRecord {
            seed: self.cfg.seed,
            scheme,
            snr_db: cell.snr_db,
            rho: cell.rho,
            mask_ratio: self.cfg.pipeline.mask.ratio,
            trial,
            mse: None,
            psnr_db: None,
            est_alpha_error: None,
            est_phase_error: None,
            iterations: None,
            status: TrialStatus::Ok,
            wall_time: 0.0,
        };
        match result {
            Ok(o) if o.mse.is_finite() => {
                rec.mse = Some(o.mse);
                rec.psnr_db = Some(psnr_from_mse(o.mse, self.cfg.pipeline.psnr_peak));
                if let Some((da, dp, it)) = o.est {
                    rec.est_alpha_error = Some(da);
                    rec.est_phase_error = Some(dp);
                    rec.iterations = Some(it);
                }
            }
            Ok(o) => rec.status = TrialStatus::Failed(format!("non-finite mse {}", o.mse)),
            Err(e) => rec.status = TrialStatus::Failed(e.to_string()),
        }
        rec.wall_time = start.elapsed().as_secs_f64();
        rec
    }

    fn draw_channel_for(&self, cell: &Cell, trial: usize, symbols: usize) -> Result<ChannelRealization> {
        let ch = &self.cfg.channel;
        let mut gain_rng = stream(self.cfg.seed, GAIN_STREAM, cell.snr_index, cell.rho_index, trial);
        match (ch.kind, ch.fixed_gain) {
            (ChannelKind::SlowFading, Some([re, im])) => {
                ChannelRealization::slow(Complex64::new(re, im), noise_variance_from_snr_db(cell.snr_db), symbols)
            }
            (kind, _) => draw_channel(kind, cell.snr_db, symbols, cell.rho, &mut gain_rng),
        }
    }

    fn trial_inner(&self, scheme: Scheme, cell: &Cell, trial: usize) -> Result<Outcome> {
        let cfg = &self.cfg;
        let mut data = stream(cfg.seed, DATA_STREAM, cell.snr_index, cell.rho_index, trial);
        let mut own = stream(cfg.seed, scheme.label(), cell.snr_index, cell.rho_index, trial);
        let (f0, cond) = cfg.source.sample(cfg.latent_dim, &mut data)?;
        let f = power_normalize(&f0)?;
        let z = to_complex(&f)?;
        let ch = self.draw_channel_for(cell, trial, z.len())?;
        let y = transmit(&z, &ch, &mut data)?;
        let (mut eq, est) = match &self.estimators {
            None => (equalize(&y, &ch)?, None),
            Some((snr_model, phase_model)) => {
                let observed = normalized_observation(&y)?;
                let joint = joint_estimate(snr_model, phase_model, &observed, &cfg.estimator.joint_options())?;
                let (alpha, phase) = true_csi(ch.block_gains()[0], ch.noise_variance());
                let e = joint.estimate;
                let errs = ((e.alpha - alpha).abs(), wrap_phase(e.phase - phase).abs(), e.iterations);
                (EqualizedOutput::uniform(joint.corrected, 1.0 - e.alpha), Some(errs))
            }
        };
        let mask = &cfg.pipeline.mask;
        let masked = mask.ratio > 0.0;
        if masked {
            let grid = TokenGrid::from_latent(&f, mask.embed_dim)?;
            let dropped = mask_tokens(&grid, mask.ratio, mask.strategy, &mut data)?;
            eq = apply_mask(&eq, &dropped.element_mask(), &mut data)?;
        }
        let cond = Some(&cond);
        let out: LatentVector = match scheme {
            Scheme::Equalized => eq.values.clone(),
            Scheme::Diffusion | Scheme::DiffusionNoFill => {
                let fill = scheme == Scheme::Diffusion;
                if ch.kind() == ChannelKind::FastFading || masked {
                    denoise_fast(&eq, &self.denoiser, &self.schedule, &self.sampler, cond, fill, &mut own)?
                } else {
                    denoise_slow(&eq, &self.denoiser, &self.schedule, &self.sampler, cond)?
                }
            }
        };
        Ok(Outcome {
            mse: mse(&out, &f)?,
            est,
        })
    }

    /// The denoiser as a trait object.
    pub fn denoiser(&self) -> &dyn Denoiser {
        &self.denoiser
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(text: &str) -> Experiment {
        Experiment::new(ExperimentConfig::from_toml(text).unwrap()).unwrap()
    }

    #[test]
    fn noiseless_chain_reaches_sentinel_region() {
        let e = quick("latent_dim = 16\n[channel]\nsnr_db = [200.0]\n");
        let r = e.run_pipeline(Scheme::Diffusion, &e.cells()[0], 0);
        assert!(r.is_ok());
        assert!(r.psnr_db.unwrap() >= 100.0, "{:?}", r.psnr_db);
    }

    #[test]
    fn same_trial_twice_is_identical() {
        let e = quick("latent_dim = 16\n[channel]\nkind = \"fast_fading\"\nblock_lengths = [2]\n");
        let c = e.cells()[0];
        let mut a = e.run_pipeline(Scheme::Diffusion, &c, 3);
        let mut b = e.run_pipeline(Scheme::Diffusion, &c, 3);
        a.wall_time = 0.0;
        b.wall_time = 0.0;
        assert_eq!(a, b);
    }

    #[test]
    fn unit_gain_slow_fading_matches_awgn() {
        let awgn = quick("latent_dim = 16\n");
        let slow = quick("latent_dim = 16\n[channel]\nkind = \"slow_fading\"\nfixed_gain = [1.0, 0.0]\n");
        for trial in 0..3 {
            let mut a = awgn.run_pipeline(Scheme::Diffusion, &awgn.cells()[0], trial);
            let mut b = slow.run_pipeline(Scheme::Diffusion, &slow.cells()[0], trial);
            a.wall_time = 0.0;
            b.wall_time = 0.0;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pilot_free_records_estimation_errors() {
        let e = quick(
            "latent_dim = 512\n[source]\nkind = \"structured\"\nmean_offset = 0.8\ncorrelation = 0.5\n\
             [channel]\nkind = \"slow_fading\"\nsnr_db = [10.0]\n[pipeline]\npilot_free = true\n",
        );
        let r = e.run_pipeline(Scheme::Diffusion, &e.cells()[0], 0);
        assert!(r.is_ok(), "{:?}", r.status);
        assert!(r.est_alpha_error.is_some() && r.iterations.unwrap() >= 1);
    }

    #[test]
    fn masked_trials_run() {
        let e = quick("latent_dim = 32\n[pipeline.mask]\nratio = 0.5\nembed_dim = 4\n");
        let r = e.run_pipeline(Scheme::Diffusion, &e.cells()[0], 0);
        assert!(r.is_ok(), "{:?}", r.status);
        assert_eq!(r.mask_ratio, 0.5);
    }
}
