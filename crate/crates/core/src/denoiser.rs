//! Denoisers: the exact posterior mean of a known source, or a trained MLP.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{read_model, write_model, Activation, Mlp, ModelHeader};
use crate::par::{map_ordered, ExecutionMode};
use crate::schedule::NoiseSchedule;
use crate::signal::LatentVector;
use crate::source::{ConditioningVector, SourceModel};

/// Estimate of the clean latent `f̂₀ = ε(f_t, β̄_t, c)`.
pub trait Denoiser: Send + Sync {
    /// Fixed input width, if the model has one.
    fn latent_dim(&self) -> Option<usize>;

    fn denoise(
        &self,
        noisy: &LatentVector,
        noise_level: f64,
        cond: Option<&ConditioningVector>,
    ) -> Result<LatentVector>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    None,
    Label,
}

/// Posterior mean of a known synthetic source.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticDenoiser {
    pub source: SourceModel,
    pub conditioning: ConditioningMode,
}

impl AnalyticDenoiser {
    pub fn new(source: SourceModel, conditioning: ConditioningMode) -> Self {
        AnalyticDenoiser { source, conditioning }
    }
}

impl Denoiser for AnalyticDenoiser {
    fn latent_dim(&self) -> Option<usize> {
        None
    }

    fn denoise(
        &self,
        noisy: &LatentVector,
        noise_level: f64,
        cond: Option<&ConditioningVector>,
    ) -> Result<LatentVector> {
        let cond = match self.conditioning {
            ConditioningMode::None => None,
            ConditioningMode::Label => cond,
        };
        self.source.posterior_mean(noisy, noise_level, cond)
    }
}

/// MLP over `[noisy, β̄, mask bits, one-hot label]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDenoiser {
    net: Mlp,
    latent_dim: usize,
    conditioning: ConditioningMode,
    num_labels: usize,
}

const ROLE: &str = "denoiser";

impl NetworkDenoiser {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden_width: usize,
        conditioning: ConditioningMode,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let num_labels = label_width(conditioning, num_labels)?;
        let input = 2 * latent_dim + 1 + num_labels;
        let net = Mlp::new(
            &[input, hidden_width, hidden_width, latent_dim],
            Activation::Tanh,
            Activation::Identity,
            rng,
        )?;
        Ok(NetworkDenoiser {
            net,
            latent_dim,
            conditioning,
            num_labels,
        })
    }

    /// All-zero weights; its output is identically zero.
    pub fn zeroed(latent_dim: usize, hidden_width: usize) -> Result<Self> {
        let net = Mlp::zeros(
            &[2 * latent_dim + 1, hidden_width, hidden_width, latent_dim],
            Activation::Tanh,
            Activation::Identity,
        )?;
        Ok(NetworkDenoiser {
            net,
            latent_dim,
            conditioning: ConditioningMode::None,
            num_labels: 0,
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn conditioning(&self) -> ConditioningMode {
        self.conditioning
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Network input. Masked positions are zeroed and flagged.
    pub fn input(
        &self,
        noisy: &[f64],
        noise_level: f64,
        mask: Option<&[bool]>,
        cond: Option<&ConditioningVector>,
    ) -> Result<Vec<f64>> {
        let n = self.latent_dim;
        if noisy.len() != n {
            return Err(Error::InvalidShape(format!(
                "denoiser expects {n} dims, got {}",
                noisy.len()
            )));
        }
        if !(0.0..=1.0).contains(&noise_level) {
            return Err(Error::Domain(format!("noise level {noise_level} outside [0, 1]")));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::InvalidShape(format!(
                    "mask has {} entries for {n} dims",
                    m.len()
                )));
            }
        }
        let mut x = Vec::with_capacity(self.net.input_dim());
        match mask {
            Some(m) => x.extend(noisy.iter().zip(m).map(|(v, &hid)| if hid { 0.0 } else { *v })),
            None => x.extend_from_slice(noisy),
        }
        x.push(noise_level);
        match mask {
            Some(m) => x.extend(m.iter().map(|&hid| if hid { 1.0 } else { 0.0 })),
            None => x.extend(std::iter::repeat_n(0.0, n)),
        }
        if self.conditioning == ConditioningMode::Label {
            let mut onehot = vec![0.0; self.num_labels];
            if let Some(k) = cond.and_then(|c| c.label) {
                if k >= self.num_labels {
                    return Err(Error::Domain(format!(
                        "label {k} out of range for {} labels",
                        self.num_labels
                    )));
                }
                onehot[k] = 1.0;
            }
            x.extend(onehot);
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut h = ModelHeader::default();
        h.set("role", ROLE);
        h.set("latent_dim", self.latent_dim);
        h.set(
            "conditioning",
            match self.conditioning {
                ConditioningMode::None => "none",
                ConditioningMode::Label => "label",
            },
        );
        h.set("num_labels", self.num_labels);
        self.net.describe("net.", &mut h);
        write_model(path, &h, &self.net.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = read_model(path)?;
        if h.get("role")? != ROLE {
            return Err(Error::ModelFormat(format!(
                "{} is not a denoiser model",
                path.display()
            )));
        }
        let latent_dim: usize = h.get_parsed("latent_dim")?;
        let conditioning = match h.get("conditioning")? {
            "none" => ConditioningMode::None,
            "label" => ConditioningMode::Label,
            other => return Err(Error::ModelFormat(format!("unknown conditioning `{other}`"))),
        };
        let num_labels: usize = h.get_parsed("num_labels")?;
        let mut net = Mlp::from_header("net.", &h)?;
        net.set_params(&params)?;
        let expect_in = 2 * latent_dim + 1 + num_labels;
        if net.input_dim() != expect_in || net.output_dim() != latent_dim {
            return Err(Error::ModelFormat("layer sizes disagree with latent_dim".into()));
        }
        Ok(NetworkDenoiser {
            net,
            latent_dim,
            conditioning,
            num_labels,
        })
    }

    /// Forward pass with an optional mask.
    pub fn predict(
        &self,
        noisy: &[f64],
        noise_level: f64,
        mask: Option<&[bool]>,
        cond: Option<&ConditioningVector>,
    ) -> Result<LatentVector> {
        let x = self.input(noisy, noise_level, mask, cond)?;
        Ok(LatentVector::new(self.net.forward(&x)))
    }
}

fn label_width(mode: ConditioningMode, num_labels: usize) -> Result<usize> {
    match mode {
        ConditioningMode::None => Ok(0),
        ConditioningMode::Label if num_labels == 0 => {
            Err(Error::Domain("label conditioning needs at least one label".into()))
        }
        ConditioningMode::Label => Ok(num_labels),
    }
}

impl Denoiser for NetworkDenoiser {
    fn latent_dim(&self) -> Option<usize> {
        Some(self.latent_dim)
    }

    fn denoise(
        &self,
        noisy: &LatentVector,
        noise_level: f64,
        cond: Option<&ConditioningVector>,
    ) -> Result<LatentVector> {
        self.predict(noisy, noise_level, None, cond)
    }
}

/// Either denoiser kind behind one type.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserModel {
    Analytic(AnalyticDenoiser),
    Network(NetworkDenoiser),
}

impl Denoiser for DenoiserModel {
    fn latent_dim(&self) -> Option<usize> {
        match self {
            DenoiserModel::Analytic(d) => d.latent_dim(),
            DenoiserModel::Network(d) => d.latent_dim(),
        }
    }

    fn denoise(
        &self,
        noisy: &LatentVector,
        noise_level: f64,
        cond: Option<&ConditioningVector>,
    ) -> Result<LatentVector> {
        match self {
            DenoiserModel::Analytic(d) => d.denoise(noisy, noise_level, cond),
            DenoiserModel::Network(d) => d.denoise(noisy, noise_level, cond),
        }
    }
}

/// Squared error per dimension of the denoiser on `f_t = √(1−β̄)f₀ + √β̄·n`.
///
/// With a mask the same error on the masked copy of `f_t` is added; an empty
/// mask therefore doubles the first term.
pub fn dm_loss(
    model: &NetworkDenoiser,
    f0: &[f64],
    noise_level: f64,
    noise: &[f64],
    mask: Option<&[bool]>,
    cond: Option<&ConditioningVector>,
) -> Result<f64> {
    if noise.len() != f0.len() {
        return Err(Error::InvalidShape("noise and latent differ in length".into()));
    }
    let ft = noisy_copy(f0, noise_level, noise);
    let n = f0.len() as f64;
    let sq = |out: &LatentVector| out.iter().zip(f0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut loss = sq(&model.predict(&ft, noise_level, None, cond)?);
    if let Some(m) = mask {
        loss += sq(&model.predict(&ft, noise_level, Some(m), cond)?);
    }
    Ok(loss / n)
}

fn noisy_copy(f0: &[f64], level: f64, noise: &[f64]) -> Vec<f64> {
    let a = (1.0 - level).sqrt();
    let b = level.sqrt();
    f0.iter().zip(noise).map(|(f, n)| a * f + b * n).collect()
}

/// Per-sample gradient of [`dm_loss`], accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
fn accumulate_loss_grad(
    model: &NetworkDenoiser,
    f0: &[f64],
    noise_level: f64,
    noise: &[f64],
    mask: Option<&[bool]>,
    cond: Option<&ConditioningVector>,
    weight: f64,
    grads: &mut crate::nn::Gradients,
) -> Result<f64> {
    let ft = noisy_copy(f0, noise_level, noise);
    let n = f0.len() as f64;
    let mut total = 0.0;
    let mut pass = |m: Option<&[bool]>| -> Result<()> {
        let x = model.input(&ft, noise_level, m, cond)?;
        let tr = model.net.trace(&x);
        let out = tr.output();
        total += out.iter().zip(f0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let g: Vec<f64> = out.iter().zip(f0).map(|(a, b)| weight * 2.0 * (a - b) / n).collect();
        model.net.backward(&tr, &g, grads);
        Ok(())
    };
    pass(None)?;
    if let Some(m) = mask {
        pass(Some(m))?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of positions hidden in the masked loss term; `0` disables it.
    pub mask_fraction: f64,
    /// Hidden width; `0` means `4 × latent_dim`.
    pub hidden_width: usize,
    pub seed: u64,
    /// Divergence: loss above `divergence_factor × initial` for
    /// `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        DenoiserTraining {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 0.05,
            mask_fraction: 0.0,
            hidden_width: 0,
            seed: 1,
            divergence_factor: 10.0,
            divergence_patience: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
}

impl TrainingReport {
    /// Mean of the loss over `window` consecutive steps.
    pub fn windowed(&self, window: usize) -> Vec<f64> {
        self.loss_curve
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

struct Sample {
    f0: LatentVector,
    cond: ConditioningVector,
    level: f64,
    noise: Vec<f64>,
    mask: Option<Vec<bool>>,
}

/// Trains a denoiser on draws from `source` with plain minibatch SGD.
pub fn train_denoiser(
    source: &SourceModel,
    latent_dim: usize,
    conditioning: ConditioningMode,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTraining,
) -> Result<(NetworkDenoiser, TrainingReport)> {
    train_denoiser_with(
        source,
        latent_dim,
        conditioning,
        schedule,
        cfg,
        ExecutionMode::from_env(),
    )
}

pub fn train_denoiser_with(
    source: &SourceModel,
    latent_dim: usize,
    conditioning: ConditioningMode,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTraining,
    mode: ExecutionMode,
) -> Result<(NetworkDenoiser, TrainingReport)> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.mask_fraction) {
        return Err(Error::Config(format!(
            "mask_fraction {} not in [0, 1)",
            cfg.mask_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = if cfg.hidden_width == 0 {
        4 * latent_dim
    } else {
        cfg.hidden_width
    };
    let labels = match conditioning {
        ConditioningMode::None => 0,
        ConditioningMode::Label => source.num_components(),
    };
    let mut model = NetworkDenoiser::new(latent_dim, width, conditioning, labels, &mut rng)?;
    let n_masked = (cfg.mask_fraction * latent_dim as f64).floor() as usize;
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut above = 0usize;
    for step in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| -> Result<Sample> {
                let (f0, cond) = source.sample(latent_dim, &mut rng)?;
                let t: f64 = rng.random();
                let level = schedule.level(t);
                let noise = (0..latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mask = (cfg.mask_fraction > 0.0).then(|| {
                    let mut m = vec![false; latent_dim];
                    for i in sample_indices(&mut rng, latent_dim, n_masked) {
                        m[i] = true;
                    }
                    m
                });
                Ok(Sample {
                    f0,
                    cond,
                    level,
                    noise,
                    mask,
                })
            })
            .collect::<Result<_>>()?;
        let model_ref = &model;
        let parts = map_ordered(mode, batch, |s| {
            let mut g = model_ref.net.zero_grads();
            let loss = accumulate_loss_grad(
                model_ref,
                &s.f0,
                s.level,
                &s.noise,
                s.mask.as_deref(),
                Some(&s.cond),
                inv_b,
                &mut g,
            );
            loss.map(|l| (l, g))
        });
        let mut grads = model.net.zero_grads();
        let mut loss = 0.0;
        for p in parts {
            let (l, g) = p?;
            loss += l * inv_b;
            grads.add(&g);
        }
        model.net.sgd_step(&grads, cfg.learning_rate);
        if !loss.is_finite() || !model.net.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        let init = *initial.get_or_insert(loss);
        if loss > cfg.divergence_factor * init {
            above += 1;
            if above >= cfg.divergence_patience {
                return Err(Error::TrainingDiverged { step, loss });
            }
        } else {
            above = 0;
        }
        curve.push(loss);
    }
    Ok((model, TrainingReport { loss_curve: curve }))
}

/// Largest relative gap between backpropagated and central-difference
/// gradients of [`dm_loss`] (first term only) at one probe.
///
/// The gap for each parameter is `|a − b| / max(|a|, |b|, 1e-6)`; the floor
/// keeps parameters with vanishing gradients from dominating.
pub fn gradient_check(model: &NetworkDenoiser, probe: &[f64], noise_level: f64, seed: u64) -> Result<f64> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..probe.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut grads = model.net.zero_grads();
    accumulate_loss_grad(model, probe, noise_level, &noise, None, None, 1.0, &mut grads)?;
    let analytic = grads.flatten();
    let mut probe_model = model.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        probe_model.net.nudge_param(i, H);
        let up = dm_loss(&probe_model, probe, noise_level, &noise, None, None)?;
        probe_model.net.nudge_param(i, -2.0 * H);
        let dn = dm_loss(&probe_model, probe, noise_level, &noise, None, None)?;
        probe_model.net.nudge_param(i, H);
        let fd = (up - dn) / (2.0 * H);
        let gap = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
        worst = worst.max(gap);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> NetworkDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkDenoiser::new(4, 8, ConditioningMode::None, 0, &mut rng).unwrap()
    }

    #[test]
    fn analytic_gaussian_scales_input() {
        let d = AnalyticDenoiser::new(SourceModel::UnitGaussian, ConditioningMode::None);
        let y = LatentVector::new(vec![1.0, -2.0]);
        let out = d.denoise(&y, 0.75, None).unwrap();
        assert_eq!(out.values(), &[0.5, -1.0]);
    }

    #[test]
    fn analytic_ignores_label_without_label_mode() {
        let src = SourceModel::symmetric_pair(0.9).unwrap();
        let y = LatentVector::new(vec![0.4, 0.2]);
        let plain = AnalyticDenoiser::new(src.clone(), ConditioningMode::None);
        let labeled = AnalyticDenoiser::new(src, ConditioningMode::Label);
        let c = ConditioningVector::label(1);
        assert_eq!(
            plain.denoise(&y, 0.5, Some(&c)).unwrap(),
            plain.denoise(&y, 0.5, None).unwrap()
        );
        assert_ne!(
            labeled.denoise(&y, 0.5, Some(&c)).unwrap(),
            plain.denoise(&y, 0.5, None).unwrap()
        );
    }

    #[test]
    fn rejects_wrong_width_and_level() {
        let m = small(1);
        assert!(matches!(
            m.denoise(&LatentVector::zeros(3), 0.5, None),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            m.denoise(&LatentVector::zeros(4), 1.5, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loss_mask_semantics() {
        let m = small(2);
        let f0 = [0.5, -0.5, 1.0, 0.0];
        let n = [0.1, 0.2, -0.3, 0.4];
        let base = dm_loss(&m, &f0, 0.3, &n, None, None).unwrap();
        let empty = dm_loss(&m, &f0, 0.3, &n, Some(&[false; 4]), None).unwrap();
        assert!((empty - 2.0 * base).abs() < 1e-12);
        let some = dm_loss(&m, &f0, 0.3, &n, Some(&[true, false, false, false]), None).unwrap();
        assert_ne!(some, empty);
    }

    #[test]
    fn masked_input_hides_values() {
        let m = small(3);
        let x = m
            .input(&[1.0, 2.0, 3.0, 4.0], 0.2, Some(&[false, true, false, true]), None)
            .unwrap();
        assert_eq!(x, vec![1.0, 0.0, 3.0, 0.0, 0.2, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn gradient_check_on_random_and_zero_networks() {
        let m = small(4);
        let gap = gradient_check(&m, &[0.3, -1.0, 0.8, 0.1], 0.4, 9).unwrap();
        assert!(gap < 1e-4, "{gap}");
        let z = NetworkDenoiser::zeroed(4, 8).unwrap();
        assert_eq!(gradient_check(&z, &[0.0; 4], 0.4, 9).unwrap(), 0.0);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = NetworkDenoiser::new(4, 6, ConditioningMode::Label, 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.model");
        m.save(&p).unwrap();
        let back = NetworkDenoiser::load(&p).unwrap();
        assert_eq!(back, m);
        let y = LatentVector::new(vec![0.1, 0.2, 0.3, 0.4]);
        let c = ConditioningVector::label(2);
        assert_eq!(
            back.denoise(&y, 0.3, Some(&c)).unwrap(),
            m.denoise(&y, 0.3, Some(&c)).unwrap()
        );
    }

    #[test]
    fn training_is_deterministic_across_modes() {
        let cfg = DenoiserTraining {
            steps: 20,
            batch_size: 8,
            hidden_width: 8,
            ..Default::default()
        };
        let s = NoiseSchedule::default();
        let (a, ra) = train_denoiser_with(
            &SourceModel::UnitGaussian,
            4,
            ConditioningMode::None,
            &s,
            &cfg,
            ExecutionMode::Sequential,
        )
        .unwrap();
        let (b, rb) = train_denoiser_with(
            &SourceModel::UnitGaussian,
            4,
            ConditioningMode::None,
            &s,
            &cfg,
            ExecutionMode::Parallel,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let cfg = DenoiserTraining {
            steps: 2000,
            batch_size: 4,
            hidden_width: 8,
            learning_rate: 1e6,
            divergence_patience: 5,
            ..Default::default()
        };
        let r = train_denoiser(
            &SourceModel::UnitGaussian,
            4,
            ConditioningMode::None,
            &NoiseSchedule::default(),
            &cfg,
        );
        assert!(matches!(r, Err(Error::TrainingDiverged { .. })));
    }
}
