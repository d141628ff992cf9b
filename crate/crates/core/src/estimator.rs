//! Pilot-free estimation of the signal level `α` and phase `φ` from a
//! normalized channel output `√α·R(e^{jφ}C(f)) + √(1−α)·n`.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::TrainingReport;
use crate::error::{Error, Result};
use crate::nn::{read_model, write_model, Activation, Mlp, ModelHeader, PooledNet};
use crate::par::{map_ordered, ExecutionMode};
use crate::signal::{l2_normalize, power_normalize, to_complex, to_real, LatentVector};
use crate::source::SourceModel;

/// Bounds applied to every `α̂`.
pub const ALPHA_FLOOR: f64 = 1e-9;
pub const ALPHA_CEIL: f64 = 1.0 - 1e-9;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Rotates the complex view of `v` by `e^{jθ}`.
pub fn rotate_latent(v: &LatentVector, theta: f64) -> Result<LatentVector> {
    Ok(to_real(&to_complex(v)?.rotate(theta)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsiEstimate {
    pub alpha: f64,
    pub phase: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTarget {
    Snr,
    Phase,
}

impl EstimatorTarget {
    fn label(self) -> &'static str {
        match self {
            EstimatorTarget::Snr => "snr",
            EstimatorTarget::Phase => "phase",
        }
    }
}

/// Closed-form estimators from the source's moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimator {
    /// Population fourth moment `κ_f` of the unit-power source.
    pub kurtosis: f64,
    /// Mean of the complex source symbols.
    pub complex_mean: f64,
}

impl MomentEstimator {
    pub fn for_source(source: &SourceModel) -> Self {
        MomentEstimator {
            kurtosis: source.fourth_moment(),
            complex_mean: source.complex_mean(),
        }
    }
}

/// Network on `(re, im)` symbol pairs, mean pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEstimator {
    pub target: EstimatorTarget,
    pub net: PooledNet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorModel {
    Moment(MomentEstimator),
    Trained(TrainedEstimator),
}

fn symbol_pairs(v: &LatentVector) -> Result<Vec<Vec<f64>>> {
    let (re, im) = v.halves()?;
    Ok(re.iter().zip(im).map(|(a, b)| vec![*a, *b]).collect())
}

fn clamp_alpha(a: f64) -> f64 {
    a.clamp(ALPHA_FLOOR, ALPHA_CEIL)
}

impl EstimatorModel {
    pub fn moment(source: &SourceModel) -> Self {
        EstimatorModel::Moment(MomentEstimator::for_source(source))
    }

    /// `α̂` from a phase-corrected, normalized observation.
    pub fn estimate_snr(&self, observed: &LatentVector) -> Result<f64> {
        if observed.is_empty() {
            return Err(Error::DegenerateInput("empty observation".into()));
        }
        match self {
            EstimatorModel::Moment(m) => {
                let excess = m.kurtosis - 3.0;
                if excess.abs() < 1e-12 {
                    return Err(Error::Identifiability(
                        "source has zero excess kurtosis; signal level is not identifiable".into(),
                    ));
                }
                let n = observed.len() as f64;
                let m2 = observed.iter().map(|x| x * x).sum::<f64>() / n;
                if !(m2 > 0.0) {
                    return Err(Error::DegenerateInput("all-zero observation".into()));
                }
                let m4 = observed.iter().map(|x| x.powi(4)).sum::<f64>() / n / (m2 * m2);
                Ok(clamp_alpha(((m4 - 3.0) / excess).max(0.0).sqrt()))
            }
            EstimatorModel::Trained(t) => {
                if t.target != EstimatorTarget::Snr {
                    return Err(Error::Domain("phase network used for signal level".into()));
                }
                let out = t.net.forward(&symbol_pairs(observed)?, &[]);
                Ok(clamp_alpha(out[0]))
            }
        }
    }

    /// `φ̂` given the signal level.
    pub fn estimate_phase(&self, observed: &LatentVector, alpha: f64) -> Result<f64> {
        match self {
            EstimatorModel::Moment(m) => {
                if m.complex_mean.abs() < 1e-12 {
                    return Err(Error::Identifiability(
                        "source has zero complex mean; phase is not identifiable".into(),
                    ));
                }
                let c = to_complex(observed)?;
                if c.is_empty() {
                    return Err(Error::DegenerateInput("empty observation".into()));
                }
                let mean = c.mean() * m.complex_mean.signum();
                Ok(wrap_phase(mean.im.atan2(mean.re)))
            }
            EstimatorModel::Trained(t) => {
                if t.target != EstimatorTarget::Phase {
                    return Err(Error::Domain("signal-level network used for phase".into()));
                }
                let out = t.net.forward(&symbol_pairs(observed)?, &[alpha]);
                Ok(wrap_phase(out[1].atan2(out[0])))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut h = ModelHeader::default();
        match self {
            EstimatorModel::Moment(m) => {
                h.set("role", "estimator");
                h.set("kind", "moment_based");
                h.set("kurtosis", format!("{:e}", m.kurtosis));
                h.set("complex_mean", format!("{:e}", m.complex_mean));
                write_model(path, &h, &[])
            }
            EstimatorModel::Trained(t) => {
                h.set("role", "estimator");
                h.set("kind", "trained_network");
                h.set("target", t.target.label());
                t.net.element.describe("element.", &mut h);
                t.net.head.describe("head.", &mut h);
                write_model(path, &h, &t.net.params())
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = read_model(path)?;
        if h.get("role")? != "estimator" {
            return Err(Error::ModelFormat(format!(
                "{} is not an estimator model",
                path.display()
            )));
        }
        match h.get("kind")? {
            "moment_based" => Ok(EstimatorModel::Moment(MomentEstimator {
                kurtosis: h.get_parsed("kurtosis")?,
                complex_mean: h.get_parsed("complex_mean")?,
            })),
            "trained_network" => {
                let target = match h.get("target")? {
                    "snr" => EstimatorTarget::Snr,
                    "phase" => EstimatorTarget::Phase,
                    other => return Err(Error::ModelFormat(format!("unknown target `{other}`"))),
                };
                let mut net = PooledNet {
                    element: Mlp::from_header("element.", &h)?,
                    head: Mlp::from_header("head.", &h)?,
                };
                net.set_params(&params)?;
                Ok(EstimatorModel::Trained(TrainedEstimator { target, net }))
            }
            other => Err(Error::ModelFormat(format!("unknown estimator kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointOptions {
    pub max_iters: usize,
    /// Applied to `|Δα|` and to `|Δφ|/π`.
    pub tol: f64,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            max_iters: 10,
            tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointEstimate {
    pub estimate: CsiEstimate,
    /// Observation with the total estimated phase removed.
    pub corrected: LatentVector,
    /// Residual phase found at each iteration.
    pub phase_steps: Vec<f64>,
}

/// Alternating phase removal and signal-level estimation, starting at `φ = 0`.
///
/// Every iteration removes the phase found so far, estimates `α`, then
/// estimates the remaining phase. It stops once the remaining phase is below
/// `tol·π` and `α` moved by less than `tol`.
pub fn joint_estimate(
    snr_model: &EstimatorModel,
    phase_model: &EstimatorModel,
    observed: &LatentVector,
    opts: &JointOptions,
) -> Result<JointEstimate> {
    if opts.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    let mut current = observed.clone();
    let mut total = 0.0;
    let mut applied = 0.0;
    let mut residual = 0.0;
    let mut prev_alpha: Option<f64> = None;
    let mut steps = Vec::new();
    let mut alpha = 0.0;
    let mut converged = false;
    for _ in 0..opts.max_iters {
        if residual != 0.0 {
            current = rotate_latent(&current, -residual)?;
            applied += residual;
        }
        alpha = snr_model.estimate_snr(&current)?;
        residual = phase_model.estimate_phase(&current, alpha)?;
        total = wrap_phase(total + residual);
        steps.push(residual);
        let alpha_settled = prev_alpha.is_none_or(|p| (alpha - p).abs() < opts.tol);
        prev_alpha = Some(alpha);
        if residual.abs() / PI < opts.tol && alpha_settled {
            converged = true;
            break;
        }
    }
    if residual != 0.0 {
        current = rotate_latent(&current, -residual)?;
        applied += residual;
    }
    if (wrap_phase(applied - total)).abs() > 1e-9 {
        return Err(Error::InvariantViolation(format!(
            "applied rotation {applied} disagrees with estimate {total}"
        )));
    }
    Ok(JointEstimate {
        estimate: CsiEstimate {
            alpha,
            phase: total,
            iterations: steps.len(),
            converged,
        },
        corrected: current,
        phase_steps: steps,
    })
}

/// Normalized observation of `f` at signal level `α` and phase `φ`.
pub fn observe<R: Rng + ?Sized>(f: &LatentVector, alpha: f64, phase: f64, rng: &mut R) -> Result<LatentVector> {
    let rotated = rotate_latent(f, phase)?;
    let a = alpha.sqrt();
    let b = (1.0 - alpha).sqrt();
    let raw: LatentVector = rotated
        .iter()
        .map(|x| a * x + b * rng.sample::<f64, _>(StandardNormal))
        .collect();
    l2_normalize(&raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub seed: u64,
    /// Training SNRs are drawn uniformly in dB from this range.
    pub snr_db_range: [f64; 2],
    pub latent_dim: usize,
}

impl Default for EstimatorTraining {
    fn default() -> Self {
        EstimatorTraining {
            steps: 3000,
            batch_size: 32,
            learning_rate: 0.05,
            hidden_width: 16,
            seed: 1,
            snr_db_range: [-5.0, 20.0],
            latent_dim: 256,
        }
    }
}

fn snr_db_to_alpha(db: f64) -> f64 {
    let g = 10f64.powf(db / 10.0);
    g / (1.0 + g)
}

fn fresh_net<R: Rng + ?Sized>(target: EstimatorTarget, width: usize, rng: &mut R) -> Result<PooledNet> {
    let element = Mlp::new(&[2, width, width], Activation::Tanh, Activation::Tanh, rng)?;
    let head = match target {
        EstimatorTarget::Snr => Mlp::new(&[width, width, 1], Activation::Tanh, Activation::Sigmoid, rng)?,
        EstimatorTarget::Phase => Mlp::new(&[width + 1, width, 2], Activation::Tanh, Activation::Identity, rng)?,
    };
    Ok(PooledNet { element, head })
}

struct Example {
    elements: Vec<Vec<f64>>,
    alpha: f64,
    phase: f64,
}

/// Trains a signal-level or phase network on synthetic observations of
/// `source`. The phase network is given the true `α` and regresses
/// `(cos φ, sin φ)`; signal-level examples carry no phase offset.
pub fn train_estimator(
    target: EstimatorTarget,
    source: &SourceModel,
    cfg: &EstimatorTraining,
) -> Result<(EstimatorModel, TrainingReport)> {
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) || cfg.hidden_width == 0 {
        return Err(Error::Config("batch_size and hidden_width must be positive".into()));
    }
    if cfg.latent_dim == 0 || !cfg.latent_dim.is_multiple_of(2) {
        return Err(Error::Config("latent_dim must be even and positive".into()));
    }
    let [lo, hi] = cfg.snr_db_range;
    if !(lo <= hi) {
        return Err(Error::Config("snr_db_range must be ordered".into()));
    }
    let mode = ExecutionMode::from_env();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = fresh_net(target, cfg.hidden_width, &mut rng)?;
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| -> Result<Example> {
                let (f, _) = source.sample(cfg.latent_dim, &mut rng)?;
                let f = power_normalize(&f)?;
                let alpha = snr_db_to_alpha(rng.random_range(lo..=hi));
                let phase = match target {
                    EstimatorTarget::Snr => 0.0,
                    EstimatorTarget::Phase => rng.random_range(-PI..PI),
                };
                let obs = observe(&f, alpha, phase, &mut rng)?;
                Ok(Example {
                    elements: symbol_pairs(&obs)?,
                    alpha,
                    phase,
                })
            })
            .collect::<Result<_>>()?;
        let net_ref = &net;
        let parts = map_ordered(mode, batch, |ex| {
            let mut g = net_ref.zero_grads();
            let loss = match target {
                EstimatorTarget::Snr => net_ref.accumulate(&ex.elements, &[], &mut g, |o| {
                    let e = o[0] - ex.alpha;
                    (e * e, vec![2.0 * e * inv_b])
                }),
                EstimatorTarget::Phase => {
                    let (c, s) = (ex.phase.cos(), ex.phase.sin());
                    net_ref.accumulate(&ex.elements, &[ex.alpha], &mut g, |o| {
                        let (ec, es) = (o[0] - c, o[1] - s);
                        (ec * ec + es * es, vec![2.0 * ec * inv_b, 2.0 * es * inv_b])
                    })
                }
            };
            (loss, g)
        });
        let mut grads = net.zero_grads();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l * inv_b;
            grads.add(&g);
        }
        net.sgd_step(&grads, cfg.learning_rate);
        if !loss.is_finite() || !net.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        curve.push(loss);
    }
    Ok((
        EstimatorModel::Trained(TrainedEstimator { target, net }),
        TrainingReport { loss_curve: curve },
    ))
}

/// Mean absolute error of `model` on fresh observations of `source`.
///
/// Signal-level errors use observations without phase offset; phase errors
/// use a uniform phase, the true `α`, and are wrapped.
pub fn held_out_error(
    model: &EstimatorModel,
    target: EstimatorTarget,
    source: &SourceModel,
    latent_dim: usize,
    alphas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for &alpha in alphas {
        for _ in 0..trials {
            let (f, _) = source.sample(latent_dim, &mut rng)?;
            let f = power_normalize(&f)?;
            let err = match target {
                EstimatorTarget::Snr => {
                    let obs = observe(&f, alpha, 0.0, &mut rng)?;
                    (model.estimate_snr(&obs)? - alpha).abs()
                }
                EstimatorTarget::Phase => {
                    let phase = rng.random_range(-PI..PI);
                    let obs = observe(&f, alpha, phase, &mut rng)?;
                    wrap_phase(model.estimate_phase(&obs, alpha)? - phase).abs()
                }
            };
            total += err;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Complex channel output to the normalized real observation the estimators
/// consume.
pub fn normalized_observation(y: &crate::signal::ComplexVector) -> Result<LatentVector> {
    l2_normalize(&to_real(y))
}

/// Ground-truth `(α, φ)` of a single-gain channel.
pub fn true_csi(gain: Complex64, noise_variance: f64) -> (f64, f64) {
    let p = gain.norm_sqr();
    (p / (p + noise_variance), gain.arg())
}
