//! Synthetic latent sources with closed-form posterior statistics.
//!
//! Every source has unit population second moment per dimension, so a draw
//! is directly compatible with the transmit power constraint. The observation
//! model used throughout is `y = √(1−β̄)·f + √β̄·n`, `n ~ N(0, I)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::LatentVector;

/// Component mean: one value for every dimension, or a full vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentMean {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ComponentMean {
    fn at(&self, i: usize) -> f64 {
        match self {
            ComponentMean::Scalar(m) => *m,
            ComponentMean::Vector(v) => v[i],
        }
    }

    fn scaled(&self, c: f64) -> ComponentMean {
        match self {
            ComponentMean::Scalar(m) => ComponentMean::Scalar(m * c),
            ComponentMean::Vector(v) => ComponentMean::Vector(v.iter().map(|m| m * c).collect()),
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        match self {
            ComponentMean::Vector(v) if v.len() != n => Err(Error::InvalidShape(format!(
                "component mean has {} dims, latent has {n}",
                v.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Average of `m_i^k` over dimensions.
    fn avg_pow(&self, k: i32) -> f64 {
        match self {
            ComponentMean::Scalar(m) => m.powi(k),
            ComponentMean::Vector(v) if v.is_empty() => 0.0,
            ComponentMean::Vector(v) => v.iter().map(|m| m.powi(k)).sum::<f64>() / v.len() as f64,
        }
    }

    fn avg_mixed(&self, variance: f64) -> f64 {
        // average of m⁴ + 6m²v + 3v²
        self.avg_pow(4) + 6.0 * variance * self.avg_pow(2) + 3.0 * variance * variance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: ComponentMean,
    pub variance: f64,
}

/// Distribution of the zero-mean fluctuations of the structured source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fluctuation {
    /// Equiprobable ±1. Strongly platykurtic, which is what makes the
    /// fourth-moment signal-level estimator precise.
    #[default]
    Rademacher,
    Gaussian,
}

/// Synthetic stand-in for the encoder's latent distribution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceModel {
    /// i.i.d. `N(0, 1)` entries.
    #[default]
    UnitGaussian,
    /// One component is drawn per vector and shared by all its entries.
    GaussianMixture { components: Vec<MixtureComponent> },
    /// Pairs `(a_i, b_i) = (f_i, f_{i+N/2})`:
    /// `a = μ_a + √(1−μ_a²)·s`, `b = r·s + √(1−r²)·u` with `s, u` i.i.d.
    /// zero-mean unit-variance fluctuations. Each entry has unit power, the
    /// complex symbol mean is `μ_a`, and `corr(a, b) = r`.
    Structured {
        mean_offset: f64,
        correlation: f64,
        #[serde(default)]
        fluctuation: Fluctuation,
    },
}

/// Side information steering the denoiser.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub label: Option<usize>,
    pub embedding: Option<Vec<f64>>,
}

impl ConditioningVector {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn label(label: usize) -> Self {
        ConditioningVector {
            label: Some(label),
            embedding: None,
        }
    }
}

const WEIGHT_TOL: f64 = 1e-12;

impl SourceModel {
    /// Builds a mixture and rescales means and variances so the population
    /// per-dimension second moment is exactly one.
    pub fn gaussian_mixture(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        if components.iter().any(|c| !(c.weight >= 0.0) || !(c.variance >= 0.0)) {
            return Err(Error::Domain("weights and variances must be non-negative".into()));
        }
        let lens: Vec<usize> = components
            .iter()
            .filter_map(|c| match &c.mean {
                ComponentMean::Vector(v) => Some(v.len()),
                ComponentMean::Scalar(_) => None,
            })
            .collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidShape("component mean vectors differ in length".into()));
        }
        let power: f64 = components
            .iter()
            .map(|c| c.weight * (c.mean.avg_pow(2) + c.variance))
            .sum();
        if !(power > 0.0) || !power.is_finite() {
            return Err(Error::DegenerateInput("mixture has zero second moment".into()));
        }
        let components = if power == 1.0 {
            components
        } else {
            let s = power.sqrt().recip();
            components
                .into_iter()
                .map(|c| MixtureComponent {
                    weight: c.weight,
                    mean: c.mean.scaled(s),
                    variance: c.variance / power,
                })
                .collect()
        };
        Ok(SourceModel::GaussianMixture { components })
    }

    /// Symmetric two-component mixture with means `±mean` and shared variance
    /// `1 − mean²`.
    pub fn symmetric_pair(mean: f64) -> Result<Self> {
        if !(mean.abs() <= 1.0) {
            return Err(Error::Domain(format!("|mean| = {} exceeds 1", mean.abs())));
        }
        let variance = 1.0 - mean * mean;
        Self::gaussian_mixture(vec![
            MixtureComponent {
                weight: 0.5,
                mean: ComponentMean::Scalar(mean),
                variance,
            },
            MixtureComponent {
                weight: 0.5,
                mean: ComponentMean::Scalar(-mean),
                variance,
            },
        ])
    }

    /// Point mass at `f0` (normalized to unit power). Its posterior mean is
    /// `f0` at every noise level, which makes it a perfect oracle denoiser.
    pub fn point_mass(f0: &LatentVector) -> Result<Self> {
        let f0 = crate::signal::power_normalize(f0)?;
        Self::gaussian_mixture(vec![MixtureComponent {
            weight: 1.0,
            mean: ComponentMean::Vector(f0.into_inner()),
            variance: 0.0,
        }])
    }

    pub fn structured(mean_offset: f64, correlation: f64, fluctuation: Fluctuation) -> Result<Self> {
        let model = SourceModel::Structured {
            mean_offset,
            correlation,
            fluctuation,
        };
        model.validate()?;
        Ok(model)
    }

    /// Re-checks the invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        match self {
            SourceModel::UnitGaussian => Ok(()),
            SourceModel::GaussianMixture { components } => {
                let rebuilt = Self::gaussian_mixture(components.clone())?;
                if let SourceModel::GaussianMixture { components: c2 } = &rebuilt {
                    let power: f64 = c2.iter().map(|c| c.weight * (c.mean.avg_pow(2) + c.variance)).sum();
                    if (power - 1.0).abs() > 1e-9 {
                        return Err(Error::Domain("mixture is not unit power".into()));
                    }
                }
                Ok(())
            }
            SourceModel::Structured {
                mean_offset,
                correlation,
                ..
            } => {
                if !(correlation.abs() < 1.0) {
                    return Err(Error::Domain(format!("|r| = {} must be < 1", correlation.abs())));
                }
                if !(mean_offset.abs() <= 1.0) {
                    return Err(Error::Domain(format!(
                        "|mean offset| = {} must be <= 1",
                        mean_offset.abs()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Mixture models are normalized on construction; deserialized configs go
    /// through this to get the same treatment.
    pub fn normalized(self) -> Result<Self> {
        match self {
            SourceModel::GaussianMixture { components } => Self::gaussian_mixture(components),
            other => {
                other.validate()?;
                Ok(other)
            }
        }
    }

    pub fn num_components(&self) -> usize {
        match self {
            SourceModel::GaussianMixture { components } => components.len(),
            _ => 1,
        }
    }

    /// Population fourth moment averaged over dimensions (`κ_f` for unit
    /// power sources).
    pub fn fourth_moment(&self) -> f64 {
        match self {
            SourceModel::UnitGaussian => 3.0,
            SourceModel::GaussianMixture { components } => {
                components.iter().map(|c| c.weight * c.mean.avg_mixed(c.variance)).sum()
            }
            SourceModel::Structured {
                mean_offset,
                correlation,
                fluctuation,
            } => {
                let mu = *mean_offset;
                let var_a = 1.0 - mu * mu;
                let r = *correlation;
                let q2 = 1.0 - r * r;
                match fluctuation {
                    Fluctuation::Rademacher => {
                        let first = mu.powi(4) + 6.0 * mu * mu * var_a + var_a * var_a;
                        let second = r.powi(4) + 6.0 * r * r * q2 + q2 * q2;
                        0.5 * (first + second)
                    }
                    Fluctuation::Gaussian => {
                        let first = mu.powi(4) + 6.0 * mu * mu * var_a + 3.0 * var_a * var_a;
                        0.5 * (first + 3.0)
                    }
                }
            }
        }
    }

    /// Mean of the complex symbols `f_i + j·f_{i+N/2}` (real for every kind
    /// here). Nonzero only for the structured source.
    pub fn complex_mean(&self) -> f64 {
        match self {
            SourceModel::Structured { mean_offset, .. } => *mean_offset,
            _ => 0.0,
        }
    }

    /// Draws one latent vector and its conditioning (the true component label
    /// for mixtures).
    pub fn sample<R: Rng + ?Sized>(&self, n_dims: usize, rng: &mut R) -> Result<(LatentVector, ConditioningVector)> {
        if !n_dims.is_multiple_of(2) {
            return Err(Error::InvalidShape(format!("n_dims = {n_dims} is odd")));
        }
        match self {
            SourceModel::UnitGaussian => {
                let v = (0..n_dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Ok((v, ConditioningVector::none()))
            }
            SourceModel::GaussianMixture { components } => {
                for c in components {
                    c.mean.check_len(n_dims)?;
                }
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = components.len() - 1;
                for (i, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let c = &components[k];
                let sd = c.variance.sqrt();
                let v = (0..n_dims)
                    .map(|i| c.mean.at(i) + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Ok((v, ConditioningVector::label(k)))
            }
            SourceModel::Structured {
                mean_offset,
                correlation,
                fluctuation,
            } => {
                let half = n_dims / 2;
                let sd_a = (1.0 - mean_offset * mean_offset).sqrt();
                let q = (1.0 - correlation * correlation).sqrt();
                let mut v = vec![0.0; n_dims];
                for i in 0..half {
                    let (s, u) = match fluctuation {
                        Fluctuation::Rademacher => (rademacher(rng), rademacher(rng)),
                        Fluctuation::Gaussian => (
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                        ),
                    };
                    v[i] = mean_offset + sd_a * s;
                    v[i + half] = correlation * s + q * u;
                }
                Ok((v.into(), ConditioningVector::none()))
            }
        }
    }

    /// Exact Bayes posterior mean `E[f | y]` under
    /// `y = √(1−β̄)·f + √β̄·n`.
    ///
    /// A label in `cond` restricts a mixture to that component.
    pub fn posterior_mean(
        &self,
        noisy: &LatentVector,
        noise_level: f64,
        cond: Option<&ConditioningVector>,
    ) -> Result<LatentVector> {
        if !(noise_level > 0.0 && noise_level < 1.0) {
            return Err(Error::Domain(format!("noise level {noise_level} not in (0,1)")));
        }
        let a = (1.0 - noise_level).sqrt();
        match self {
            SourceModel::UnitGaussian => Ok(noisy.iter().map(|y| a * y).collect()),
            SourceModel::GaussianMixture { components } => {
                for c in components {
                    c.mean.check_len(noisy.len())?;
                }
                let label = cond.and_then(|c| c.label);
                if let Some(k) = label {
                    if k >= components.len() {
                        return Err(Error::Domain(format!(
                            "label {k} out of range for {} components",
                            components.len()
                        )));
                    }
                    return Ok(component_posterior(&components[k], noisy, a, noise_level));
                }
                let log_w: Vec<f64> = components
                    .iter()
                    .map(|c| {
                        if c.weight == 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        let var = a * a * c.variance + noise_level;
                        let ll: f64 = noisy
                            .iter()
                            .enumerate()
                            .map(|(i, y)| {
                                let r = y - a * c.mean.at(i);
                                -0.5 * r * r / var
                            })
                            .sum();
                        c.weight.ln() + ll - 0.5 * noisy.len() as f64 * var.ln()
                    })
                    .collect();
                let mut resp = log_w;
                softmax_in_place(&mut resp);
                let mut out = vec![0.0; noisy.len()];
                for (c, r) in components.iter().zip(resp) {
                    if r == 0.0 {
                        continue;
                    }
                    let pm = component_posterior(c, noisy, a, noise_level);
                    for (o, p) in out.iter_mut().zip(pm.iter()) {
                        *o += r * p;
                    }
                }
                Ok(out.into())
            }
            SourceModel::Structured {
                mean_offset,
                correlation,
                fluctuation,
            } => {
                let (ya, yb) = noisy.halves()?;
                let half = ya.len();
                let mut out = vec![0.0; noisy.len()];
                match fluctuation {
                    Fluctuation::Rademacher => {
                        let sd_a = (1.0 - mean_offset * mean_offset).sqrt();
                        let q = (1.0 - correlation * correlation).sqrt();
                        let mut atoms = [(0.0, 0.0); 4];
                        let mut k = 0;
                        for s in [-1.0, 1.0] {
                            for u in [-1.0, 1.0] {
                                atoms[k] = (mean_offset + sd_a * s, correlation * s + q * u);
                                k += 1;
                            }
                        }
                        let inv = 0.5 / noise_level;
                        for i in 0..half {
                            let mut w: [f64; 4] = std::array::from_fn(|k| {
                                let (fa, fb) = atoms[k];
                                let ra = ya[i] - a * fa;
                                let rb = yb[i] - a * fb;
                                -(ra * ra + rb * rb) * inv
                            });
                            softmax_in_place(&mut w);
                            out[i] = (0..4).map(|k| w[k] * atoms[k].0).sum();
                            out[i + half] = (0..4).map(|k| w[k] * atoms[k].1).sum();
                        }
                    }
                    Fluctuation::Gaussian => {
                        // prior mean (μ_a, 0), covariance [[1−μ_a², σ_a r], [σ_a r, 1]]
                        let saa = 1.0 - mean_offset * mean_offset;
                        let sab = saa.sqrt() * correlation;
                        let sbb = 1.0;
                        // K = aΣ (a²Σ + β̄I)⁻¹
                        let (p, qm, s) = (a * a * saa + noise_level, a * a * sab, a * a * sbb + noise_level);
                        let det = p * s - qm * qm;
                        let (i11, i12, i22) = (s / det, -qm / det, p / det);
                        let k11 = a * (saa * i11 + sab * i12);
                        let k12 = a * (saa * i12 + sab * i22);
                        let k21 = a * (sab * i11 + sbb * i12);
                        let k22 = a * (sab * i12 + sbb * i22);
                        for i in 0..half {
                            let ra = ya[i] - a * mean_offset;
                            let rb = yb[i];
                            out[i] = mean_offset + k11 * ra + k12 * rb;
                            out[i + half] = k21 * ra + k22 * rb;
                        }
                    }
                }
                Ok(out.into())
            }
        }
    }
}

fn component_posterior(c: &MixtureComponent, noisy: &[f64], a: f64, noise_level: f64) -> LatentVector {
    let gain = a * c.variance / (a * a * c.variance + noise_level);
    noisy
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let m = c.mean.at(i);
            m + gain * (y - a * m)
        })
        .collect()
}

fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Normalized exponentials of log-weights, in place.
fn softmax_in_place(w: &mut [f64]) {
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in w.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in w.iter_mut() {
        *x /= total;
    }
}
