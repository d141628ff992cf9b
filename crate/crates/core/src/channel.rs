//! AWGN, slow Rayleigh and block (fast) Rayleigh fading channels.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{LEVEL_CEIL, LEVEL_FLOOR};
use crate::signal::{to_real, ComplexVector, LatentVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    SlowFading,
    FastFading,
}

impl ChannelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::SlowFading => "slow_fading",
            ChannelKind::FastFading => "fast_fading",
        }
    }
}

/// Clamps an effective noise level into `[1e-9, 1 − 1e-9]`.
pub fn clamp_noise_level(d: f64) -> f64 {
    d.clamp(LEVEL_FLOOR, LEVEL_CEIL)
}

/// `σ²` per real dimension for a nominal SNR in dB with unit-power symbols
/// and `|h|² = 1`.
pub fn noise_variance_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// One channel use: gains, noise variance and block structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    kind: ChannelKind,
    block_gains: Vec<Complex64>,
    noise_variance: f64,
    block_length: usize,
    num_symbols: usize,
}

impl ChannelRealization {
    pub fn awgn(noise_variance: f64, num_symbols: usize) -> Result<Self> {
        Self::build(
            ChannelKind::Awgn,
            vec![Complex64::new(1.0, 0.0)],
            noise_variance,
            num_symbols.max(1),
            num_symbols,
        )
    }

    pub fn slow(gain: Complex64, noise_variance: f64, num_symbols: usize) -> Result<Self> {
        Self::build(
            ChannelKind::SlowFading,
            vec![gain],
            noise_variance,
            num_symbols.max(1),
            num_symbols,
        )
    }

    /// Block fading with one gain per `block_length` symbols. The last block
    /// is shorter when `block_length` does not divide `num_symbols`.
    pub fn fast(
        block_gains: Vec<Complex64>,
        block_length: usize,
        noise_variance: f64,
        num_symbols: usize,
    ) -> Result<Self> {
        if block_length == 0 {
            return Err(Error::Domain("block length must be at least 1".into()));
        }
        let blocks = num_symbols.div_ceil(block_length);
        if block_gains.len() != blocks {
            return Err(Error::InvalidShape(format!(
                "{} block gains for {blocks} blocks",
                block_gains.len()
            )));
        }
        Self::build(
            ChannelKind::FastFading,
            block_gains,
            noise_variance,
            block_length,
            num_symbols,
        )
    }

    fn build(
        kind: ChannelKind,
        block_gains: Vec<Complex64>,
        noise_variance: f64,
        block_length: usize,
        num_symbols: usize,
    ) -> Result<Self> {
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::Domain(format!("noise variance {noise_variance} must be >= 0")));
        }
        Ok(ChannelRealization {
            kind,
            block_gains,
            noise_variance,
            block_length,
            num_symbols,
        })
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn block_length(&self) -> usize {
        self.block_length
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn block_gains(&self) -> &[Complex64] {
        &self.block_gains
    }

    /// Gain applied to symbol `i`.
    pub fn gain(&self, i: usize) -> Complex64 {
        match self.kind {
            ChannelKind::FastFading => self.block_gains[i / self.block_length],
            _ => self.block_gains[0],
        }
    }

    pub fn expanded_gains(&self) -> Vec<Complex64> {
        (0..self.num_symbols).map(|i| self.gain(i)).collect()
    }

    /// `|h|²/σ²` for single-gain channels.
    pub fn snr_linear(&self) -> Option<f64> {
        match self.kind {
            ChannelKind::FastFading => None,
            _ => Some(self.block_gains[0].norm_sqr() / self.noise_variance),
        }
    }
}

/// Circularly symmetric `CN(0, 1)` draw.
pub fn rayleigh_gain<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex64::new(
        s * rng.sample::<f64, _>(StandardNormal),
        s * rng.sample::<f64, _>(StandardNormal),
    )
}

pub fn draw_channel<R: Rng + ?Sized>(
    kind: ChannelKind,
    snr_db: f64,
    num_symbols: usize,
    block_length: usize,
    rng: &mut R,
) -> Result<ChannelRealization> {
    if block_length < 1 {
        return Err(Error::Domain("block length must be at least 1".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Domain(format!("snr {snr_db} dB is not finite")));
    }
    let sigma2 = noise_variance_from_snr_db(snr_db);
    match kind {
        ChannelKind::Awgn => ChannelRealization::awgn(sigma2, num_symbols),
        ChannelKind::SlowFading => ChannelRealization::slow(rayleigh_gain(rng), sigma2, num_symbols),
        ChannelKind::FastFading => {
            let blocks = num_symbols.div_ceil(block_length);
            let gains = (0..blocks).map(|_| rayleigh_gain(rng)).collect();
            ChannelRealization::fast(gains, block_length, sigma2, num_symbols)
        }
    }
}

/// `y_i = h_i·z_i + n_i` with `σ²` noise variance per real dimension.
pub fn transmit<R: Rng + ?Sized>(z: &ComplexVector, ch: &ChannelRealization, rng: &mut R) -> Result<ComplexVector> {
    if z.len() != ch.num_symbols {
        return Err(Error::InvalidShape(format!(
            "{} symbols sent over a channel of length {}",
            z.len(),
            ch.num_symbols
        )));
    }
    let sd = ch.noise_variance.sqrt();
    let out: Vec<Complex64> = z
        .iter()
        .enumerate()
        .map(|(i, zi)| {
            let n = Complex64::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            ch.gain(i) * zi + n * sd
        })
        .collect();
    Ok(ComplexVector::from_symbols(&out))
}

/// Receiver output in the form `√(1−d_i)·f_i + √d_i·n_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizedOutput {
    pub values: LatentVector,
    /// One level per real element; entries `i` and `i + N/2` coincide.
    pub noise_levels: Vec<f64>,
    /// `α = |h|²/(|h|²+σ²)` when a single gain applies.
    pub signal_level: Option<f64>,
}

impl EqualizedOutput {
    pub fn uniform(values: LatentVector, noise_level: f64) -> Self {
        let d = clamp_noise_level(noise_level);
        let n = values.len();
        EqualizedOutput {
            values,
            noise_levels: vec![d; n],
            signal_level: Some(1.0 - d),
        }
    }

    pub fn max_noise_level(&self) -> f64 {
        self.noise_levels.iter().cloned().fold(0.0, f64::max)
    }

    /// The shared level if every element has the same one.
    pub fn uniform_noise_level(&self) -> Option<f64> {
        let first = *self.noise_levels.first()?;
        self.noise_levels.iter().all(|&d| d == first).then_some(first)
    }
}

/// Per-symbol phase removal and power normalization:
/// `(h*/|h|)·y / √(|h|²+σ²)`, plus the effective noise level.
fn equalize_symbol(y: Complex64, h: Complex64, sigma2: f64) -> (Complex64, f64) {
    let mag2 = h.norm_sqr();
    let mag = mag2.sqrt();
    let derotate = if mag > 0.0 {
        h.conj() / mag
    } else {
        Complex64::new(1.0, 0.0)
    };
    let total = mag2 + sigma2;
    (derotate * y / total.sqrt(), clamp_noise_level(sigma2 / total))
}

pub fn equalize_slow(y: &ComplexVector, h: Complex64, noise_variance: f64) -> Result<EqualizedOutput> {
    let mag2 = h.norm_sqr();
    if mag2 + noise_variance <= 0.0 {
        return Err(Error::DegenerateChannel("zero gain with zero noise".into()));
    }
    let mut d = 0.0;
    let symbols: Vec<Complex64> = y
        .iter()
        .map(|yi| {
            let (v, level) = equalize_symbol(yi, h, noise_variance);
            d = level;
            v
        })
        .collect();
    if y.is_empty() {
        d = clamp_noise_level(noise_variance / (mag2 + noise_variance));
    }
    let values = to_real(&ComplexVector::from_symbols(&symbols));
    Ok(EqualizedOutput {
        noise_levels: vec![d; values.len()],
        values,
        signal_level: Some(mag2 / (mag2 + noise_variance)),
    })
}

/// Per-symbol equalization with perfect CSI.
pub fn equalize_fast(y: &ComplexVector, ch: &ChannelRealization) -> Result<EqualizedOutput> {
    if y.len() != ch.num_symbols {
        return Err(Error::InvalidShape(format!(
            "{} received symbols for a channel of length {}",
            y.len(),
            ch.num_symbols
        )));
    }
    let sigma2 = ch.noise_variance;
    if sigma2 == 0.0 && ch.block_gains.iter().any(|h| h.norm_sqr() == 0.0) {
        return Err(Error::DegenerateChannel("zero gain with zero noise".into()));
    }
    let m = y.len();
    let mut levels = vec![0.0; 2 * m];
    let symbols: Vec<Complex64> = y
        .iter()
        .enumerate()
        .map(|(i, yi)| {
            let (v, d) = equalize_symbol(yi, ch.gain(i), sigma2);
            levels[i] = d;
            levels[i + m] = d;
            v
        })
        .collect();
    Ok(EqualizedOutput {
        values: to_real(&ComplexVector::from_symbols(&symbols)),
        noise_levels: levels,
        signal_level: None,
    })
}

/// Picks the equalizer matching the channel kind.
pub fn equalize(y: &ComplexVector, ch: &ChannelRealization) -> Result<EqualizedOutput> {
    match ch.kind {
        ChannelKind::FastFading => equalize_fast(y, ch),
        _ => equalize_slow(y, ch.block_gains[0], ch.noise_variance),
    }
}
