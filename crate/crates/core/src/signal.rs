//! Real latent vectors, their complex counterparts, and power normalization.

use std::ops::{Deref, DerefMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real-valued latent feature sequence.
///
/// The real/complex mappings require an even length; that is checked where
/// the mapping happens rather than at construction, so scalar probes can still
/// be wrapped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Self {
        LatentVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        LatentVector(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `(1/N)·Σ v_i²`.
    pub fn mean_power(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|v| v * v).sum::<f64>() / self.0.len() as f64
    }

    /// Half-length split `(first, second)` used by the complex mapping.
    pub fn halves(&self) -> Result<(&[f64], &[f64])> {
        if !self.0.len().is_multiple_of(2) {
            return Err(Error::InvalidShape(format!("latent length {} is odd", self.0.len())));
        }
        Ok(self.0.split_at(self.0.len() / 2))
    }
}

impl Deref for LatentVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for LatentVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for LatentVector {
    fn from(v: Vec<f64>) -> Self {
        LatentVector(v)
    }
}

impl FromIterator<f64> for LatentVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        LatentVector(iter.into_iter().collect())
    }
}

/// Complex symbol sequence stored as split real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexVector {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexVector {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::InvalidShape(format!(
                "real part has {} entries, imaginary part {}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexVector { re, im })
    }

    pub fn zeros(len: usize) -> Self {
        ComplexVector {
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    pub fn from_symbols(symbols: &[Complex64]) -> Self {
        ComplexVector {
            re: symbols.iter().map(|c| c.re).collect(),
            im: symbols.iter().map(|c| c.im).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn get(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, i: usize, value: Complex64) {
        self.re[i] = value.re;
        self.im[i] = value.im;
    }

    pub fn iter(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.re.iter().zip(&self.im).map(|(&re, &im)| Complex64::new(re, im))
    }

    /// Multiplies every symbol by `e^{jθ}`.
    pub fn rotate(&self, theta: f64) -> ComplexVector {
        let w = Complex64::from_polar(1.0, theta);
        let symbols: Vec<Complex64> = self.iter().map(|z| z * w).collect();
        ComplexVector::from_symbols(&symbols)
    }

    /// Arithmetic mean of the symbols.
    pub fn mean(&self) -> Complex64 {
        if self.is_empty() {
            return Complex64::new(0.0, 0.0);
        }
        let n = self.len() as f64;
        Complex64::new(self.re.iter().sum::<f64>() / n, self.im.iter().sum::<f64>() / n)
    }
}

/// `[C(v)]_i = v_i + j·v_{i+L}` for a length-`2L` real vector.
pub fn to_complex(v: &LatentVector) -> Result<ComplexVector> {
    let (first, second) = v.halves()?;
    Ok(ComplexVector {
        re: first.to_vec(),
        im: second.to_vec(),
    })
}

/// `[R(c)]_i = Re c_i`, `[R(c)]_{i+L} = Im c_i`; exact inverse of [`to_complex`].
pub fn to_real(c: &ComplexVector) -> LatentVector {
    let mut out = Vec::with_capacity(2 * c.len());
    out.extend_from_slice(&c.re);
    out.extend_from_slice(&c.im);
    LatentVector(out)
}

fn scale_to_unit_power(v: &LatentVector) -> Result<LatentVector> {
    let energy: f64 = v.iter().map(|x| x * x).sum();
    if v.is_empty() || energy == 0.0 {
        return Err(Error::DegenerateInput("vector has zero energy".into()));
    }
    if !energy.is_finite() {
        return Err(Error::DegenerateInput("vector energy is not finite".into()));
    }
    let scale = (v.len() as f64 / energy).sqrt();
    Ok(v.iter().map(|x| x * scale).collect())
}

/// Rescales so that `(1/N)·Σ v_i² = 1`.
pub fn power_normalize(v: &LatentVector) -> Result<LatentVector> {
    scale_to_unit_power(v)
}

/// Normalizes a received vector by its L2 norm to unit per-dimension power.
///
/// Same arithmetic as [`power_normalize`]; it is applied to noisy receiver
/// output, where signal level `α` and noise level `1−α` then sum to one.
pub fn l2_normalize(v: &LatentVector) -> Result<LatentVector> {
    scale_to_unit_power(v)
}
