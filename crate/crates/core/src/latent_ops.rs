//! Token masking over latent grids, and the metric kit.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::EqualizedOutput;
use crate::error::{Error, Result};
use crate::estimator::{wrap_phase, CsiEstimate};
use crate::schedule::LEVEL_CEIL;
use crate::signal::LatentVector;

/// Clamp applied inside the logarithms of the BCE term.
pub const BCE_LOG_FLOOR: f64 = 1e-12;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    L2Norm,
}

/// Latent reshaped row-major into `num_tokens × embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    tokens: Vec<f64>,
    embed_dim: usize,
    kept: Vec<bool>,
}

impl TokenGrid {
    pub fn new(tokens: Vec<f64>, embed_dim: usize) -> Result<Self> {
        if embed_dim == 0 || !tokens.len().is_multiple_of(embed_dim) {
            return Err(Error::InvalidShape(format!(
                "{} values do not split into tokens of width {embed_dim}",
                tokens.len()
            )));
        }
        let n = tokens.len() / embed_dim;
        Ok(TokenGrid {
            tokens,
            embed_dim,
            kept: vec![true; n],
        })
    }

    pub fn from_latent(v: &LatentVector, embed_dim: usize) -> Result<Self> {
        Self::new(v.values().to_vec(), embed_dim)
    }

    pub fn num_tokens(&self) -> usize {
        self.kept.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn token_energy(&self, i: usize) -> f64 {
        self.token(i).iter().map(|x| x * x).sum()
    }

    pub fn kept_energy(&self) -> f64 {
        (0..self.num_tokens())
            .filter(|&i| self.kept[i])
            .map(|i| self.token_energy(i))
            .sum()
    }

    pub fn mask_ratio(&self) -> f64 {
        let dropped = self.kept.iter().filter(|k| !**k).count();
        dropped as f64 / self.num_tokens().max(1) as f64
    }

    /// Per-element flag, true where the element belongs to a dropped token.
    pub fn element_mask(&self) -> Vec<bool> {
        self.kept
            .iter()
            .flat_map(|&k| std::iter::repeat_n(!k, self.embed_dim))
            .collect()
    }
}

/// Number of tokens dropped at ratio `mr`.
pub fn dropped_count(num_tokens: usize, mr: f64) -> usize {
    // The small offset keeps products like 0.29·100 from rounding down a step.
    ((mr * num_tokens as f64) + 1e-9).floor() as usize
}

pub fn mask_tokens<R: Rng + ?Sized>(
    grid: &TokenGrid,
    mr: f64,
    strategy: MaskStrategy,
    rng: &mut R,
) -> Result<TokenGrid> {
    if !(0.0..1.0).contains(&mr) {
        return Err(Error::Domain(format!("mask ratio {mr} not in [0, 1)")));
    }
    let n = grid.num_tokens();
    let drop = dropped_count(n, mr);
    let mut kept = vec![true; n];
    match strategy {
        MaskStrategy::Random => {
            for i in sample_indices(rng, n, drop) {
                kept[i] = false;
            }
        }
        MaskStrategy::L2Norm => {
            let mut order: Vec<(f64, usize)> = (0..n).map(|i| (grid.token_energy(i), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in order.iter().take(drop) {
                kept[i] = false;
            }
        }
    }
    Ok(TokenGrid {
        tokens: grid.tokens.clone(),
        embed_dim: grid.embed_dim,
        kept,
    })
}

/// Treats dropped positions as never received: fresh `N(0, 1)` values at the
/// ceiling noise level.
pub fn apply_mask<R: Rng + ?Sized>(
    eq: &EqualizedOutput,
    element_mask: &[bool],
    rng: &mut R,
) -> Result<EqualizedOutput> {
    if element_mask.len() != eq.values.len() {
        return Err(Error::InvalidShape("mask length differs from latent".into()));
    }
    let mut out = eq.clone();
    for (i, &hid) in element_mask.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        if hid {
            out.values[i] = z;
            out.noise_levels[i] = LEVEL_CEIL;
        }
    }
    if element_mask.iter().any(|&m| m) {
        out.signal_level = None;
    }
    Ok(out)
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidShape(format!(
            "lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(peak²/mse)`; `+∞` when the inputs coincide.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Mean BCE plus `weight ×` Dice loss.
pub fn bce_dice_loss(pred: &[f64], target: &[f64], weight: f64, smooth: f64) -> Result<f64> {
    same_len(pred, target)?;
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Domain("predictions must lie in [0, 1]".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let bce = pred
        .iter()
        .zip(target)
        .map(|(p, t)| -(t * p.max(BCE_LOG_FLOOR).ln() + (1.0 - t) * (1.0 - p).max(BCE_LOG_FLOOR).ln()))
        .sum::<f64>()
        / pred.len() as f64;
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    let dice = 1.0 - (2.0 * inter + smooth) / (total + smooth);
    Ok(bce + weight * dice)
}

/// Mean `|Δα|` and mean wrapped `|Δφ|` against `(α, φ)` truths.
pub fn estimation_errors(estimates: &[CsiEstimate], truths: &[(f64, f64)]) -> Result<(f64, f64)> {
    if estimates.len() != truths.len() {
        return Err(Error::InvalidShape("estimate and truth counts differ".into()));
    }
    if estimates.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = estimates.len() as f64;
    let (mut da, mut dp) = (0.0, 0.0);
    for (e, (a, p)) in estimates.iter().zip(truths) {
        da += (e.alpha - a).abs();
        dp += wrap_phase(e.phase - p).abs();
    }
    Ok((da / n, dp / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn est(alpha: f64, phase: f64) -> CsiEstimate {
        CsiEstimate {
            alpha,
            phase,
            iterations: 1,
            converged: true,
        }
    }

    #[test]
    fn zero_ratio_keeps_all() {
        let g = TokenGrid::new((0..32).map(f64::from).collect(), 4).unwrap();
        let m = mask_tokens(&g, 0.0, MaskStrategy::Random, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(m.kept().iter().all(|&k| k));
    }

    #[test]
    fn half_of_256_tokens() {
        let g = TokenGrid::new(vec![1.0; 256 * 2], 2).unwrap();
        let m = mask_tokens(&g, 0.5, MaskStrategy::Random, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(m.kept().iter().filter(|&&k| k).count(), 128);
        assert_eq!(m.mask_ratio(), 0.5);
    }

    #[test]
    fn smallest_norm_token_dropped() {
        let g = TokenGrid::new(vec![3.0, 1.0, 2.0], 1).unwrap();
        let m = mask_tokens(&g, 1.0 / 3.0, MaskStrategy::L2Norm, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m.kept(), &[true, false, true]);
    }

    #[test]
    fn norm_ties_break_by_index() {
        let g = TokenGrid::new(vec![1.0, -1.0, 1.0, 5.0], 1).unwrap();
        let m = mask_tokens(&g, 0.5, MaskStrategy::L2Norm, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(m.kept(), &[false, false, true, true]);
    }

    #[test]
    fn full_ratio_rejected() {
        let g = TokenGrid::new(vec![1.0; 4], 1).unwrap();
        assert!(mask_tokens(&g, 1.0, MaskStrategy::Random, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn element_mask_expands_tokens() {
        let g = TokenGrid::new(vec![0.0, 0.0, 5.0, 5.0], 2).unwrap();
        let m = mask_tokens(&g, 0.5, MaskStrategy::L2Norm, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(m.element_mask(), vec![true, true, false, false]);
    }

    #[test]
    fn apply_mask_regenerates_dropped_positions() {
        let eq = EqualizedOutput::uniform(LatentVector::new(vec![0.5; 4]), 0.1);
        let out = apply_mask(&eq, &[false, true, false, true], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(out.values[0], 0.5);
        assert_ne!(out.values[1], 0.5);
        assert_eq!(out.noise_levels[1], LEVEL_CEIL);
        assert_eq!(out.noise_levels[2], eq.noise_levels[2]);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(
            mse(&[0.3, -2.0], &[1.0, 4.0]).unwrap(),
            mse(&[1.0, 4.0], &[0.3, -2.0]).unwrap()
        );
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&[1.0], &[1.0], 1.0).unwrap(), f64::INFINITY);
        let drop = psnr_from_mse(0.01, 1.0) - psnr_from_mse(0.02, 1.0);
        assert!((drop - 3.0103).abs() < 1e-4);
    }

    #[test]
    fn bce_dice_examples() {
        let t = [1.0, 0.0, 1.0, 0.0];
        let perfect = bce_dice_loss(&t, &t, 1.0, DICE_SMOOTH).unwrap();
        assert!(perfect.abs() < 1e-9);
        let half = bce_dice_loss(&[0.5; 4], &t, 0.0, DICE_SMOOTH).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let empty = bce_dice_loss(&[0.0; 4], &[0.0; 4], 1.0, DICE_SMOOTH).unwrap();
        assert!(empty.abs() < 1e-9);
        assert!(bce_dice_loss(&[1.2], &[1.0], 1.0, DICE_SMOOTH).is_err());
    }

    #[test]
    fn estimation_error_examples() {
        assert_eq!(estimation_errors(&[est(0.5, 0.2)], &[(0.5, 0.2)]).unwrap(), (0.0, 0.0));
        let (da, _) = estimation_errors(&[est(0.6, 0.0)], &[(0.5, 0.0)]).unwrap();
        assert!((da - 0.1).abs() < 1e-12);
        let (_, dp) = estimation_errors(&[est(0.5, PI - 0.01)], &[(0.5, -PI + 0.01)]).unwrap();
        assert!((dp - 0.02).abs() < 1e-12);
        assert!(estimation_errors(&[], &[(0.0, 0.0)]).is_err());
    }

    use std::f64::consts::PI;
}
