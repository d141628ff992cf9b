use proptest::collection::vec as pvec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffjscc::channel::{equalize, transmit, ChannelRealization, EqualizedOutput};
use diffjscc::denoiser::{AnalyticDenoiser, ConditioningMode};
use diffjscc::engine::{
    denoise_fast_traced, denoise_slow, reverse_step, step_times, water_fill, SamplerConfig, StepRule,
};
use diffjscc::estimator::{rotate_latent, wrap_phase};
use diffjscc::latent_ops::{dropped_count, mask_tokens, MaskStrategy, TokenGrid};
use diffjscc::schedule::NoiseSchedule;
use diffjscc::signal::{power_normalize, to_complex, LatentVector};
use diffjscc::source::SourceModel;
use num_complex::Complex64;

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (0.5f64..6.0, -2.0f64..2.0, 0.3f64..1.5)
        .prop_filter_map("valid schedule", |(e, g, tau)| NoiseSchedule::new(e, g, tau).ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedule_is_increasing_and_invertible(s in schedule(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(s.noise_level(lo).unwrap() <= s.noise_level(hi).unwrap());
        let level = s.noise_level(hi).unwrap();
        if level > 1e-6 && level < 1.0 - 1e-6 {
            let t = s.invert_noise_level(level).unwrap();
            prop_assert!((s.noise_level(t).unwrap() - level).abs() < 1e-9);
        }
    }

    #[test]
    fn reverse_step_recovers_lower_level(
        f0 in pvec(-3.0f64..3.0, 1..32),
        seed in any::<u64>(),
        t in 0.01f64..0.99,
        frac in 0.0f64..0.999,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = f0.iter().map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let s = t * frac;
        let at = |b: f64| -> Vec<f64> { f0.iter().zip(&noise).map(|(f, n)| (1.0 - b).sqrt() * f + b.sqrt() * n).collect() };
        let got = reverse_step(&at(t), t, s, &f0).unwrap();
        for (g, w) in got.iter().zip(at(s)) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn step_times_descend_to_zero(start in 0.0f64..=1.0, steps in 1usize..100, unit in any::<bool>()) {
        let rule = if unit { StepRule::Unit } else { StepRule::Proportional };
        let ts = step_times(start, steps, rule);
        prop_assert_eq!(ts[0], start);
        prop_assert_eq!(*ts.last().unwrap(), 0.0);
        prop_assert!(ts.windows(2).all(|w| w[1] <= w[0]));
        if start > 0.0 {
            prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn water_fill_keeps_elements_at_target(
        state in pvec(-3.0f64..3.0, 1..32),
        target in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let tracked = vec![target; state.len()];
        let out = water_fill(&state, &tracked, target, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.values(), &state[..]);
        let above = vec![target + 1e-3; state.len()];
        prop_assert!(water_fill(&state, &above, target, &mut ChaCha8Rng::seed_from_u64(seed)).is_err());
    }

    #[test]
    fn fast_loop_levels_never_exceed_target(
        seed in any::<u64>(),
        rho in 1usize..9,
        sigma2 in 0.01f64..3.0,
        fill in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 32;
        let (f, _) = SourceModel::UnitGaussian.sample(n, &mut rng).unwrap();
        let f = power_normalize(&f).unwrap();
        let blocks = (n / 2).div_ceil(rho);
        let gains = (0..blocks).map(|_| diffjscc::channel::rayleigh_gain(&mut rng)).collect();
        let ch = ChannelRealization::fast(gains, rho, sigma2, n / 2).unwrap();
        let y = transmit(&to_complex(&f).unwrap(), &ch, &mut rng).unwrap();
        let eq = equalize(&y, &ch).unwrap();
        let model = AnalyticDenoiser::new(SourceModel::UnitGaussian, ConditioningMode::None);
        let (out, trace) = denoise_fast_traced(
            &eq, &model, &NoiseSchedule::default(), &SamplerConfig::default(), None, fill, &mut rng,
        ).unwrap();
        prop_assert!(out.iter().all(|v| v.is_finite()));
        for it in &trace.iterations {
            prop_assert!(it.tracked_before.iter().all(|&b| b <= it.level_t));
            prop_assert!(it.tracked_after.iter().all(|&b| b <= it.level_t));
            prop_assert!(it.level_s < it.level_t);
        }
    }

    #[test]
    fn slow_loop_is_deterministic_and_finite(values in pvec(-4.0f64..4.0, 2..32), d in 1e-6f64..0.999) {
        let eq = EqualizedOutput::uniform(LatentVector::new(values), d);
        let model = AnalyticDenoiser::new(SourceModel::UnitGaussian, ConditioningMode::None);
        let sched = NoiseSchedule::default();
        let a = denoise_slow(&eq, &model, &sched, &SamplerConfig::default(), None).unwrap();
        let b = denoise_slow(&eq, &model, &sched, &SamplerConfig::default(), None).unwrap();
        prop_assert_eq!(a.values(), b.values());
        prop_assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn equal_gain_fast_channel_equalizes_uniformly(re in -2.0f64..2.0, im in -2.0f64..2.0, sigma2 in 0.01f64..2.0, seed in any::<u64>()) {
        prop_assume!(re * re + im * im > 1e-3);
        let h = Complex64::new(re, im);
        let ch = ChannelRealization::fast(vec![h; 4], 4, sigma2, 16).unwrap();
        let z = to_complex(&vec![1.0; 32].into()).unwrap();
        let y = transmit(&z, &ch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let eq = equalize(&y, &ch).unwrap();
        let d = eq.uniform_noise_level().unwrap();
        let want = sigma2 / (h.norm_sqr() + sigma2);
        prop_assert!((d - want).abs() < 1e-12);
    }

    #[test]
    fn masking_drops_the_requested_count(
        tokens in 1usize..40,
        dim in 1usize..6,
        mr in 0.0f64..0.99,
        seed in any::<u64>(),
        l2 in any::<bool>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..tokens * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = TokenGrid::new(values, dim).unwrap();
        let strategy = if l2 { MaskStrategy::L2Norm } else { MaskStrategy::Random };
        let masked = mask_tokens(&grid, mr, strategy, &mut rng).unwrap();
        let dropped = masked.kept().iter().filter(|k| !**k).count();
        prop_assert_eq!(dropped, dropped_count(tokens, mr));
        if l2 {
            let max_dropped = (0..tokens).filter(|&i| !masked.kept()[i]).map(|i| grid.token_energy(i)).fold(f64::NEG_INFINITY, f64::max);
            let min_kept = (0..tokens).filter(|&i| masked.kept()[i]).map(|i| grid.token_energy(i)).fold(f64::INFINITY, f64::min);
            prop_assert!(max_dropped <= min_kept);
        }
    }

    #[test]
    fn rotation_composes(values in pvec(-3.0f64..3.0, 1..16), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut v = values.clone();
        v.extend(values.iter().rev());
        let v = LatentVector::new(v);
        let once = rotate_latent(&v, wrap_phase(a + b)).unwrap();
        let twice = rotate_latent(&rotate_latent(&v, a).unwrap(), b).unwrap();
        for (x, y) in once.iter().zip(twice.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!(wrap_phase(a) > -std::f64::consts::PI - 1e-15 && wrap_phase(a) <= std::f64::consts::PI);
    }
}
