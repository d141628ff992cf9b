use diffjscc::harness::{run_grid, strip_wall_time, Cell, Experiment, ExperimentConfig, Scheme, TrialStatus};
use diffjscc::par::ExecutionMode;

fn experiment(text: &str) -> Experiment {
    Experiment::new(ExperimentConfig::from_toml(text).unwrap()).unwrap()
}

fn cell(snr_db: f64) -> Cell {
    Cell {
        snr_index: 0,
        snr_db,
        rho_index: 0,
        rho: 1,
    }
}

#[test]
fn noiseless_chain_is_near_perfect() {
    let exp = experiment("trials = 1\nlatent_dim = 64\n[channel]\nsnr_db = [200.0]\n");
    let r = exp.run_pipeline(Scheme::Diffusion, &cell(200.0), 0);
    assert_eq!(r.status, TrialStatus::Ok);
    assert!(r.psnr_db.unwrap() >= 100.0, "{:?}", r.psnr_db);
}

#[test]
fn same_trial_twice_is_identical() {
    let exp = experiment("latent_dim = 32\n[channel]\nkind = \"fast_fading\"\nsnr_db = [3.0]\nblock_lengths = [2]\n");
    let c = Cell { rho: 2, ..cell(3.0) };
    let mut a = exp.run_pipeline(Scheme::Diffusion, &c, 5);
    let mut b = exp.run_pipeline(Scheme::Diffusion, &c, 5);
    a.wall_time = 0.0;
    b.wall_time = 0.0;
    assert_eq!(a, b);
}

#[test]
fn unit_slow_fading_matches_awgn() {
    let awgn = experiment("latent_dim = 32\n[channel]\nsnr_db = [5.0]\n");
    let slow =
        experiment("latent_dim = 32\n[channel]\nkind = \"slow_fading\"\nsnr_db = [5.0]\nfixed_gain = [1.0, 0.0]\n");
    for t in 0..5 {
        let a = awgn.run_pipeline(Scheme::Diffusion, &cell(5.0), t);
        let b = slow.run_pipeline(Scheme::Diffusion, &cell(5.0), t);
        assert_eq!(a.mse, b.mse);
    }
}

#[test]
fn diffusion_improves_on_equalized_output() {
    let exp = experiment(
        "trials = 200\nlatent_dim = 64\n[channel]\nsnr_db = [0.0]\n[pipeline]\nschemes = [\"diffusion\", \"equalized\"]\n",
    );
    let r = run_grid(&exp, ExecutionMode::Parallel);
    let diff = r.summary(Scheme::Diffusion, 0.0, 1).unwrap().mse_mean.unwrap();
    let eq = r.summary(Scheme::Equalized, 0.0, 1).unwrap().mse_mean.unwrap();
    assert!(diff < eq, "{diff} vs {eq}");
}

#[test]
fn pilot_free_is_close_to_known_state_at_high_snr() {
    let base =
        "trials = 40\nlatent_dim = 1024\nsource = { kind = \"structured\", mean_offset = 0.8, correlation = 0.5 }\n\
                [channel]\nkind = \"slow_fading\"\nsnr_db = [15.0]\n";
    let known = run_grid(&experiment(base), ExecutionMode::Parallel);
    let blind = run_grid(
        &experiment(&format!("{base}[pipeline]\npilot_free = true\n")),
        ExecutionMode::Parallel,
    );
    assert_eq!(blind.failures(), 0);
    let k = known.summaries[0].mse_mean.unwrap();
    let b = blind.summaries[0].mse_mean.unwrap();
    assert!(b < 2.0 * k + 0.02, "blind {b} vs known {k}");
    assert!(blind.records.iter().all(|r| r.est_alpha_error.is_some()));
}

#[test]
fn masked_sweep_is_reproducible_across_modes() {
    let exp = experiment(
        "trials = 6\nlatent_dim = 64\n[channel]\nsnr_db = [0.0, 10.0]\n\
         [pipeline]\nschemes = [\"diffusion\", \"diffusion_no_fill\"]\nmask = { strategy = \"random\", ratio = 0.5, embed_dim = 8 }\n",
    );
    let a = strip_wall_time(&run_grid(&exp, ExecutionMode::Sequential).to_csv());
    let b = strip_wall_time(&run_grid(&exp, ExecutionMode::Workers(3)).to_csv());
    assert_eq!(a, b);
    assert!(a.contains(",0.5,"));
}
