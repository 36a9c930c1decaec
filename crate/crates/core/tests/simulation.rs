use hedonic_core::binning::Window;
use hedonic_core::design::{assemble_design, Estimator, ModelSpec};
use hedonic_core::mixedmodel::{fit_ml, MixedOptions};
use hedonic_core::simoracle::{simulate_panel_stream, SimConfig};

fn sample_var(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

#[test]
fn latent_variances_match_targets_over_fifty_replicates() {
    let cfg = SimConfig::default();
    let mut sums = [0.0f64; 4];
    let mut y_resid_var = 0.0;
    let reps = 50;
    for r in 0..reps {
        let d = simulate_panel_stream(&cfg, r + 1).unwrap();
        let l = &d.latent;
        sums[0] += sample_var(l.collection.values().copied());
        sums[1] += sample_var(l.nft.values().copied());
        sums[2] += sample_var(l.collection_bin.values().copied());
        sums[3] += sample_var(l.residual.iter().copied());
        // y net of the fixed part carries the random-effect and residual variances.
        let spec = ModelSpec::new(Estimator::MixedMundlak, cfg.window);
        let design = assemble_design(&spec, &d.table).unwrap();
        let fitted: Vec<f64> = (0..design.n_obs())
            .map(|i| design.columns.iter().enumerate().map(|(j, c)| design.x[(i, j)] * d.truth_of(c).unwrap()).sum())
            .collect();
        y_resid_var += sample_var(design.y.iter().zip(&fitted).map(|(y, f)| y - f));
    }
    let targets = [cfg.var_collection, cfg.var_nft, cfg.var_collection_bin, cfg.var_residual];
    for (s, t) in sums.iter().zip(targets) {
        let avg = s / reps as f64;
        assert!((avg - t).abs() <= 0.1 * t, "average {avg} vs target {t}");
    }
    // The slope term adds var_slope times the unit-variance covariate.
    let total = targets.iter().sum::<f64>() + cfg.var_slope;
    let avg = y_resid_var / reps as f64;
    assert!((avg - total).abs() <= 0.1 * total, "y variance {avg} vs {total}");
}

#[test]
fn zero_variance_components_pile_at_floor() {
    let cfg = SimConfig {
        n_collections: 20,
        var_nft: 0.0,
        var_collection: 0.0,
        var_collection_bin: 0.0,
        var_slope: 0.0,
        ..SimConfig::default()
    };
    let spec = ModelSpec::new(Estimator::MixedMundlak, Window::Lag1);
    let mut at_floor = 0usize;
    let mut max_ratio = 0.0f64;
    let mut total = 0usize;
    for r in 0..10 {
        let d = simulate_panel_stream(&cfg, r + 1).unwrap();
        let design = assemble_design(&spec, &d.table).unwrap();
        let fit = fit_ml(&design, &spec.random, &MixedOptions::default()).unwrap();
        for c in &fit.components {
            // Twenty collections leave slope variances with sampling noise near 5% of sigma^2.
            assert!(c.variance < 0.1 * cfg.var_residual, "{} = {}", c.term, c.variance);
            max_ratio = max_ratio.max(c.variance / cfg.var_residual);
            at_floor += c.at_boundary as usize;
            total += 1;
        }
    }
    println!("{at_floor} of {total} components at the floor; max variance / sigma^2 {max_ratio:.4}");
    assert!(at_floor * 5 >= total * 2, "{at_floor} of {total} components at the floor");
}

/// Diagnostic: a direct (undecomposed) regressor on a DGP with distinct within
/// and between slopes estimates a blend of the two.
#[test]
fn omitted_between_term_biases_direct_slope() {
    let cfg = SimConfig { n_collections: 30, bins_per_collection: 10, nfts_per_collection: 6, ..SimConfig::default() };
    let spec = ModelSpec::new(Estimator::MixedDirect, Window::Lag1);
    let within = cfg.beta["negshare_rw_lag1_within"];
    let between = cfg.beta["negshare_rw_lag1_bar"];
    let mut est = Vec::new();
    for r in 0..50u64 {
        let d = simulate_panel_stream(&cfg, r + 1).unwrap();
        let design = assemble_design(&spec, &d.table).unwrap();
        let fit = fit_ml(&design, &spec.random, &MixedOptions { seed: r, ..MixedOptions::default() }).unwrap();
        let j = fit.names.iter().position(|n| n == "negshare_rw_lag1").expect("direct negshare column");
        est.push(fit.beta[j]);
    }
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let mc_se = (sample_var(est.iter().copied()) / est.len() as f64).sqrt();
    println!("direct negshare mean {mean:.4} (within {within}, between {between}, mc se {mc_se:.4})");
    assert!(mean - within > 3.0 * mc_se);
    assert!(mean < between);
}
