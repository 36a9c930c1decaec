//! Synthetic panels with known parameters, a dense GLS oracle, Monte Carlo
//! recovery checks and an input-file fixture generator.
//!
//! All randomness comes from `ChaCha8Rng` seeded with `seed_from_u64(seed)`;
//! replicate `r` of a Monte Carlo run uses stream `r + 1` of the same seed, so
//! every replicate can be regenerated on its own.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::binning::{
    add_window_columns, merge_bins_to_trades, windowed_name, BinPanel, Window, LOG_ATTENTION, NEGSHARE_RW, POLARITY_RW,
    SIGNALS,
};
use crate::clusterols::fit_benchmark;
use crate::design::{assemble_design, between_name, mundlak_decompose, within_name, Estimator, ModelSpec, INTERCEPT, RESPONSE, VISUAL};
use crate::error::{Error, Result};
use crate::ingest::MARKET_CONTROLS;
use crate::mixedmodel::{fit_ml, MixedOptions, MixedProblem, RandomStructure, TermData};
use crate::stats::{self, Z_975};
use crate::table::{EstimationTable, NumericColumns};
use crate::visualindex::TRAITS;

/// Largest sample the dense oracle accepts.
pub const DENSE_LIMIT: usize = 2000;
/// First bin that can carry trades: every window (lag 1, lag 2, prior-three mean) is defined from here on.
pub const FIRST_TRADE_BIN: usize = 3;
pub const COVERAGE_BAND: (f64, f64) = (0.90, 0.99);
pub const BIAS_RATIO: f64 = 0.25;

fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")
}

/// Fixed-effect magnitudes of the baseline mixed model, keyed by the
/// lag-1 design column names.
pub fn baseline_beta(window: Window) -> BTreeMap<String, f64> {
    let w = |stem: &str| windowed_name(stem, window);
    let mut beta = BTreeMap::new();
    beta.insert(INTERCEPT.to_string(), 7.895);
    for (name, b) in MARKET_CONTROLS.iter().zip([0.015, -0.011, 0.018, -0.004, 0.001, 0.148]) {
        beta.insert(name.to_string(), b);
    }
    beta.insert(VISUAL.to_string(), 0.041);
    let reddit = [
        (within_name(&w("attn")), -0.009),
        (between_name(&w("attn")), 0.332),
        (within_name(&w("negshare_rw")), 0.254),
        (between_name(&w("negshare_rw")), 0.929),
        (within_name(&w("polarity_rw")), -0.004),
        (between_name(&w("polarity_rw")), 0.510),
    ];
    beta.extend(reddit);
    beta
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_collections: usize,
    /// Discourse bins per collection; trades fall in bins `FIRST_TRADE_BIN..bins_per_collection`.
    pub bins_per_collection: usize,
    pub nfts_per_collection: usize,
    pub trades_per_nft: usize,
    /// True coefficients on the standardized Mundlak design; absent columns are 0.
    pub beta: BTreeMap<String, f64>,
    pub var_nft: f64,
    pub var_collection: f64,
    pub var_collection_bin: f64,
    /// Variance of the collection-specific slope on standardized within-polarity.
    pub var_slope: f64,
    pub var_residual: f64,
    /// AR(1) coefficient of the bin-level discourse signals.
    pub discourse_rho: f64,
    pub window: Window,
    /// Effect of raw `log_attention` summed over bins b-2 and b-3.
    pub accumulation_effect: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_collections: 50,
            bins_per_collection: 12,
            nfts_per_collection: 10,
            trades_per_nft: 3,
            beta: baseline_beta(Window::Lag1),
            var_nft: 0.38,
            var_collection: 0.84,
            var_collection_bin: 0.12,
            var_slope: 0.376,
            var_residual: 0.11,
            discourse_rho: 0.5,
            window: Window::Lag1,
            accumulation_effect: 0.0,
            seed: 20240101,
        }
    }
}

impl SimConfig {
    /// Attention enters prices only through bins b-2 and b-3; the other
    /// discourse coefficients are zero and attention is i.i.d. over bins.
    /// Long collections keep the demeaning bias of the omitted lags (about
    /// -2·effect/bins on the lag-1 slope) small next to its standard error.
    pub fn accumulation_dgp(seed: u64) -> Self {
        let mut beta = BTreeMap::new();
        beta.insert(INTERCEPT.to_string(), 7.895);
        SimConfig {
            n_collections: 6,
            bins_per_collection: 100,
            nfts_per_collection: 10,
            trades_per_nft: 12,
            beta,
            var_slope: 0.1,
            discourse_rho: 0.0,
            accumulation_effect: 0.15,
            seed,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_collections == 0 || self.nfts_per_collection == 0 || self.trades_per_nft == 0 {
            return Err(Error::InvalidInput("simulation counts must be at least 1".into()));
        }
        if self.bins_per_collection <= FIRST_TRADE_BIN {
            return Err(Error::InvalidInput(format!("bins_per_collection must exceed {FIRST_TRADE_BIN}")));
        }
        let vars = [self.var_nft, self.var_collection, self.var_collection_bin, self.var_slope, self.var_residual];
        if vars.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("variances must be finite and non-negative".into()));
        }
        if !(self.discourse_rho.abs() < 1.0) {
            return Err(Error::InvalidInput("discourse_rho must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

/// Random effects used to build `y`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentEffects {
    pub collection: BTreeMap<String, f64>,
    pub slope: BTreeMap<String, f64>,
    pub nft: BTreeMap<String, f64>,
    /// Keyed `"{collection}#{bin}"`.
    pub collection_bin: BTreeMap<String, f64>,
    /// One draw per table row.
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub table: EstimationTable,
    pub panel: BinPanel,
    /// `(design column, true coefficient)` in design order.
    pub truth: Vec<(String, f64)>,
    pub latent: LatentEffects,
}

impl SimDataset {
    pub fn truth_of(&self, name: &str) -> Option<f64> {
        self.truth.iter().find(|(n, _)| n == name).map(|(_, b)| *b)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn simulate_panel(config: &SimConfig) -> Result<SimDataset> {
    simulate_panel_stream(config, 0)
}

/// Same generator on stream `stream` of `config.seed`.
pub fn simulate_panel_stream(config: &SimConfig, stream: u64) -> Result<SimDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let nb = config.bins_per_collection;
    let codes: Vec<String> = (0..config.n_collections).map(|c| format!("c{c:03}")).collect();

    let mut panel = BinPanel::default();
    let bases = [LOG_ATTENTION, NEGSHARE_RW, POLARITY_RW];
    let mut base_cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); bases.len()];
    let rho = config.discourse_rho;
    for code in &codes {
        for col in base_cols.iter_mut() {
            let shift = normal(&mut rng);
            let mut e = normal(&mut rng) / (1.0 - rho * rho).sqrt();
            for b in 0..nb {
                if b > 0 {
                    e = rho * e + normal(&mut rng);
                }
                col.push(Some(shift + e));
            }
        }
        for b in 0..nb {
            panel.collection_code.push(code.clone());
            panel.bin_index.push(b);
            panel.n_items.push(10);
        }
    }
    for (name, col) in bases.iter().zip(base_cols) {
        panel.set_column(name, col)?;
    }
    add_window_columns(&mut panel, config.window)?;
    let windowed: Vec<String> = SIGNALS.iter().map(|(stem, _)| windowed_name(stem, config.window)).collect();
    let windowed_refs: Vec<&str> = windowed.iter().map(String::as_str).collect();
    mundlak_decompose(&panel, &windowed_refs)?.apply(&mut panel)?;

    let mut table = EstimationTable::default();
    let mut market: Vec<Vec<Option<f64>>> = vec![Vec::new(); MARKET_CONTROLS.len()];
    let mut visual_col = Vec::new();
    let mut tx = 0usize;
    for code in &codes {
        for k in 0..config.nfts_per_collection {
            let nft = format!("{code}-n{k:04}");
            let visual = normal(&mut rng);
            for _ in 0..config.trades_per_nft {
                let bin = rng.random_range(FIRST_TRADE_BIN..nb);
                let day = 2 * bin as i64 + rng.random_range(0..2);
                table.tx_id.push(format!("t{tx:08}"));
                table.nft_id.push(nft.clone());
                table.collection_code.push(code.clone());
                table.trade_date.push(start_date() + Duration::days(day));
                table.trade_bin.push(bin);
                for col in market.iter_mut() {
                    col.push(Some(normal(&mut rng)));
                }
                visual_col.push(Some(visual));
                tx += 1;
            }
        }
    }
    let n = table.len();
    let mut numeric = NumericColumns::default();
    numeric.set(RESPONSE, vec![Some(0.0); n]);
    for (name, col) in MARKET_CONTROLS.iter().zip(market) {
        numeric.set(name, col);
    }
    numeric.set(VISUAL, visual_col);
    table.numeric = numeric;

    let mut merge_cols: Vec<String> = windowed.clone();
    for w in &windowed {
        merge_cols.push(within_name(w));
        merge_cols.push(between_name(w));
    }
    let merge_refs: Vec<&str> = merge_cols.iter().map(String::as_str).collect();
    let mut table = merge_bins_to_trades(&table, &panel, &merge_refs)?.table;

    let spec = ModelSpec::new(Estimator::MixedMundlak, config.window);
    let design = assemble_design(&spec, &table)?;
    if design.n_obs() != n || design.tx_id != table.tx_id {
        return Err(Error::Contract("simulated design must keep every row in order".into()));
    }
    let truth: Vec<(String, f64)> =
        design.columns.iter().map(|c| (c.clone(), config.beta.get(c).copied().unwrap_or(0.0))).collect();
    let beta = DVector::from_iterator(truth.len(), truth.iter().map(|(_, b)| *b));
    let fixed = &design.x * &beta;
    let slope_cov = design.covariate(&spec.polarity_within())?;

    let mut latent = LatentEffects::default();
    for code in &codes {
        latent.collection.insert(code.clone(), config.var_collection.sqrt() * normal(&mut rng));
        latent.slope.insert(code.clone(), config.var_slope.sqrt() * normal(&mut rng));
    }
    for nft in &table.nft_id {
        if !latent.nft.contains_key(nft) {
            let u = config.var_nft.sqrt() * normal(&mut rng);
            latent.nft.insert(nft.clone(), u);
        }
    }
    for (c, b) in panel.collection_code.iter().zip(&panel.bin_index) {
        latent.collection_bin.insert(format!("{c}#{b}"), config.var_collection_bin.sqrt() * normal(&mut rng));
    }
    let attention = panel.column(LOG_ATTENTION)?.to_vec();
    let row_of = panel.row_index();
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = &table.collection_code[i];
        let b = table.trade_bin[i];
        let eps = config.var_residual.sqrt() * normal(&mut rng);
        latent.residual.push(eps);
        let mut v = fixed[i]
            + latent.collection[c]
            + latent.slope[c] * slope_cov[i]
            + latent.nft[&table.nft_id[i]]
            + latent.collection_bin[&format!("{c}#{b}")]
            + eps;
        if config.accumulation_effect != 0.0 {
            let a = |lag: usize| attention[row_of[&(c.clone(), b - lag)]].expect("simulated attention is complete");
            v += config.accumulation_effect * (a(2) + a(3));
        }
        y.push(Some(v));
    }
    table.set_column(RESPONSE, y)?;
    Ok(SimDataset { table, panel, truth, latent })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlsOracle {
    pub beta: Vec<f64>,
    /// `(Xᵀ V⁻¹ X)⁻¹` with V in absolute variance units.
    pub covariance: DMatrix<f64>,
}

/// Dense GLS with `V = residual·I + Σ_t variances[t]·Z_t Z_tᵀ`.
pub fn gls_dense(y: &[f64], x: &DMatrix<f64>, terms: &[TermData], variances: &[f64], residual: f64) -> Result<GlsOracle> {
    let n = y.len();
    if n > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!("dense oracle refuses n = {n} > {DENSE_LIMIT}")));
    }
    if x.nrows() != n || terms.len() != variances.len() || terms.iter().any(|t| t.codes.len() != n) {
        return Err(Error::InvalidInput("oracle inputs disagree in length".into()));
    }
    let mut v = DMatrix::<f64>::identity(n, n) * residual;
    for (t, &s2) in terms.iter().zip(variances) {
        let z = |i: usize| t.covariate.as_ref().map_or(1.0, |c| c[i]);
        for i in 0..n {
            for j in 0..n {
                if t.codes[i] == t.codes[j] {
                    v[(i, j)] += s2 * z(i) * z(j);
                }
            }
        }
    }
    let chol = v.cholesky().ok_or_else(|| Error::Numerical("V is not positive definite".into()))?;
    let vinv_x = chol.solve(x);
    let vinv_y = chol.solve(&DVector::from_column_slice(y));
    let xtvx = x.tr_mul(&vinv_x);
    let cov = xtvx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("XᵀV⁻¹X is singular".into()))?;
    let beta = &cov * x.tr_mul(&vinv_y);
    Ok(GlsOracle { beta: beta.iter().copied().collect(), covariance: cov })
}

/// Dense GLS on a design under the given random structure and true variances.
pub fn gls_oracle(
    design: &crate::design::DesignMatrix,
    structure: &RandomStructure,
    variances: &[f64],
    residual: f64,
) -> Result<GlsOracle> {
    if design.n_obs() > DENSE_LIMIT {
        return Err(Error::InvalidInput(format!("dense oracle refuses n = {} > {DENSE_LIMIT}", design.n_obs())));
    }
    let problem = MixedProblem::from_design(design, structure)?;
    let (y, x) = problem.data();
    gls_dense(y.as_slice(), x, problem.terms(), variances, residual)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryRow {
    pub coefficient: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub empirical_se: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub n_fits: usize,
}

impl RecoveryRow {
    pub fn coverage_ok(&self) -> bool {
        self.coverage >= COVERAGE_BAND.0 && self.coverage <= COVERAGE_BAND.1
    }

    pub fn bias_ok(&self) -> bool {
        self.bias.abs() < BIAS_RATIO * self.empirical_se
    }

    pub fn pass(&self) -> bool {
        self.coverage_ok() && self.bias_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub estimator: Estimator,
    pub n_replicates: usize,
    pub failures: usize,
    pub rows: Vec<RecoveryRow>,
}

impl RecoveryReport {
    pub fn pass(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(RecoveryRow::pass)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["coefficient", "true", "mean_estimate", "bias", "emp_se", "mean_se", "coverage", "n_fits", "pass"])?;
        for r in &self.rows {
            w.write_record([
                r.coefficient.clone(),
                r.truth.to_string(),
                r.mean_estimate.to_string(),
                r.bias.to_string(),
                r.empirical_se.to_string(),
                r.mean_se.to_string(),
                r.coverage.to_string(),
                r.n_fits.to_string(),
                r.pass().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("recovery_report.csv", e))?;
        Ok(())
    }
}

/// `(coefficient, estimate, se)` for every estimated column.
fn estimate(data: &SimDataset, spec: &ModelSpec, seed: u64) -> Result<Vec<(String, f64, f64)>> {
    let design = assemble_design(spec, &data.table)?;
    match spec.estimator {
        Estimator::OlsCluster => Ok(fit_benchmark(&design)?
            .coefficients
            .into_iter()
            .map(|r| (r.variable, r.coef, r.se))
            .collect()),
        _ => {
            let fit = fit_ml(&design, &spec.random, &MixedOptions { seed, ..MixedOptions::default() })?;
            Ok(fit.names.into_iter().zip(fit.beta).zip(fit.se).map(|((n, b), s)| (n, b, s)).collect())
        }
    }
}

pub fn recovery_check(n_replicates: usize, config: &SimConfig, estimator: Estimator) -> Result<RecoveryReport> {
    recovery_check_with_spec(n_replicates, config, &ModelSpec::new(estimator, config.window))
}

/// Refits `spec` on `n_replicates` independent datasets and summarizes every
/// coefficient that has a true value in `config.beta` or a zero-truth regressor
/// of the generating design.
pub fn recovery_check_with_spec(n_replicates: usize, config: &SimConfig, spec: &ModelSpec) -> Result<RecoveryReport> {
    if n_replicates < 50 {
        return Err(Error::InvalidInput("recovery_check needs at least 50 replicates".into()));
    }
    config.validate()?;
    let results: Vec<Option<(Vec<(String, f64)>, Vec<(String, f64, f64)>)>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let stream = r as u64 + 1;
            let data = simulate_panel_stream(config, stream).ok()?;
            let est = estimate(&data, spec, config.seed ^ stream).ok()?;
            Some((data.truth, est))
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    let ok: Vec<_> = results.into_iter().flatten().collect();
    let Some((first_truth, _)) = ok.first() else {
        return Ok(RecoveryReport { estimator: spec.estimator, n_replicates, failures, rows: Vec::new() });
    };
    let mut rows = Vec::new();
    for (name, truth) in first_truth.iter().filter(|(n, _)| !n.starts_with("month[")) {
        let draws: Vec<(f64, f64)> = ok
            .iter()
            .filter_map(|(_, est)| est.iter().find(|(n, _, _)| n == name).map(|(_, b, s)| (*b, *s)))
            .filter(|(b, s)| b.is_finite() && s.is_finite())
            .collect();
        if draws.len() < 2 {
            continue;
        }
        let est: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let se: Vec<f64> = draws.iter().map(|d| d.1).collect();
        let mean = stats::mean(&est).expect("non-empty");
        let covered = draws.iter().filter(|(b, s)| (b - truth).abs() <= Z_975 * s).count();
        rows.push(RecoveryRow {
            coefficient: name.clone(),
            truth: *truth,
            mean_estimate: mean,
            bias: mean - truth,
            empirical_se: stats::sample_sd(&est).expect("two draws"),
            mean_se: stats::mean(&se).expect("non-empty"),
            coverage: covered as f64 / draws.len() as f64,
            n_fits: draws.len(),
        });
    }
    Ok(RecoveryReport { estimator: spec.estimator, n_replicates, failures, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowOutcome {
    pub replicate: usize,
    pub roll3_coef: f64,
    pub roll3_p: f64,
    pub lag1_coef: f64,
    pub lag1_p: f64,
}

impl WindowOutcome {
    /// Prior-three mean positive and significant at 5%, lag 1 not significant.
    pub fn reproduces_pattern(&self) -> bool {
        self.roll3_coef > 0.0 && self.roll3_p < 0.05 && self.lag1_p >= 0.05
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub outcomes: Vec<WindowOutcome>,
    pub failures: usize,
}

impl WindowReport {
    pub fn share_reproduced(&self) -> f64 {
        let total = self.outcomes.len() + self.failures;
        if total == 0 {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.reproduces_pattern()).count() as f64 / total as f64
    }
}

fn within_attention(data: &SimDataset, window: Window, seed: u64) -> Result<(f64, f64)> {
    let spec = ModelSpec::new(Estimator::MixedMundlak, window);
    let est = estimate(data, &spec, seed)?;
    let name = within_name(&windowed_name("attn", window));
    let (_, b, s) = est
        .into_iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| Error::UnknownVariable(name.clone()))?;
    let row = stats::coefficient_row(&name, b, s);
    Ok((row.coef, row.p))
}

/// Fits the lag-1 and prior-three-mean Mundlak models on each replicate of an
/// accumulation DGP and records the within-attention estimates.
pub fn window_variant_check(n_replicates: usize, config: &SimConfig) -> Result<WindowReport> {
    config.validate()?;
    let results: Vec<Option<WindowOutcome>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let stream = r as u64 + 1;
            let mut cfg = config.clone();
            cfg.window = Window::Roll3;
            let roll = simulate_panel_stream(&cfg, stream).ok()?;
            let mut table = roll.table.clone();
            let mut panel = roll.panel.clone();
            add_window_columns(&mut panel, Window::Lag1).ok()?;
            let lag_cols: Vec<String> = SIGNALS.iter().map(|(s, _)| windowed_name(s, Window::Lag1)).collect();
            let refs: Vec<&str> = lag_cols.iter().map(String::as_str).collect();
            mundlak_decompose(&panel, &refs).ok()?.apply(&mut panel).ok()?;
            let mut extra = lag_cols.clone();
            for c in &lag_cols {
                extra.push(within_name(c));
                extra.push(between_name(c));
            }
            let extra_refs: Vec<&str> = extra.iter().map(String::as_str).collect();
            table = merge_bins_to_trades(&table, &panel, &extra_refs).ok()?.table;
            let lag = SimDataset { table, panel, truth: roll.truth.clone(), latent: roll.latent.clone() };
            let (roll3_coef, roll3_p) = within_attention(&roll, Window::Roll3, config.seed ^ stream).ok()?;
            let (lag1_coef, lag1_p) = within_attention(&lag, Window::Lag1, config.seed ^ stream).ok()?;
            Some(WindowOutcome { replicate: r, roll3_coef, roll3_p, lag1_coef, lag1_p })
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    Ok(WindowReport { outcomes: results.into_iter().flatten().collect(), failures })
}

/// Input-file fixture for end-to-end runs.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub n_collections: usize,
    pub nfts_per_collection: usize,
    /// Trades of the first collection; collection `c` gets `base + c·trade_step`.
    pub trades_per_collection: usize,
    pub trade_step: usize,
    pub threads_per_collection: usize,
    pub days: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            n_collections: 4,
            nfts_per_collection: 40,
            trades_per_collection: 240,
            trade_step: 40,
            threads_per_collection: 480,
            days: 90,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFiles {
    pub transactions: PathBuf,
    pub market: PathBuf,
    pub discourse: PathBuf,
    pub features: PathBuf,
    pub n_transactions: usize,
    pub largest_collection: String,
}

pub fn base36_encode(mut v: u64) -> String {
    const DIGITS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";
    if v == 0 {
        return "0".into();
    }
    let mut out = Vec::new();
    while v > 0 {
        out.push(DIGITS[(v % 36) as usize]);
        v /= 36;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii digits")
}

const NEUTRAL: [&str; 16] = [
    "the", "floor", "mint", "holders", "art", "team", "roadmap", "price", "eth", "discord", "drop", "community",
    "traits", "collection", "today", "project",
];
const POSITIVE: [&str; 8] = ["good", "great", "amazing", "love", "bullish", "gem", "solid", "beautiful"];
const NEGATIVE: [&str; 8] = ["bad", "scam", "rug", "dump", "bearish", "overpriced", "worthless", "ugly"];

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes `transactions.csv`, `market.csv`, `discourse.csv` and `features.csv`
/// into `dir`. The last collection has the most trades.
pub fn write_fixture(dir: &Path, config: &FixtureConfig) -> Result<FixtureFiles> {
    if config.n_collections == 0 || config.nfts_per_collection == 0 || config.days == 0 {
        return Err(Error::InvalidInput("fixture counts must be at least 1".into()));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let codes: Vec<String> = (0..config.n_collections).map(|c| format!("col{:02}", c + 1)).collect();

    let features = dir.join("features.csv");
    let mut w = csv::Writer::from_path(&features)?;
    let mut header = vec!["nft_id", "collection_code"];
    header.extend(TRAITS);
    header.push("most_frequent_hue");
    w.write_record(&header)?;
    let mut nft_effect = BTreeMap::new();
    for code in &codes {
        for k in 0..config.nfts_per_collection {
            let id = format!("{code}-{k:05}");
            let latent = normal(&mut rng);
            let mut rec = vec![id.clone(), code.clone()];
            for t in 0..TRAITS.len() {
                let v = 10.0 + (t as f64 + 1.0) * 0.3 * latent + normal(&mut rng);
                // One missing trait cell in roughly fifty.
                rec.push(if rng.random::<f64>() < 0.02 { String::new() } else { format!("{v:.6}") });
            }
            rec.push(format!("{:.3}", rng.random_range(0.0..360.0)));
            w.write_record(&rec)?;
            nft_effect.insert(id, 0.3 * latent + 0.5 * normal(&mut rng));
        }
    }
    w.flush().map_err(io_err(&features))?;

    let market = dir.join("market.csv");
    let mut w = csv::Writer::from_path(&market)?;
    w.write_record(crate::ingest::MARKET_HEADER)?;
    let mut fear = 50.0f64;
    for d in 0..config.days {
        let date = start_date() + Duration::days(d as i64);
        fear = (fear + 4.0 * normal(&mut rng)).clamp(5.0, 95.0);
        let mut rec = vec![date.format("%Y-%m-%d").to_string()];
        for sd in [0.03, 0.02, 0.05, 0.01, 0.012] {
            rec.push(format!("{:.6}", sd * normal(&mut rng)));
        }
        rec.push(format!("{:.0}", fear));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(&market))?;

    let transactions = dir.join("transactions.csv");
    let mut w = csv::Writer::from_path(&transactions)?;
    w.write_record(crate::ingest::TRANSACTION_HEADER)?;
    let mut tx = 0usize;
    let mut counts = Vec::new();
    for (c, code) in codes.iter().enumerate() {
        let n_trades = config.trades_per_collection + c * config.trade_step;
        counts.push(n_trades);
        let level = 4.0 + 0.8 * c as f64;
        for _ in 0..n_trades {
            let k = rng.random_range(0..config.nfts_per_collection);
            let id = format!("{code}-{k:05}");
            let day = rng.random_range(0..config.days);
            let date = start_date() + Duration::days(day as i64);
            let y = level + nft_effect[&id] + 0.4 * day as f64 / config.days as f64 + 0.3 * normal(&mut rng);
            let price = (y.exp() - 1.0).max(0.01);
            w.write_record([
                format!("tx{tx:08}"),
                id,
                code.clone(),
                date.format("%Y-%m-%d").to_string(),
                format!("{price:.4}"),
            ])?;
            tx += 1;
        }
    }
    w.flush().map_err(io_err(&transactions))?;

    let discourse = dir.join("discourse.csv");
    let mut w = csv::Writer::from_path(&discourse)?;
    w.write_record(["url", "title", "body", "subreddit", "collection_code"])?;
    for (c, code) in codes.iter().enumerate() {
        let mut key: u64 = 60_000_000 + 1_000 * c as u64;
        let tilt = 0.15 * (c as f64 - (config.n_collections as f64 - 1.0) / 2.0);
        let mut mood = 0.0f64;
        let mut buzz = 0.0f64;
        let mut previous: Option<(String, String, String)> = None;
        for i in 0..config.threads_per_collection {
            key += rng.random_range(1..5_000);
            // Slow-moving mood and activity so bin-level series carry signal.
            mood = 0.97 * mood + 0.15 * normal(&mut rng);
            buzz = 0.95 * buzz + 0.25 * normal(&mut rng);
            let id = base36_encode(key);
            let url = format!("https://www.reddit.com/r/{code}/comments/{id}/thread_{i}/");
            // Replies share the thread URL, so their keys tie.
            let n_posts = 1 + (rng.random::<f64>() * 2.0 * buzz.exp()).floor() as usize;
            for j in 0..n_posts {
                let (title, body) = if i % 97 == 5 && j == 0 {
                    ("ok".to_string(), String::new())
                } else {
                    let mut words = Vec::new();
                    for _ in 0..rng.random_range(4..10) {
                        words.push(NEUTRAL[rng.random_range(0..NEUTRAL.len())].to_string());
                    }
                    let p_pos = 1.0 / (1.0 + (-(tilt + mood)).exp());
                    for _ in 0..rng.random_range(1..3) {
                        let positive = rng.random::<f64>() < p_pos;
                        let list = if positive { &POSITIVE } else { &NEGATIVE };
                        let u = rng.random::<f64>();
                        if u < 0.1 {
                            words.push("not".into());
                        } else if u < 0.2 {
                            words.push("very".into());
                        }
                        words.push(list[rng.random_range(0..list.len())].to_string());
                    }
                    let split = words.len() / 2;
                    (words[..split].join(" "), format!("{} https://example.com/x{i}-{j}", words[split..].join(" ")))
                };
                let rec = (url.clone(), title, body);
                w.write_record([rec.0.as_str(), rec.1.as_str(), rec.2.as_str(), "NFT", code.as_str()])?;
                previous = Some(rec);
            }
            if i % 53 == 7 {
                if let Some(p) = &previous {
                    w.write_record([p.0.as_str(), p.1.as_str(), p.2.as_str(), "NFT", code.as_str()])?;
                }
            }
        }
    }
    w.flush().map_err(io_err(&discourse))?;

    let largest = counts
        .iter()
        .enumerate()
        .max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))
        .map(|(i, _)| codes[i].clone())
        .expect("at least one collection");
    Ok(FixtureFiles { transactions, market, discourse, features, n_transactions: tx, largest_collection: largest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clusterols::fit_fe_ols;
    use crate::mixedmodel::{GroupFactor, RandomTerm};

    fn small() -> SimConfig {
        SimConfig { n_collections: 8, nfts_per_collection: 5, bins_per_collection: 8, ..SimConfig::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = simulate_panel(&small()).unwrap();
        let b = simulate_panel(&small()).unwrap();
        assert_eq!(a, b);
        let c = simulate_panel_stream(&small(), 3).unwrap();
        assert_ne!(a.table, c.table);
    }

    #[test]
    fn zero_variance_is_exact() {
        let cfg = SimConfig {
            var_nft: 0.0,
            var_collection: 0.0,
            var_collection_bin: 0.0,
            var_slope: 0.0,
            var_residual: 0.0,
            ..small()
        };
        let data = simulate_panel(&cfg).unwrap();
        let design = assemble_design(&ModelSpec::new(Estimator::MixedMundlak, Window::Lag1), &data.table).unwrap();
        let ols = fit_fe_ols(&design.x, &design.y).unwrap();
        for (j, (_, truth)) in data.truth.iter().enumerate() {
            assert!((ols.beta[j] - truth).abs() < 1e-8, "{j}");
        }
        let empty = RandomStructure::new(Vec::new());
        let g = gls_oracle(&design, &empty, &[], 1.0).unwrap();
        for (j, (_, truth)) in data.truth.iter().enumerate() {
            assert!((g.beta[j] - truth).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_oracle_is_ols() {
        let data = simulate_panel(&small()).unwrap();
        let design = assemble_design(&ModelSpec::new(Estimator::MixedMundlak, Window::Lag1), &data.table).unwrap();
        let s = RandomStructure::new(vec![RandomTerm::intercept(GroupFactor::Collection)]);
        let g = gls_oracle(&design, &s, &[0.0], 1.0).unwrap();
        let ols = fit_fe_ols(&design.x, &design.y).unwrap();
        for j in 0..g.beta.len() {
            assert!((g.beta[j] - ols.beta[j]).abs() < 1e-10 * (1.0 + ols.beta[j].abs()));
        }
    }

    #[test]
    fn hand_four_by_four() {
        // Groups {0,1} and {2,3}, variance 1, residual 1: V is block diagonal with
        // blocks [[2,1],[1,2]] whose inverse is [[2,-1],[-1,2]]/3.
        let y = [1.0, 2.0, 4.0, 7.0];
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let t = TermData::from_labels("g", &["a".into(), "a".into(), "b".into(), "b".into()], None);
        let g = gls_dense(&y, &x, &[t], &[1.0], 1.0).unwrap();
        // 1ᵀV⁻¹1 = 4/3, 1ᵀV⁻¹y = (1+2+4+7)/3.
        assert!((g.beta[0] - 14.0 / 4.0).abs() < 1e-12);
        assert!((g.covariance[(0, 0)] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn oracle_refuses_large() {
        let x = DMatrix::zeros(DENSE_LIMIT + 1, 1);
        let y = vec![0.0; DENSE_LIMIT + 1];
        assert!(gls_dense(&y, &x, &[], &[], 1.0).is_err());
    }

    #[test]
    fn oracle_matches_profile() {
        let data = simulate_panel(&small()).unwrap();
        let spec = ModelSpec::new(Estimator::MixedMundlak, Window::Lag1);
        let design = assemble_design(&spec, &data.table).unwrap();
        let vars = [0.38, 0.84, 0.12, 0.376];
        let g = gls_oracle(&design, &spec.random, &vars, 0.11).unwrap();
        let problem = MixedProblem::from_design(&design, &spec.random).unwrap();
        let theta: Vec<f64> = vars.iter().map(|v| v / 0.11).collect();
        let prof = problem.profile_loglik(&theta).unwrap();
        for j in 0..g.beta.len() {
            let rel = (g.beta[j] - prof.beta[j]).abs() / g.beta[j].abs().max(1e-8);
            assert!(rel < 1e-6, "{j}: {rel}");
        }
    }

    #[test]
    fn truth_follows_design_columns() {
        let data = simulate_panel(&small()).unwrap();
        assert_eq!(data.truth[0], (INTERCEPT.to_string(), 7.895));
        assert_eq!(data.truth_of("attn_lag1_bar"), Some(0.332));
        assert_eq!(data.truth.len(), 1 + 6 + 1 + 6);
        assert_eq!(data.latent.residual.len(), data.table.len());
    }

    #[test]
    fn recovery_needs_fifty() {
        assert!(recovery_check(10, &small(), Estimator::MixedMundlak).is_err());
    }

    #[test]
    fn base36_round_trip() {
        for v in [0u64, 35, 36, 623698779, u64::MAX] {
            assert_eq!(crate::binning::base36_decode(&base36_encode(v)).unwrap(), v);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(SimConfig { n_collections: 0, ..small() }.validate().is_err());
        assert!(SimConfig { var_nft: -1.0, ..small() }.validate().is_err());
        assert!(SimConfig { bins_per_collection: 3, ..small() }.validate().is_err());
    }
}
