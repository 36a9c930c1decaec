//! Staged batch runs: configuration, cached intermediates, estimation tables,
//! the robustness grid and the run manifest.
//!
//! Stages read their inputs from the output directory written by the previous
//! stage, so any stage can be re-run on its own:
//!
//! | stage    | reads                                   | writes |
//! |----------|-----------------------------------------|--------|
//! | text     | discourse file                          | `discourse_items.csv`, `text_report.csv`, `text_rejects.csv` |
//! | panel    | `discourse_items.csv`                   | `bin_panel.csv`, `smoothing_diagnostics.csv` |
//! | visual   | features file                           | `visual_index.csv`, `pc1_loadings.csv` |
//! | merge    | transactions, market, panel, visual     | `estimation_table.csv`, `lag_audit.csv`, `merge_report.csv`, `input_rejects.csv` |
//! | estimate | `estimation_table.csv`                  | `table2.csv`, `table3.csv`, `table4.csv`, variance components, `fit_summary.csv` |

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binning::{
    add_window_columns, assign_trade_bins, audit_lags, bin_corpus, aggregate_bin_cells, merge_bins_to_trades, windowed_name,
    BinPanel, Window, AUDIT_PAIRS, LOG_ATTENTION, NEGSHARE_RW, POLARITY_RW, SIGNALS,
};
use crate::clusterols::fit_benchmark;
use crate::design::{
    assemble_design, between_name, largest_collection, mundlak_decompose, within_name, DesignMatrix, Estimator, ModelSpec,
    RESPONSE, VISUAL,
};
use crate::error::{Error, Result};
use crate::ingest::{self, MARKET_CONTROLS};
use crate::mixedmodel::{fit_ml, fixed_effect_inference, MixedFit, MixedOptions};
use crate::smoothing::{add_smoothed_columns, write_diagnostics};
use crate::stats::{format_number, write_coefficients};
use crate::table::{EstimationTable, NumericColumns};
use crate::textmetrics::{build_corpus, CleaningConfig, DiscourseItem, Lexicon, TopicRuleSet};
use crate::visualindex::{build_visual_index, parse_features};

pub const MANIFEST: &str = "manifest.json";
pub const ROBUSTNESS_DIR: &str = "robustness";
pub const MAX_TRIM: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Text,
    Panel,
    Visual,
    Merge,
    Estimate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Text, Stage::Panel, Stage::Visual, Stage::Merge, Stage::Estimate];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Text => "text",
            Stage::Panel => "panel",
            Stage::Visual => "visual",
            Stage::Merge => "merge",
            Stage::Estimate => "estimate",
        }
    }

    /// Process exit code when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Text => 10,
            Stage::Panel => 11,
            Stage::Visual => 12,
            Stage::Merge => 13,
            Stage::Estimate => 14,
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// `all` or a single stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    All,
    Only(Stage),
}

impl StageSelection {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "all" {
            return Ok(StageSelection::All);
        }
        Stage::from_name(&s)
            .map(StageSelection::Only)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (text, panel, visual, merge, estimate, all)")))
    }

    pub fn stages(self) -> Vec<Stage> {
        match self {
            StageSelection::All => Stage::ALL.to_vec(),
            StageSelection::Only(s) => vec![s],
        }
    }
}

/// Sample-sensitivity presets: S0 baseline, S1 drop the largest collection,
/// S2 trim the top price share, S3 minimum discourse items per trade bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sensitivity {
    S0,
    S1,
    S2,
    S3,
}

impl Sensitivity {
    pub const ALL: [Sensitivity; 4] = [Sensitivity::S0, Sensitivity::S1, Sensitivity::S2, Sensitivity::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            Sensitivity::S0 => "s0",
            Sensitivity::S1 => "s1",
            Sensitivity::S2 => "s2",
            Sensitivity::S3 => "s3",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Sensitivity::S0 => "Baseline",
            Sensitivity::S1 => "Drop top collection",
            Sensitivity::S2 => "Trim top prices",
            Sensitivity::S3 => "Min items per bin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Sensitivity::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown sensitivity `{s}` (s0, s1, s2, s3)")))
    }
}

/// Filters applied to the merged estimation table before design assembly.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleFilters {
    pub drop_top_collection: bool,
    pub trim_top_price_pct: Option<f64>,
    pub min_items_per_bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FilterReport {
    pub n_before: usize,
    pub dropped_collection: Option<String>,
    pub dropped_collection_rows: usize,
    pub trimmed: usize,
    pub below_min_items: usize,
    pub n_after: usize,
}

/// Applies, in order: drop the collection with most trades, trim the top
/// `floor(n·pct)` prices (ties by `tx_id`), keep bins with enough items.
pub fn apply_filters(table: &EstimationTable, filters: &SampleFilters) -> Result<(EstimationTable, FilterReport)> {
    let mut report = FilterReport { n_before: table.len(), ..FilterReport::default() };
    let mut t = table.clone();
    if filters.drop_top_collection {
        if let Some(top) = largest_collection(&t.collection_code) {
            let before = t.len();
            t = t.filter(|r| table_code(&t, r) != top);
            report.dropped_collection_rows = before - t.len();
            report.dropped_collection = Some(top);
        }
    }
    if let Some(pct) = filters.trim_top_price_pct {
        if !(0.0..=MAX_TRIM).contains(&pct) {
            return Err(Error::Config(format!("trim fraction {pct} outside [0, {MAX_TRIM}]")));
        }
        let k = (t.len() as f64 * pct + 1e-9).floor() as usize;
        if k > 0 {
            let y = t.column(RESPONSE)?;
            let mut order: Vec<usize> = (0..t.len()).collect();
            order.sort_by(|&a, &b| {
                let ya = y[a].unwrap_or(f64::NEG_INFINITY);
                let yb = y[b].unwrap_or(f64::NEG_INFINITY);
                yb.total_cmp(&ya).then_with(|| t.tx_id[a].cmp(&t.tx_id[b]))
            });
            let mut drop = vec![false; t.len()];
            for &i in &order[..k] {
                drop[i] = true;
            }
            t = t.filter(|r| !drop[r]);
            report.trimmed = k;
        }
    }
    if let Some(min) = filters.min_items_per_bin {
        let items = t.column("n_items")?.to_vec();
        let before = t.len();
        t = t.filter(|r| items[r].is_some_and(|v| v >= min as f64));
        report.below_min_items = before - t.len();
    }
    report.n_after = t.len();
    Ok((t, report))
}

fn table_code(t: &EstimationTable, r: usize) -> &str {
    &t.collection_code[r]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub transactions: PathBuf,
    pub market: PathBuf,
    pub discourse: PathBuf,
    pub features: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub topics: Option<PathBuf>,
    pub min_text_len: usize,
    pub target_bins: usize,
    pub window: Window,
    pub sensitivity: Sensitivity,
    pub drop_top_collection: bool,
    pub trim_top_price_pct: f64,
    pub min_items_per_bin: usize,
    pub estimators: Vec<Estimator>,
    pub reference_collection: Option<String>,
    pub dump_design: bool,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            transactions: PathBuf::from("transactions.csv"),
            market: PathBuf::from("market.csv"),
            discourse: PathBuf::from("discourse.csv"),
            features: PathBuf::from("features.csv"),
            lexicon: None,
            topics: None,
            min_text_len: crate::textmetrics::DEFAULT_MIN_LEN,
            target_bins: crate::binning::DEFAULT_TARGET_BINS,
            window: Window::Lag1,
            sensitivity: Sensitivity::S0,
            drop_top_collection: false,
            trim_top_price_pct: 0.005,
            min_items_per_bin: 5,
            estimators: vec![Estimator::MixedMundlak, Estimator::MixedDirect, Estimator::OlsCluster],
            reference_collection: None,
            dump_design: false,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true/false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

impl RunConfig {
    /// Parses `key = value` lines (`#` comments, blank lines ignored). Relative
    /// paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v.trim(), base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        fn opt(v: &str) -> Option<&str> {
            if v.is_empty() {
                None
            } else {
                Some(v)
            }
        }
        match key {
            "transactions" => self.transactions = path(value),
            "market" => self.market = path(value),
            "discourse" => self.discourse = path(value),
            "features" => self.features = path(value),
            "lexicon" => self.lexicon = opt(value).map(path),
            "topics" => self.topics = opt(value).map(path),
            "min_text_len" => self.min_text_len = parse_num(key, value)?,
            "target_bins" => self.target_bins = parse_num(key, value)?,
            "window" => self.window = Window::parse(value).map_err(|e| Error::Config(e.to_string()))?,
            "sensitivity" => self.sensitivity = Sensitivity::parse(value)?,
            "drop_top_collection" => self.drop_top_collection = parse_bool(key, value)?,
            "trim_top_price_pct" => self.trim_top_price_pct = parse_num(key, value)?,
            "min_items_per_bin" => self.min_items_per_bin = parse_num(key, value)?,
            "estimators" => {
                self.estimators = if value == "all" {
                    RunConfig::default().estimators
                } else {
                    value
                        .split(',')
                        .map(|s| Estimator::parse(s.trim()).map_err(|e| Error::Config(e.to_string())))
                        .collect::<Result<_>>()?
                };
            }
            "reference_collection" => self.reference_collection = opt(value).map(str::to_string),
            "dump_design" => self.dump_design = parse_bool(key, value)?,
            "out" => self.out = path(value),
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_bins == 0 {
            return Err(Error::Config("target_bins must be at least 1".into()));
        }
        if !(0.0..=MAX_TRIM).contains(&self.trim_top_price_pct) {
            return Err(Error::Config(format!("trim_top_price_pct must lie in [0, {MAX_TRIM}]")));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator required".into()));
        }
        Ok(())
    }

    /// Filters implied by the sensitivity preset plus the explicit flag.
    pub fn filters(&self) -> SampleFilters {
        self.filters_for(self.sensitivity)
    }

    pub fn filters_for(&self, s: Sensitivity) -> SampleFilters {
        SampleFilters {
            drop_top_collection: self.drop_top_collection || s == Sensitivity::S1,
            trim_top_price_pct: (s == Sensitivity::S2).then_some(self.trim_top_price_pct),
            min_items_per_bin: (s == Sensitivity::S3).then_some(self.min_items_per_bin),
        }
    }

    /// Sorted `key=value` pairs; the output directory is left out so that two
    /// runs into different directories hash alike.
    pub fn canonical(&self) -> BTreeMap<String, String> {
        let p = |p: &Path| p.display().to_string();
        let mut m = BTreeMap::new();
        m.insert("transactions".into(), p(&self.transactions));
        m.insert("market".into(), p(&self.market));
        m.insert("discourse".into(), p(&self.discourse));
        m.insert("features".into(), p(&self.features));
        m.insert("lexicon".into(), self.lexicon.as_deref().map(p).unwrap_or_default());
        m.insert("topics".into(), self.topics.as_deref().map(p).unwrap_or_default());
        m.insert("min_text_len".into(), self.min_text_len.to_string());
        m.insert("target_bins".into(), self.target_bins.to_string());
        m.insert("window".into(), self.window.suffix().to_string());
        m.insert("sensitivity".into(), self.sensitivity.as_str().to_string());
        m.insert("drop_top_collection".into(), self.drop_top_collection.to_string());
        m.insert("trim_top_price_pct".into(), self.trim_top_price_pct.to_string());
        m.insert("min_items_per_bin".into(), self.min_items_per_bin.to_string());
        m.insert(
            "estimators".into(),
            self.estimators.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(","),
        );
        m.insert("reference_collection".into(), self.reference_collection.clone().unwrap_or_default());
        m.insert("dump_design".into(), self.dump_design.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.canonical() {
            writeln!(f, "{k} = {v}")?;
        }
        writeln!(f, "out = {}", self.out.display())
    }
}

fn tag<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: stage.as_str(), source: Box::new(other) },
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn write_pairs(path: &Path, header: [&str; 2], rows: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn text_stage(cfg: &RunConfig) -> Result<()> {
    let parsed = ingest::parse_discourse(&cfg.discourse)?;
    let lex = match &cfg.lexicon {
        Some(p) => Lexicon::from_path(p)?,
        None => Lexicon::shipped(),
    };
    let rules = match &cfg.topics {
        Some(p) => TopicRuleSet::from_path(p)?,
        None => TopicRuleSet::shipped(),
    };
    let cleaning = CleaningConfig { min_len: cfg.min_text_len, ..CleaningConfig::default() };
    let corpus = build_corpus(&parsed.rows, &lex, &rules, &cleaning);
    let path = cfg.out.join("discourse_items.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for item in &corpus.items {
        w.serialize(item)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    ingest::write_rejects(create(&cfg.out.join("text_rejects.csv"))?, &parsed.rejects)?;
    write_pairs(
        &cfg.out.join("text_report.csv"),
        ["metric", "value"],
        &[
            ("records".into(), (parsed.rows.len() + parsed.rejects.len()).to_string()),
            ("rejected_records".into(), parsed.rejects.len().to_string()),
            ("dropped_short".into(), corpus.dropped_short.to_string()),
            ("dropped_duplicate".into(), corpus.dropped_duplicate.to_string()),
            ("dropped_bad_thread_id".into(), corpus.dropped_bad_thread_id.to_string()),
            ("items".into(), corpus.items.len().to_string()),
        ],
    )
}

fn read_items(path: &Path) -> Result<Vec<DiscourseItem>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let items: Vec<DiscourseItem> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(items)
}

/// Windowed signal columns for every window, plus their Mundlak components.
pub fn panel_signal_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for w in Window::ALL {
        for (stem, _) in SIGNALS {
            let name = windowed_name(stem, w);
            cols.push(within_name(&name));
            cols.push(between_name(&name));
            cols.push(name);
        }
    }
    cols
}

/// Bins, aggregates, smooths and windows a scored corpus.
pub fn build_panel(items: &[DiscourseItem], target_bins: usize) -> Result<(BinPanel, Vec<crate::smoothing::SmoothingDiagnostic>)> {
    let bins = bin_corpus(items, target_bins)?;
    let mut panel = aggregate_bin_cells(items, &bins)?;
    let diags = add_smoothed_columns(&mut panel)?;
    let mut windowed = Vec::new();
    for w in Window::ALL {
        add_window_columns(&mut panel, w)?;
        windowed.extend(SIGNALS.iter().map(|(stem, _)| windowed_name(stem, w)));
    }
    let refs: Vec<&str> = windowed.iter().map(String::as_str).collect();
    mundlak_decompose(&panel, &refs)?.apply(&mut panel)?;
    panel.validate()?;
    Ok((panel, diags))
}

fn panel_stage(cfg: &RunConfig) -> Result<()> {
    let items = read_items(&cfg.out.join("discourse_items.csv"))?;
    let (panel, diags) = build_panel(&items, cfg.target_bins)?;
    panel.write_csv(create(&cfg.out.join("bin_panel.csv"))?)?;
    write_diagnostics(&diags, create(&cfg.out.join("smoothing_diagnostics.csv"))?)
}

fn visual_stage(cfg: &RunConfig) -> Result<()> {
    let features = parse_features(&cfg.features)?;
    let index = build_visual_index(&features)?;
    index.write_index_csv(create(&cfg.out.join("visual_index.csv"))?)?;
    index.write_loadings_csv(create(&cfg.out.join("pc1_loadings.csv"))?)
}

fn read_visual(path: &Path) -> Result<HashMap<String, f64>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header = r.headers()?.clone();
    let find = |c: &str| {
        header
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::schema(path.display().to_string(), format!("missing column `{c}`")))
    };
    let (id, z) = (find("nft_id")?, find(VISUAL)?);
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec?;
        let v: f64 = rec[z]
            .parse()
            .map_err(|_| Error::schema(path.display().to_string(), format!("bad value `{}`", &rec[z])))?;
        out.insert(rec[id].to_string(), v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MergeReport {
    pub transactions: usize,
    pub rejected_transactions: usize,
    pub rejected_market_rows: usize,
    pub missing_market_date: usize,
    pub no_discourse_panel: usize,
    pub no_panel_row: usize,
    pub missing_visual: usize,
    pub rows: usize,
}

/// Joins market controls, assigns trade bins per collection using the panel's
/// realized bin count, merges panel columns and the visual index.
pub fn build_estimation_table(
    txs: &[ingest::Transaction],
    market: &[ingest::MarketSeriesRow],
    panel: &BinPanel,
    visual: &HashMap<String, f64>,
) -> Result<(EstimationTable, MergeReport)> {
    let mut report = MergeReport { transactions: txs.len(), ..MergeReport::default() };
    let joined = ingest::join_market_controls(txs, market)?;
    report.missing_market_date = joined.excluded.len();
    let counts = panel.bin_counts();
    let mut by_collection: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, j) in joined.rows.iter().enumerate() {
        by_collection.entry(j.tx.collection_code.as_str()).or_default().push(i);
    }
    let mut bin_of = vec![None; joined.rows.len()];
    for (code, rows) in &by_collection {
        let Some(&n_bins) = counts.get(*code) else {
            report.no_discourse_panel += rows.len();
            continue;
        };
        let dates: Vec<_> = rows.iter().map(|&i| joined.rows[i].tx.trade_date).collect();
        let ids: Vec<&str> = rows.iter().map(|&i| joined.rows[i].tx.tx_id.as_str()).collect();
        for (&i, b) in rows.iter().zip(assign_trade_bins(&dates, &ids, n_bins)?) {
            bin_of[i] = Some(b);
        }
    }
    let mut table = EstimationTable::default();
    let mut y = Vec::new();
    let mut controls: Vec<Vec<Option<f64>>> = vec![Vec::new(); MARKET_CONTROLS.len()];
    let mut vis = Vec::new();
    for (j, b) in joined.rows.iter().zip(&bin_of) {
        let Some(b) = b else { continue };
        table.tx_id.push(j.tx.tx_id.clone());
        table.nft_id.push(j.tx.nft_id.clone());
        table.collection_code.push(j.tx.collection_code.clone());
        table.trade_date.push(j.tx.trade_date);
        table.trade_bin.push(*b);
        y.push(Some(j.tx.y));
        for (col, v) in controls.iter_mut().zip(j.controls) {
            col.push(Some(v));
        }
        let v = visual.get(&j.tx.nft_id).copied();
        if v.is_none() {
            report.missing_visual += 1;
        }
        vis.push(v);
    }
    let mut numeric = NumericColumns::default();
    numeric.set(RESPONSE, y);
    for (name, col) in MARKET_CONTROLS.iter().zip(controls) {
        numeric.set(name, col);
    }
    numeric.set(VISUAL, vis);
    table.numeric = numeric;
    let mut cols: Vec<String> = vec![LOG_ATTENTION.into(), NEGSHARE_RW.into(), POLARITY_RW.into()];
    cols.extend(panel_signal_columns());
    let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let merged = merge_bins_to_trades(&table, panel, &refs)?;
    report.no_panel_row = merged.excluded_no_panel_row;
    report.rows = merged.table.len();
    Ok((merged.table, report))
}

fn merge_stage(cfg: &RunConfig) -> Result<()> {
    let txs = ingest::parse_transactions(&cfg.transactions)?;
    let market = ingest::parse_market(&cfg.market)?;
    let panel = BinPanel::read_csv(open(&cfg.out.join("bin_panel.csv"))?, "bin_panel.csv")?;
    let visual = read_visual(&cfg.out.join("visual_index.csv"))?;
    let (table, mut report) = build_estimation_table(&txs.rows, &market.rows, &panel, &visual)?;
    report.rejected_transactions = txs.rejects.len();
    report.rejected_market_rows = market.rejects.len();
    table.write_csv(create(&cfg.out.join("estimation_table.csv"))?)?;
    let mut rejects = txs.rejects.clone();
    rejects.extend(market.rejects.iter().cloned());
    ingest::write_rejects(create(&cfg.out.join("input_rejects.csv"))?, &rejects)?;
    audit_lags(&table, &AUDIT_PAIRS)?.write_csv(create(&cfg.out.join("lag_audit.csv"))?)?;
    let value = serde_json::to_value(&report)?;
    let rows: Vec<(String, String)> = value
        .as_object()
        .expect("struct serializes to an object")
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect();
    write_pairs(&cfg.out.join("merge_report.csv"), ["metric", "value"], &rows)
}

/// Output name of each estimator's coefficient table.
pub fn table_name(e: Estimator) -> &'static str {
    match e {
        Estimator::MixedMundlak => "table2",
        Estimator::MixedDirect => "table3",
        Estimator::OlsCluster => "table4",
    }
}

pub fn model_spec(cfg: &RunConfig, estimator: Estimator, window: Window) -> ModelSpec {
    let mut spec = ModelSpec::new(estimator, window);
    spec.reference_collection = cfg.reference_collection.clone();
    spec
}

fn mixed_summary(name: &str, d: &DesignMatrix, fit: &MixedFit, out: &mut Vec<[String; 3]>) {
    let mut push = |k: &str, v: String| out.push([name.to_string(), k.to_string(), v]);
    push("estimator", d.estimator.as_str().into());
    push("window", d.window.suffix().into());
    push("n_input", d.n_input.to_string());
    push("n_incomplete", d.n_incomplete.to_string());
    push("n_obs", fit.n_obs.to_string());
    push("loglik", fit.loglik.to_string());
    push("scale", fit.sigma2.to_string());
    push("converged", fit.converged.to_string());
    push("iterations", fit.iterations.to_string());
    push("reference_month", d.reference_month.clone().unwrap_or_default());
    for g in &fit.groups {
        push(
            &format!("groups[{}]", g.term),
            format!("n={} min={} max={} mean={}", g.n_levels, g.min_size, g.max_size, g.mean_size),
        );
    }
}

fn estimate_stage(cfg: &RunConfig) -> Result<()> {
    let table = EstimationTable::read_csv(open(&cfg.out.join("estimation_table.csv"))?, "estimation_table.csv")?;
    let (table, filter) = apply_filters(&table, &cfg.filters())?;
    let mut summary: Vec<[String; 3]> = Vec::new();
    let fv = serde_json::to_value(&filter)?;
    for (k, v) in fv.as_object().expect("object") {
        summary.push(["filters".into(), k.clone(), v.to_string()]);
    }
    for &est in &cfg.estimators {
        let name = table_name(est);
        let spec = model_spec(cfg, est, cfg.window);
        let design = assemble_design(&spec, &table)?;
        if cfg.dump_design {
            design.write_csv(create(&cfg.out.join(format!("design_{name}.csv")))?)?;
        }
        match est {
            Estimator::OlsCluster => {
                let fit = fit_benchmark(&design)?;
                write_coefficients(&fit.coefficients, create(&cfg.out.join(format!("{name}.csv")))?)?;
                let mut push = |k: &str, v: String| summary.push([name.to_string(), k.to_string(), v]);
                push("estimator", est.as_str().into());
                push("window", design.window.suffix().into());
                push("n_input", design.n_input.to_string());
                push("n_incomplete", design.n_incomplete.to_string());
                push("n_obs", fit.n_obs.to_string());
                push("n_clusters", fit.n_clusters.to_string());
                push("r2", fit.r2.to_string());
                push("adj_r2", fit.adj_r2.to_string());
                push("loglik", fit.loglik.to_string());
                push("reference_collection", design.reference_collection.clone().unwrap_or_default());
                push("reference_month", design.reference_month.clone().unwrap_or_default());
                push("aliased_columns", fit.dropped.join(";"));
                push("heterogeneity_excluded", design.heterogeneity_excluded.join(";"));
            }
            _ => {
                let opts = MixedOptions { seed: cfg.seed, ..MixedOptions::default() };
                let fit = fit_ml(&design, &spec.random, &opts)?;
                write_coefficients(&fixed_effect_inference(&fit), create(&cfg.out.join(format!("{name}.csv")))?)?;
                fit.write_variance_components(create(&cfg.out.join(format!("variance_components_{name}.csv")))?)?;
                mixed_summary(name, &design, &fit, &mut summary);
            }
        }
    }
    let path = cfg.out.join("fit_summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["table", "key", "value"])?;
    for row in &summary {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<()> {
    log::info!("stage {}", stage.as_str());
    let r = match stage {
        Stage::Text => text_stage(cfg),
        Stage::Panel => panel_stage(cfg),
        Stage::Visual => visual_stage(cfg),
        Stage::Merge => merge_stage(cfg),
        Stage::Estimate => estimate_stage(cfg),
    };
    tag(stage, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub stages: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    /// Hash over the listed file hashes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.files {
            h.update(format!("{} {}\n", f.path, f.sha256).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn hash_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else if p != root.join(MANIFEST) {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` (except the manifest itself) and writes `manifest.json`.
pub fn write_manifest(dir: &Path, cfg: &RunConfig, stages: &[Stage]) -> Result<Manifest> {
    let mut paths = Vec::new();
    list_files(dir, dir, &mut paths)?;
    let mut files = Vec::new();
    for p in paths {
        let (sha256, bytes) = hash_file(&p)?;
        let rel = p.strip_prefix(dir).expect("listed under dir");
        let path = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/");
        files.push(ManifestEntry { path, sha256, bytes });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg.canonical(),
        stages: stages.iter().map(|s| s.as_str().to_string()).collect(),
        files,
    };
    let path = dir.join(MANIFEST);
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let f = open(&dir.join(MANIFEST))?;
    Ok(serde_json::from_reader(f)?)
}

/// Files whose content no longer matches the manifest (or that disappeared).
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let m = read_manifest(dir)?;
    let mut bad = Vec::new();
    for f in &m.files {
        match hash_file(&dir.join(&f.path)) {
            Ok((h, _)) if h == f.sha256 => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}

/// Runs the selected stages in order and refreshes the manifest.
pub fn run_pipeline(cfg: &RunConfig, selection: StageSelection) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let stages = selection.stages();
    for &s in &stages {
        run_stage(cfg, s)?;
    }
    write_manifest(&cfg.out, cfg, &stages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub id: &'static str,
    pub heading: &'static str,
    pub window: Window,
    pub sensitivity: Sensitivity,
}

/// Table 7 sample variants (S0–S3, baseline window) then Table 6 windows (A–C, full sample).
pub fn robustness_variants(cfg: &RunConfig) -> Vec<Variant> {
    let mut v: Vec<Variant> = Sensitivity::ALL
        .into_iter()
        .map(|s| Variant { id: s.as_str(), heading: s.label(), window: cfg.window, sensitivity: s })
        .collect();
    for (id, w) in [("a", Window::Lag1), ("b", Window::Lag2), ("c", Window::Roll3)] {
        v.push(Variant { id, heading: w.heading(), window: w, sensitivity: Sensitivity::S0 });
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub filters: FilterReport,
    pub outcome: std::result::Result<(DesignMatrix, MixedFit), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub results: Vec<VariantResult>,
}

impl RobustnessReport {
    pub fn result(&self, id: &str) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant.id == id)
    }
}

fn fit_variant(cfg: &RunConfig, table: &EstimationTable, v: Variant) -> VariantResult {
    let filters = cfg.filters_for(v.sensitivity);
    let (filtered, report) = match apply_filters(table, &filters) {
        Ok(x) => x,
        Err(e) => return VariantResult { variant: v, filters: FilterReport::default(), outcome: Err(e.to_string()) },
    };
    let spec = model_spec(cfg, Estimator::MixedMundlak, v.window);
    let outcome = assemble_design(&spec, &filtered)
        .and_then(|d| {
            let fit = fit_ml(&d, &spec.random, &MixedOptions { seed: cfg.seed, ..MixedOptions::default() })?;
            Ok((d, fit))
        })
        .map_err(|e| e.to_string());
    VariantResult { variant: v, filters: report, outcome }
}

fn write_grid(path: &Path, results: &[&VariantResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["signal".to_string(), "component".to_string()];
    for r in results {
        for k in ["coef", "se", "p"] {
            header.push(format!("{}_{k}", r.variant.id));
        }
    }
    w.write_record(&header)?;
    for (stem, _) in SIGNALS {
        for component in ["between", "within"] {
            let mut rec = vec![stem.to_string(), component.to_string()];
            for r in results {
                let cell = r.outcome.as_ref().ok().and_then(|(d, fit)| {
                    let base = windowed_name(stem, d.window);
                    let name = if component == "between" { between_name(&base) } else { within_name(&base) };
                    fixed_effect_inference(fit).into_iter().find(|row| row.variable == name)
                });
                match cell {
                    Some(row) => {
                        rec.push(format_number(row.coef));
                        rec.push(if row.se_valid { format_number(row.se) } else { String::new() });
                        rec.push(if row.p.is_finite() { format_number(row.p) } else { String::new() });
                    }
                    None => rec.extend([String::new(), String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
    }
    let mut rec = vec!["n_obs".to_string(), String::new()];
    for r in results {
        let n = r.outcome.as_ref().map(|(d, _)| d.n_obs().to_string()).unwrap_or_default();
        rec.extend([n, String::new(), String::new()]);
    }
    w.write_record(&rec)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Refits the Mundlak model for S0–S3 and windows A–C in parallel. Needs the
/// merge stage output; per-variant failures are reported, not fatal.
pub fn run_robustness(cfg: &RunConfig) -> Result<RobustnessReport> {
    cfg.validate()?;
    let table_path = cfg.out.join("estimation_table.csv");
    if !table_path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run the pipeline through the merge stage first",
            table_path.display()
        )));
    }
    let table = EstimationTable::read_csv(open(&table_path)?, "estimation_table.csv")?;
    let variants = robustness_variants(cfg);
    let results: Vec<VariantResult> = variants.par_iter().map(|&v| fit_variant(cfg, &table, v)).collect();
    let dir = cfg.out.join(ROBUSTNESS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let samples: Vec<&VariantResult> = results.iter().filter(|r| r.variant.id.starts_with('s')).collect();
    let windows: Vec<&VariantResult> = results.iter().filter(|r| !r.variant.id.starts_with('s')).collect();
    write_grid(&dir.join("table7.csv"), &samples)?;
    write_grid(&dir.join("table6.csv"), &windows)?;
    let path = dir.join("robustness_fits.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record([
        "variant", "heading", "window", "sensitivity", "n_before", "dropped_collection", "trimmed", "below_min_items",
        "n_obs", "loglik", "converged", "status",
    ])?;
    for r in &results {
        let (n_obs, ll, conv, status) = match &r.outcome {
            Ok((d, f)) => (d.n_obs().to_string(), f.loglik.to_string(), f.converged.to_string(), "ok".to_string()),
            Err(e) => (String::new(), String::new(), String::new(), format!("error: {e}")),
        };
        w.write_record([
            r.variant.id.to_string(),
            r.variant.heading.to_string(),
            r.variant.window.suffix().to_string(),
            r.variant.sensitivity.as_str().to_string(),
            r.filters.n_before.to_string(),
            r.filters.dropped_collection.clone().unwrap_or_default(),
            r.filters.trimmed.to_string(),
            r.filters.below_min_items.to_string(),
            n_obs,
            ll,
            conv,
            status,
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let manifest = read_manifest(&cfg.out).map(|m| m.stages).unwrap_or_default();
    let stages: Vec<Stage> = manifest.iter().filter_map(|s| Stage::from_name(s)).collect();
    write_manifest(&cfg.out, cfg, &stages)?;
    Ok(RobustnessReport { results })
}
