//! Pseudo-time bins for discourse and trades, bin aggregation, lags and windows,
//! the bin-to-trade merge and the lag-construction audit.
//!
//! Quantile rule: for N sorted items and B target bins, item at 0-based position
//! `r` goes to `floor(r * B / N)`; items with equal keys are then moved to the bin
//! of the first member of their tie group and bin indices are compacted to
//! `0..realized`. Trades sort by `(trade_date, tx_id)`, which is a total order,
//! so trade bins never collapse and match the discourse panel's bin count
//! whenever a collection has at least that many trades.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::table::{fmt_opt, parse_opt, EstimationTable, NumericColumns};
use crate::textmetrics::{DiscourseItem, Label};

pub const DEFAULT_TARGET_BINS: usize = 60;
/// Lag audit flag threshold.
pub const AUDIT_TOLERANCE: f64 = 1e-10;

pub const LOG_ATTENTION: &str = "log_attention";
pub const SENTIMENT_POLARITY: &str = "sentiment_polarity";
pub const SENTIMENT_SUBJECTIVITY: &str = "sentiment_subjectivity";
pub const IS_NEG: &str = "is_neg";
pub const IS_POS: &str = "is_pos";
pub const POLARITY_RW: &str = "polarity_rw";
pub const NEGSHARE_RW: &str = "negshare_rw";

/// Thread id from a `/comments/<id>/` URL segment.
pub fn extract_thread_id(url: &str) -> Option<&str> {
    let rest = &url[url.find("/comments/")? + "/comments/".len()..];
    let id = rest.split(['/', '?', '#']).next()?;
    (!id.is_empty()).then_some(id)
}

/// Positional base-36 value of `[0-9a-z]+` (case-insensitive).
pub fn base36_decode(id: &str) -> Result<u64> {
    if id.is_empty() {
        return Err(Error::InvalidInput("empty base-36 string".into()));
    }
    let mut acc: u64 = 0;
    for c in id.chars() {
        let d = c
            .to_digit(36)
            .ok_or_else(|| Error::InvalidInput(format!("invalid base-36 character `{c}` in `{id}`")))?;
        acc = acc
            .checked_mul(36)
            .and_then(|a| a.checked_add(d as u64))
            .ok_or_else(|| Error::InvalidInput(format!("base-36 value `{id}` overflows u64")))?;
    }
    Ok(acc)
}

/// Rank-based quantile bins for keys sorted ascending. Returns one compacted
/// bin index per key; the realized bin count is `max + 1 <= target_bins`.
pub fn assign_quantile_bins<K: Ord>(keys: &[K], target_bins: usize) -> Result<Vec<usize>> {
    if target_bins == 0 {
        return Err(Error::InvalidInput("target_bins must be at least 1".into()));
    }
    if keys.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("quantile binning requires sorted keys".into()));
    }
    let n = keys.len();
    let mut bins = Vec::with_capacity(n);
    for (r, key) in keys.iter().enumerate() {
        let raw = r * target_bins / n;
        let b = if r > 0 && keys[r - 1] == *key { bins[r - 1] } else { raw };
        bins.push(b);
    }
    // compact
    let mut next = 0;
    let mut last_raw = None;
    for b in bins.iter_mut() {
        if last_raw != Some(*b) {
            if last_raw.is_some() {
                next += 1;
            }
            last_raw = Some(*b);
        }
        *b = next;
    }
    Ok(bins)
}

/// Bins a corpus sorted by `(collection_code, item_key)`, each collection independently.
pub fn bin_corpus(items: &[DiscourseItem], target_bins: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(items.len());
    let mut start = 0;
    while start < items.len() {
        let c = &items[start].collection_code;
        let end = start + items[start..].iter().take_while(|i| &i.collection_code == c).count();
        let keys: Vec<u64> = items[start..end].iter().map(|i| i.item_key).collect();
        out.extend(assign_quantile_bins(&keys, target_bins)?);
        start = end;
    }
    if items
        .windows(2)
        .any(|w| (&w[0].collection_code, w[0].item_key) > (&w[1].collection_code, w[1].item_key))
    {
        return Err(Error::InvalidInput("corpus must be sorted by (collection, item_key)".into()));
    }
    Ok(out)
}

/// Collection x bin panel of discourse aggregates. Rows are sorted by
/// `(collection_code, bin_index)` and bins are contiguous from 0 per collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinPanel {
    pub collection_code: Vec<String>,
    pub bin_index: Vec<usize>,
    pub n_items: Vec<usize>,
    pub columns: NumericColumns,
}

impl BinPanel {
    pub fn len(&self) -> usize {
        self.collection_code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collection_code.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<&[Option<f64>]> {
        if name == "n_items" {
            return Err(Error::InvalidInput("n_items is an integer column".into()));
        }
        self.columns.get(name)
    }

    pub fn set_column(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidInput(format!("column `{name}` length mismatch")));
        }
        self.columns.set(name, values);
        Ok(())
    }

    /// Row ranges of each collection, in panel order.
    pub fn collections(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let c = &self.collection_code[start];
            let end = start + self.collection_code[start..].iter().take_while(|x| *x == c).count();
            out.push((c.clone(), start..end));
            start = end;
        }
        out
    }

    /// Realized bin count per collection.
    pub fn bin_counts(&self) -> BTreeMap<String, usize> {
        self.collections().into_iter().map(|(c, r)| (c, r.len())).collect()
    }

    pub fn row_index(&self) -> HashMap<(String, usize), usize> {
        (0..self.len())
            .map(|r| ((self.collection_code[r].clone(), self.bin_index[r]), r))
            .collect()
    }

    /// Checks ordering and contiguity invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (c, range) in self.collections() {
            if !seen.insert(c.clone()) {
                return Err(Error::InvalidInput(format!("collection `{c}` is not contiguous in the panel")));
            }
            for (k, r) in range.enumerate() {
                if self.bin_index[r] != k {
                    return Err(Error::InvalidInput(format!("collection `{c}`: bins not contiguous from 0")));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["collection_code", "bin_index", "n_items"];
        header.extend(self.columns.names().iter().map(String::as_str));
        w.write_record(&header)?;
        let cols: Vec<&[Option<f64>]> = self.columns.iter().map(|(_, c)| c).collect();
        for r in 0..self.len() {
            let mut rec = vec![
                self.collection_code[r].clone(),
                self.bin_index[r].to_string(),
                self.n_items[r].to_string(),
            ];
            rec.extend(cols.iter().map(|c| fmt_opt(c[r])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("bin panel", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, name: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[..3] != ["collection_code", "bin_index", "n_items"] {
            return Err(Error::schema(name, "expected leading columns collection_code,bin_index,n_items"));
        }
        let mut p = BinPanel::default();
        let mut data: Vec<Vec<Option<f64>>> = vec![Vec::new(); header.len() - 3];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |m: String| Error::schema(name, format!("row {}: {m}", i + 1));
            p.collection_code.push(rec[0].to_string());
            p.bin_index.push(rec[1].parse().map_err(|_| bad("bad bin_index".into()))?);
            p.n_items.push(rec[2].parse().map_err(|_| bad("bad n_items".into()))?);
            for (k, col) in data.iter_mut().enumerate() {
                col.push(parse_opt(&rec[3 + k]).map_err(bad)?);
            }
        }
        for (n, col) in header[3..].iter().zip(data) {
            p.columns.set(n, col);
        }
        p.validate()?;
        Ok(p)
    }
}

/// Aggregates binned items into collection x bin cells. Bins between 0 and the
/// collection's largest bin that received no items become empty cells.
pub fn aggregate_bin_cells(items: &[DiscourseItem], bins: &[usize]) -> Result<BinPanel> {
    if items.len() != bins.len() {
        return Err(Error::InvalidInput("one bin index per item required".into()));
    }
    #[derive(Default, Clone)]
    struct Acc {
        n: usize,
        pol: f64,
        subj: f64,
        neg: usize,
        pos: usize,
    }
    let mut cells: BTreeMap<&str, Vec<Acc>> = BTreeMap::new();
    for (item, &b) in items.iter().zip(bins) {
        let v = cells.entry(item.collection_code.as_str()).or_default();
        if v.len() <= b {
            v.resize(b + 1, Acc::default());
        }
        let a = &mut v[b];
        a.n += 1;
        a.pol += item.polarity;
        a.subj += item.subjectivity;
        match item.label {
            Label::Negative => a.neg += 1,
            Label::Positive => a.pos += 1,
            Label::Neutral => {}
        }
    }
    let mut p = BinPanel::default();
    let (mut att, mut pol, mut subj, mut neg, mut pos) = (vec![], vec![], vec![], vec![], vec![]);
    for (c, accs) in cells {
        for (b, a) in accs.iter().enumerate() {
            p.collection_code.push(c.to_string());
            p.bin_index.push(b);
            p.n_items.push(a.n);
            att.push(Some((a.n as f64).ln_1p()));
            if a.n == 0 {
                pol.push(None);
                subj.push(None);
                neg.push(None);
                pos.push(None);
            } else {
                let n = a.n as f64;
                pol.push(Some(a.pol / n));
                subj.push(Some(a.subj / n));
                neg.push(Some(a.neg as f64 / n));
                pos.push(Some(a.pos as f64 / n));
            }
        }
    }
    p.columns.set(LOG_ATTENTION, att);
    p.columns.set(SENTIMENT_POLARITY, pol);
    p.columns.set(SENTIMENT_SUBJECTIVITY, subj);
    p.columns.set(IS_NEG, neg);
    p.columns.set(IS_POS, pos);
    Ok(p)
}

/// Within-collection shift: value at bin `b` is the base value at `b - k`.
pub fn lag_shift(panel: &BinPanel, variable: &str, k: usize) -> Result<Vec<Option<f64>>> {
    if k == 0 {
        return Err(Error::InvalidInput("lag must be positive".into()));
    }
    let base = panel.column(variable)?;
    let mut out = vec![None; panel.len()];
    for (_, range) in panel.collections() {
        for r in range.clone() {
            if r >= range.start + k {
                out[r] = base[r - k];
            }
        }
    }
    Ok(out)
}

/// Mean of the `window` bins strictly before `b` (shift by one, then roll).
/// Missing until `window` prior bins exist or when any of them is missing.
pub fn rolling_window_mean(panel: &BinPanel, variable: &str, window: usize) -> Result<Vec<Option<f64>>> {
    if window == 0 {
        return Err(Error::InvalidInput("window must be positive".into()));
    }
    let shifted = lag_shift(panel, variable, 1)?;
    let mut out = vec![None; panel.len()];
    for (_, range) in panel.collections() {
        for r in range.clone() {
            if r + 1 < range.start + window {
                continue;
            }
            let vals: Option<Vec<f64>> = shifted[r + 1 - window..=r].iter().copied().collect();
            out[r] = vals.map(|v| v.iter().sum::<f64>() / window as f64);
        }
    }
    Ok(out)
}

/// Discourse window used for the lagged regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Lag1,
    Lag2,
    Roll3,
}

impl Window {
    pub const ALL: [Window; 3] = [Window::Lag1, Window::Lag2, Window::Roll3];

    pub fn suffix(self) -> &'static str {
        match self {
            Window::Lag1 => "lag1",
            Window::Lag2 => "lag2",
            Window::Roll3 => "roll3",
        }
    }

    /// Column heading used in the alternative-window summary.
    pub fn heading(self) -> &'static str {
        match self {
            Window::Lag1 => "(A) Lag 1",
            Window::Lag2 => "(B) Lag 2",
            Window::Roll3 => "(C) Mean of (t-1,t-2,t-3)",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lag1" => Ok(Window::Lag1),
            "lag2" => Ok(Window::Lag2),
            "roll3" => Ok(Window::Roll3),
            other => Err(Error::InvalidInput(format!("unknown window `{other}`"))),
        }
    }

    pub fn apply(self, panel: &BinPanel, variable: &str) -> Result<Vec<Option<f64>>> {
        match self {
            Window::Lag1 => lag_shift(panel, variable, 1),
            Window::Lag2 => lag_shift(panel, variable, 2),
            Window::Roll3 => rolling_window_mean(panel, variable, 3),
        }
    }
}

/// The three discourse signals: (regressor stem, panel base column).
pub const SIGNALS: [(&str, &str); 3] = [
    ("attn", LOG_ATTENTION),
    ("negshare_rw", NEGSHARE_RW),
    ("polarity_rw", POLARITY_RW),
];

/// Name of a windowed signal column, e.g. `attn_lag1`.
pub fn windowed_name(stem: &str, window: Window) -> String {
    format!("{stem}_{}", window.suffix())
}

/// Appends `attn_*`, `negshare_rw_*`, `polarity_rw_*` for one window.
pub fn add_window_columns(panel: &mut BinPanel, window: Window) -> Result<()> {
    for (stem, base) in SIGNALS {
        let col = window.apply(panel, base)?;
        panel.set_column(&windowed_name(stem, window), col)?;
    }
    Ok(())
}

/// Quantile trade bins for one collection's trades, ordered by `(trade_date, tx_id)`.
/// Returns the bin of each input trade, in input order.
pub fn assign_trade_bins(dates: &[NaiveDate], tx_ids: &[&str], n_bins: usize) -> Result<Vec<usize>> {
    if dates.len() != tx_ids.len() {
        return Err(Error::InvalidInput("dates and tx_ids differ in length".into()));
    }
    if dates.is_empty() {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..dates.len()).collect();
    order.sort_by(|&a, &b| (dates[a], tx_ids[a]).cmp(&(dates[b], tx_ids[b])));
    let keys: Vec<(NaiveDate, &str)> = order.iter().map(|&i| (dates[i], tx_ids[i])).collect();
    let sorted_bins = assign_quantile_bins(&keys, n_bins)?;
    let mut out = vec![0; dates.len()];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = sorted_bins[pos];
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub table: EstimationTable,
    /// Trades whose `(collection, trade_bin)` had no panel row.
    pub excluded_no_panel_row: usize,
}

/// Many-to-one merge of panel columns (and `n_items`) onto trades by
/// `(collection_code, trade_bin)`.
pub fn merge_bins_to_trades(table: &EstimationTable, panel: &BinPanel, columns: &[&str]) -> Result<MergeOutcome> {
    let index = panel.row_index();
    let cols: Vec<&[Option<f64>]> = columns.iter().map(|c| panel.column(c)).collect::<Result<_>>()?;
    let mut keep = Vec::new();
    let mut panel_rows = Vec::new();
    for r in 0..table.len() {
        if let Some(&pr) = index.get(&(table.collection_code[r].clone(), table.trade_bin[r])) {
            keep.push(r);
            panel_rows.push(pr);
        }
    }
    let mut out = table.select(&keep);
    out.set_column("n_items", panel_rows.iter().map(|&pr| Some(panel.n_items[pr] as f64)).collect())?;
    for (name, col) in columns.iter().zip(cols) {
        out.set_column(name, panel_rows.iter().map(|&pr| col[pr]).collect())?;
    }
    Ok(MergeOutcome { excluded_no_panel_row: table.len() - keep.len(), table: out })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagAlignment {
    pub variable: String,
    pub bins_compared: usize,
    pub mae: f64,
    pub max_abs_error: f64,
    pub share_flagged: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinChronology {
    pub collection_code: String,
    pub n_bins: usize,
    pub adjacent_inversion_rate: f64,
    /// `None` when either bin index or median date has no variation.
    pub spearman_bin_date: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagAuditReport {
    pub alignment: Vec<LagAlignment>,
    pub chronology: Vec<BinChronology>,
}

/// Default `(base, stored lag)` pairs audited by the pipeline.
pub const AUDIT_PAIRS: [(&str, &str); 3] = [
    (LOG_ATTENTION, "attn_lag1"),
    (NEGSHARE_RW, "negshare_rw_lag1"),
    (POLARITY_RW, "polarity_rw_lag1"),
];

/// Audits lagged columns against the within-collection previous-bin shift of
/// their base series (cell means over collection x trade_bin), and checks that
/// trade bins are ordered by median trade date.
pub fn audit_lags(table: &EstimationTable, pairs: &[(&str, &str)]) -> Result<LagAuditReport> {
    // cell -> row ids
    let mut cells: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for r in 0..table.len() {
        cells.entry((table.collection_code[r].as_str(), table.trade_bin[r])).or_default().push(r);
    }
    let cell_mean = |col: &[Option<f64>], rows: &[usize]| -> Option<f64> {
        let vals: Vec<f64> = rows.iter().filter_map(|&r| col[r]).collect();
        stats::mean(&vals)
    };

    let mut alignment = Vec::new();
    for &(base_name, lag_name) in pairs {
        let base = table.column(base_name)?;
        let lag = table.column(lag_name)?;
        let base_means: BTreeMap<(&str, usize), Option<f64>> =
            cells.iter().map(|(k, rows)| (*k, cell_mean(base, rows))).collect();
        let (mut compared, mut flagged, mut abs_sum, mut abs_max, mut n_abs) = (0usize, 0usize, 0.0, 0.0f64, 0usize);
        for (&(c, b), rows) in &cells {
            let stored = cell_mean(lag, rows);
            let expected = if b == 0 {
                None
            } else {
                match base_means.get(&(c, b - 1)) {
                    Some(v) => *v,
                    // previous bin has no trades in the table: nothing to compare against
                    None => continue,
                }
            };
            match (stored, expected) {
                (None, None) => {}
                (Some(s), Some(e)) => {
                    compared += 1;
                    let d = (s - e).abs();
                    abs_sum += d;
                    abs_max = abs_max.max(d);
                    n_abs += 1;
                    if !(d <= AUDIT_TOLERANCE) {
                        flagged += 1;
                    }
                }
                _ => {
                    compared += 1;
                    flagged += 1;
                }
            }
        }
        alignment.push(LagAlignment {
            variable: lag_name.to_string(),
            bins_compared: compared,
            mae: if n_abs > 0 { abs_sum / n_abs as f64 } else { 0.0 },
            max_abs_error: abs_max,
            share_flagged: if compared > 0 { flagged as f64 / compared as f64 } else { 0.0 },
        });
    }

    let mut chronology = Vec::new();
    let mut by_collection: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for (&(c, b), rows) in &cells {
        let days: Vec<f64> = rows.iter().map(|&r| table.trade_date[r].num_days_from_ce() as f64).collect();
        let med = stats::median(&days).expect("cells are non-empty");
        by_collection.entry(c).or_default().push((b, med));
    }
    for (c, bins) in by_collection {
        let n = bins.len();
        let inversions = bins.windows(2).filter(|w| w[1].1 < w[0].1).count();
        let idx: Vec<f64> = bins.iter().map(|(b, _)| *b as f64).collect();
        let med: Vec<f64> = bins.iter().map(|(_, m)| *m).collect();
        chronology.push(BinChronology {
            collection_code: c.to_string(),
            n_bins: n,
            adjacent_inversion_rate: if n > 1 { inversions as f64 / (n - 1) as f64 } else { 0.0 },
            spearman_bin_date: stats::spearman(&idx, &med),
        });
    }
    Ok(LagAuditReport { alignment, chronology })
}

impl LagAuditReport {
    /// Writes both panels into one CSV with a `panel` discriminator column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "panel",
            "name",
            "bins_compared",
            "mae",
            "max_abs_error",
            "share_flagged",
            "n_bins",
            "adjacent_inversion_rate",
            "spearman_bin_date",
        ])?;
        for a in &self.alignment {
            w.write_record([
                "A".to_string(),
                a.variable.clone(),
                a.bins_compared.to_string(),
                format!("{:e}", a.mae),
                format!("{:e}", a.max_abs_error),
                format!("{:.4}", a.share_flagged),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for c in &self.chronology {
            w.write_record([
                "B".to_string(),
                c.collection_code.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                c.n_bins.to_string(),
                format!("{:.4}", c.adjacent_inversion_rate),
                c.spearman_bin_date.map(|s| format!("{s:.4}")).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("lag audit", e))?;
        Ok(())
    }
}
