//! Estimation designs: Mundlak within/between split on the bin panel, sample
//! z-scores, month dummies, polarity heterogeneity columns and the assembled
//! fixed-effect matrix with its grouping factors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::Datelike;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binning::{windowed_name, BinPanel, Window, SIGNALS};
use crate::error::{Error, Result};
use crate::ingest::MARKET_CONTROLS;
use crate::mixedmodel::{GroupFactor, RandomStructure, RandomTerm};
use crate::stats;
use crate::table::EstimationTable;

pub const RESPONSE: &str = "y";
pub const INTERCEPT: &str = "Intercept";
pub const VISUAL: &str = "visual_index_explicit_z";
pub const POL_BASELINE: &str = "pol_within_z";
pub const DEFAULT_MIN_WITHIN_SD: f64 = 1e-6;

pub fn within_name(var: &str) -> String {
    format!("{var}_within")
}

pub fn between_name(var: &str) -> String {
    format!("{var}_bar")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MundlakComponent {
    pub variable: String,
    /// Collection mean over bins where the variable is observed.
    pub between: BTreeMap<String, f64>,
    /// Panel-aligned deviation from the collection mean.
    pub within: Vec<Option<f64>>,
    /// Collections with no observed bin for this variable.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MundlakDecomposition {
    pub components: Vec<MundlakComponent>,
}

/// Splits each variable into its unweighted collection mean over observed bins
/// and the deviation from it.
pub fn mundlak_decompose(panel: &BinPanel, variables: &[&str]) -> Result<MundlakDecomposition> {
    let groups = panel.collections();
    let mut components = Vec::with_capacity(variables.len());
    for &var in variables {
        let x = panel.column(var)?;
        let mut comp = MundlakComponent {
            variable: var.to_string(),
            between: BTreeMap::new(),
            within: vec![None; panel.len()],
            excluded: Vec::new(),
        };
        for (c, range) in &groups {
            let obs: Vec<f64> = x[range.clone()].iter().flatten().copied().collect();
            let Some(m) = stats::mean(&obs) else {
                log::warn!("{var}: collection {c} has no observed bins; excluded from the decomposition");
                comp.excluded.push(c.clone());
                continue;
            };
            comp.between.insert(c.clone(), m);
            for r in range.clone() {
                comp.within[r] = x[r].map(|v| v - m);
            }
        }
        components.push(comp);
    }
    Ok(MundlakDecomposition { components })
}

impl MundlakDecomposition {
    /// Writes `{var}_within` and `{var}_bar` columns into the panel. The between
    /// column is filled on every bin of a collection (missing where excluded).
    pub fn apply(&self, panel: &mut BinPanel) -> Result<()> {
        for comp in &self.components {
            let bar = panel.collection_code.iter().map(|c| comp.between.get(c).copied()).collect();
            panel.set_column(&within_name(&comp.variable), comp.within.clone())?;
            panel.set_column(&between_name(&comp.variable), bar)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardization {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

/// Z-scores the named columns in place (sample sd). A zero or undefined sd is fatal.
pub fn standardize_regressors(columns: &mut [Vec<f64>], names: &[String]) -> Result<Vec<Standardization>> {
    if columns.len() != names.len() {
        return Err(Error::InvalidInput("one name per column required".into()));
    }
    let mut records = Vec::with_capacity(columns.len());
    for (col, name) in columns.iter_mut().zip(names) {
        let mean = stats::mean(col).ok_or_else(|| Error::EmptySample(format!("column `{name}` is empty")))?;
        let sd = stats::sample_sd(col).unwrap_or(0.0);
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::DegenerateColumn(name.clone()));
        }
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        records.push(Standardization { column: name.clone(), mean, sd });
    }
    Ok(records)
}

/// Maps coefficients on standardized regressors back to the raw scale.
/// `names[0]` must be the intercept; columns without a record are unscaled.
pub fn destandardize(beta: &[f64], names: &[String], records: &[Standardization]) -> Vec<f64> {
    let mut out = beta.to_vec();
    let mut shift = 0.0;
    for (j, name) in names.iter().enumerate() {
        if let Some(rec) = records.iter().find(|r| &r.column == name) {
            out[j] = beta[j] / rec.sd;
            shift += beta[j] * rec.mean / rec.sd;
        }
    }
    if !out.is_empty() {
        out[0] -= shift;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonthDummies {
    pub reference: Option<String>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

fn month_key(d: chrono::NaiveDate) -> String {
    format!("{:04}-{:02}", d.year(), d.month())
}

/// One indicator per observed calendar month except the earliest.
pub fn build_month_dummies(dates: &[chrono::NaiveDate]) -> MonthDummies {
    let months: BTreeSet<String> = dates.iter().map(|&d| month_key(d)).collect();
    let mut it = months.into_iter();
    let reference = it.next();
    let rest: Vec<String> = it.collect();
    let keys: Vec<String> = dates.iter().map(|&d| month_key(d)).collect();
    MonthDummies {
        reference,
        names: rest.iter().map(|m| format!("month[{m}]")).collect(),
        columns: rest
            .iter()
            .map(|m| keys.iter().map(|k| if k == m { 1.0 } else { 0.0 }).collect())
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    MixedMundlak,
    MixedDirect,
    OlsCluster,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "mixed-mundlak" => Ok(Estimator::MixedMundlak),
            "mixed-direct" => Ok(Estimator::MixedDirect),
            "ols-cluster" => Ok(Estimator::OlsCluster),
            other => Err(Error::InvalidInput(format!("unknown estimator `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::MixedMundlak => "mixed-mundlak",
            Estimator::MixedDirect => "mixed-direct",
            Estimator::OlsCluster => "ols-cluster",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub estimator: Estimator,
    pub window: Window,
    pub response: String,
    pub market: Vec<String>,
    pub visual: String,
    /// Discourse regressors as read from the table (for the OLS benchmark the
    /// polarity within column is handled separately).
    pub reddit: Vec<String>,
    pub month_dummies: bool,
    pub random: RandomStructure,
    /// Reference collection for the benchmark; `None` picks the one with most trades.
    pub reference_collection: Option<String>,
    pub min_within_sd: f64,
}

impl ModelSpec {
    pub fn new(estimator: Estimator, window: Window) -> Self {
        let w = |stem: &str| windowed_name(stem, window);
        let (reddit, random) = match estimator {
            Estimator::MixedMundlak => {
                let mut cols = Vec::new();
                for (stem, _) in SIGNALS {
                    cols.push(within_name(&w(stem)));
                    cols.push(between_name(&w(stem)));
                }
                let slope = within_name(&w("polarity_rw"));
                (
                    cols,
                    RandomStructure::new(vec![
                        RandomTerm::intercept(GroupFactor::Nft),
                        RandomTerm::intercept(GroupFactor::Collection),
                        RandomTerm::intercept(GroupFactor::CollectionBin),
                        RandomTerm::slope(GroupFactor::Collection, &slope),
                    ]),
                )
            }
            Estimator::MixedDirect => (
                SIGNALS.iter().map(|(stem, _)| w(stem)).collect(),
                RandomStructure::new(vec![
                    RandomTerm::intercept(GroupFactor::Nft),
                    RandomTerm::intercept(GroupFactor::Collection),
                    RandomTerm::slope(GroupFactor::Collection, &w("polarity_rw")),
                ]),
            ),
            Estimator::OlsCluster => (
                vec![w("attn"), w("negshare_rw")],
                RandomStructure::new(Vec::new()),
            ),
        };
        ModelSpec {
            estimator,
            window,
            response: RESPONSE.to_string(),
            market: MARKET_CONTROLS.iter().map(|s| s.to_string()).collect(),
            visual: VISUAL.to_string(),
            reddit,
            month_dummies: true,
            random,
            reference_collection: None,
            min_within_sd: DEFAULT_MIN_WITHIN_SD,
        }
    }

    /// Demeaned polarity column used by the benchmark's heterogeneity block.
    pub fn polarity_within(&self) -> String {
        within_name(&windowed_name("polarity_rw", self.window))
    }

    /// Table columns that must be present and complete.
    pub fn required_columns(&self) -> Vec<String> {
        let mut cols = vec![self.response.clone()];
        cols.extend(self.market.iter().cloned());
        cols.push(self.visual.clone());
        cols.extend(self.reddit.iter().cloned());
        if self.estimator == Estimator::OlsCluster {
            cols.push(self.polarity_within());
        }
        for t in &self.random.terms {
            if let Some(c) = &t.covariate {
                if !cols.contains(c) {
                    cols.push(c.clone());
                }
            }
        }
        cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityColumns {
    pub baseline: Vec<f64>,
    pub baseline_record: Standardization,
    pub reference: String,
    /// `(collection, baseline x indicator)` for qualifying non-reference collections.
    pub deviations: Vec<(String, Vec<f64>)>,
    /// Collections below the within-variation threshold.
    pub excluded: Vec<String>,
}

/// Collection with the most rows; ties go to the smallest code.
pub fn largest_collection(collections: &[String]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in collections {
        *counts.entry(c).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
        .map(|(c, _)| c.to_string())
}

/// Baseline slope column (z-scored demeaned polarity) plus one interaction per
/// collection whose within sd reaches `min_within_sd`, excluding the reference.
pub fn polarity_heterogeneity_columns(
    within: &[f64],
    collections: &[String],
    reference: &str,
    min_within_sd: f64,
) -> Result<HeterogeneityColumns> {
    let mut base = vec![within.to_vec()];
    let rec = standardize_regressors(&mut base, &[POL_BASELINE.to_string()])?.remove(0);
    let baseline = base.remove(0);
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in collections.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let mut deviations = Vec::new();
    let mut excluded = Vec::new();
    for (c, rows) in members {
        if c == reference {
            continue;
        }
        let vals: Vec<f64> = rows.iter().map(|&i| within[i]).collect();
        if stats::sample_sd(&vals).unwrap_or(0.0) >= min_within_sd {
            let mut col = vec![0.0; within.len()];
            for &i in &rows {
                col[i] = baseline[i];
            }
            deviations.push((c.to_string(), col));
        } else {
            excluded.push(c.to_string());
        }
    }
    if deviations.is_empty() {
        log::warn!("no collection qualifies for a polarity slope deviation; baseline slope only");
    }
    Ok(HeterogeneityColumns { baseline, baseline_record: rec, reference: reference.to_string(), deviations, excluded })
}

/// Fixed-effect matrix, response and grouping factors for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub estimator: Estimator,
    pub window: Window,
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub columns: Vec<String>,
    pub tx_id: Vec<String>,
    pub nft: Vec<String>,
    pub collection: Vec<String>,
    pub collection_bin: Vec<String>,
    pub month: Vec<String>,
    /// Named covariates available to random slopes (standardized).
    pub covariates: BTreeMap<String, Vec<f64>>,
    pub standardization: Vec<Standardization>,
    pub reference_month: Option<String>,
    pub reference_collection: Option<String>,
    pub heterogeneity_excluded: Vec<String>,
    pub n_input: usize,
    pub n_incomplete: usize,
}

impl DesignMatrix {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn group(&self, f: GroupFactor) -> &[String] {
        match f {
            GroupFactor::Nft => &self.nft,
            GroupFactor::Collection => &self.collection,
            GroupFactor::CollectionBin | GroupFactor::Cluster => &self.collection_bin,
            GroupFactor::Month => &self.month,
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name).ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
        Ok(self.x.column(j).iter().copied().collect())
    }

    /// Covariate for a random slope: a fixed-effect column or a stored covariate.
    pub fn covariate(&self, name: &str) -> Result<Vec<f64>> {
        match self.covariates.get(name) {
            Some(v) => Ok(v.clone()),
            None => self.column(name),
        }
    }

    /// Debug dump: identifiers, groups, response and every fixed-effect column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["tx_id", "nft_id", "collection_code", "collection_bin", "month", "y"];
        header.extend(self.columns.iter().map(String::as_str));
        w.write_record(&header)?;
        for i in 0..self.n_obs() {
            let mut rec = vec![
                self.tx_id[i].clone(),
                self.nft[i].clone(),
                self.collection[i].clone(),
                self.collection_bin[i].clone(),
                self.month[i].clone(),
                self.y[i].to_string(),
            ];
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("design matrix", e))?;
        Ok(())
    }
}

/// Complete-case filter, standardization and column assembly. Column order:
/// intercept, market controls, visual control, discourse terms, (benchmark:
/// baseline slope and deviations), month dummies, (benchmark: collection dummies).
pub fn assemble_design(spec: &ModelSpec, table: &EstimationTable) -> Result<DesignMatrix> {
    let required = spec.required_columns();
    let cols: Vec<&[Option<f64>]> = required.iter().map(|c| table.column(c)).collect::<Result<_>>()?;
    let keep: Vec<usize> = (0..table.len())
        .filter(|&r| {
            !table.nft_id[r].is_empty()
                && !table.collection_code[r].is_empty()
                && cols.iter().all(|c| c[r].is_some_and(f64::is_finite))
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySample(format!(
            "{} of {} rows incomplete for {}",
            table.len(),
            table.len(),
            spec.estimator.as_str()
        )));
    }
    let value = |name: &str| -> Vec<f64> {
        let k = required.iter().position(|c| c == name).expect("required column");
        keep.iter().map(|&r| cols[k][r].unwrap()).collect()
    };
    let y = value(&spec.response);
    let collection: Vec<String> = keep.iter().map(|&r| table.collection_code[r].clone()).collect();

    let mut scaled_names: Vec<String> = spec.market.clone();
    scaled_names.push(spec.visual.clone());
    scaled_names.extend(spec.reddit.iter().cloned());
    let mut scaled: Vec<Vec<f64>> = scaled_names.iter().map(|n| value(n)).collect();
    let mut standardization = standardize_regressors(&mut scaled, &scaled_names)?;

    let mut names = vec![INTERCEPT.to_string()];
    let mut data: Vec<Vec<f64>> = vec![vec![1.0; keep.len()]];
    names.extend(scaled_names.iter().cloned());
    data.extend(scaled);

    let mut covariates = BTreeMap::new();
    let mut reference_collection = None;
    let mut heterogeneity_excluded = Vec::new();
    if spec.estimator == Estimator::OlsCluster {
        let reference = match &spec.reference_collection {
            Some(r) => r.clone(),
            None => largest_collection(&collection).expect("non-empty sample"),
        };
        let het = polarity_heterogeneity_columns(&value(&spec.polarity_within()), &collection, &reference, spec.min_within_sd)?;
        names.push(POL_BASELINE.to_string());
        data.push(het.baseline);
        standardization.push(het.baseline_record);
        for (c, col) in het.deviations {
            names.push(format!("pol_dev_{c}"));
            data.push(col);
        }
        heterogeneity_excluded = het.excluded;
        reference_collection = Some(reference);
    }
    for t in &spec.random.terms {
        if let Some(c) = &t.covariate {
            if !names.contains(c) {
                let mut v = vec![value(c)];
                let rec = standardize_regressors(&mut v, std::slice::from_ref(c))?;
                standardization.extend(rec);
                covariates.insert(c.clone(), v.remove(0));
            }
        }
    }

    let dates: Vec<chrono::NaiveDate> = keep.iter().map(|&r| table.trade_date[r]).collect();
    let months = build_month_dummies(&dates);
    if spec.month_dummies {
        names.extend(months.names.iter().cloned());
        data.extend(months.columns.iter().cloned());
    }
    if let Some(reference) = &reference_collection {
        let levels: BTreeSet<&String> = collection.iter().collect();
        for c in levels.into_iter().filter(|c| *c != reference) {
            names.push(format!("collection[{c}]"));
            data.push(collection.iter().map(|x| if x == c { 1.0 } else { 0.0 }).collect());
        }
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(Error::Contract(format!("duplicate design column `{dup}`")));
    }

    let n = keep.len();
    let x = DMatrix::from_fn(n, names.len(), |i, j| data[j][i]);
    Ok(DesignMatrix {
        estimator: spec.estimator,
        window: spec.window,
        y,
        x,
        columns: names,
        tx_id: keep.iter().map(|&r| table.tx_id[r].clone()).collect(),
        nft: keep.iter().map(|&r| table.nft_id[r].clone()).collect(),
        collection_bin: keep.iter().map(|&r| format!("{}#{}", table.collection_code[r], table.trade_bin[r])).collect(),
        month: dates.iter().map(|&d| month_key(d)).collect(),
        collection,
        covariates,
        standardization,
        reference_month: months.reference,
        reference_collection,
        heterogeneity_excluded,
        n_input: table.len(),
        n_incomplete: table.len() - n,
    })
}
