//! Explicit-trait visual index: hue encoding, within-collection z-scores with
//! zero imputation, pooled PCA first component and its within-collection z.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats;
use crate::table::parse_opt;

pub const TRAITS: [&str; 11] = [
    "edge_bounding_box_area",
    "edge_range_y",
    "edge_range_x",
    "color_hue_dist_max_min",
    "composition_focus_lightness",
    "color_lightness_dist_max_min",
    "color_palette_mean_delta_e",
    "line_art_avg_thickness",
    "composition_focus_saturation",
    "line_art_prop_curved",
    "color_palette_saturation_std",
];
pub const HUE_COLUMN: &str = "most_frequent_hue";
/// Names of the 13 PCA inputs, in matrix column order.
pub const PCA_INPUTS: [&str; 13] = [
    TRAITS[0], TRAITS[1], TRAITS[2], TRAITS[3], TRAITS[4], TRAITS[5], TRAITS[6], TRAITS[7], TRAITS[8], TRAITS[9],
    TRAITS[10], "hue_sin", "hue_cos",
];
const HUE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatureRow {
    pub nft_id: String,
    pub collection_code: String,
    pub traits: [Option<f64>; 11],
    pub most_frequent_hue: Option<f64>,
}

impl TokenFeatureRow {
    /// The 13 PCA inputs (traits, then hue sine and cosine).
    pub fn inputs(&self) -> [Option<f64>; 13] {
        let (s, c) = match self.most_frequent_hue.map(encode_hue) {
            Some((s, c)) => (Some(s), Some(c)),
            None => (None, None),
        };
        let mut out = [None; 13];
        out[..11].copy_from_slice(&self.traits);
        out[11] = s;
        out[12] = c;
        out
    }
}

/// Degrees above 2π, fractions of a turn at or below 1, radians otherwise.
pub fn encode_hue(raw: f64) -> (f64, f64) {
    let rad = if raw > std::f64::consts::TAU + HUE_EPS {
        raw.to_radians()
    } else if raw <= 1.0 {
        raw * std::f64::consts::TAU
    } else {
        raw
    };
    rad.sin_cos()
}

/// Reads a feature CSV with `nft_id`, `collection_code`, the eleven traits and
/// `most_frequent_hue` (any column order, extra columns ignored, empty = missing).
pub fn parse_features(path: impl AsRef<Path>) -> Result<Vec<TokenFeatureRow>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_features_from_reader(f, &path.display().to_string())
}

pub fn parse_features_from_reader<R: Read>(reader: R, name: &str) -> Result<Vec<TokenFeatureRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |col: &str| {
        header
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| Error::schema(name, format!("missing column `{col}`")))
    };
    let id = find("nft_id")?;
    let coll = find("collection_code")?;
    let trait_idx: Vec<usize> = TRAITS.iter().map(|t| find(t)).collect::<Result<_>>()?;
    let hue = find(HUE_COLUMN)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::schema(name, format!("row {}: {m}", i + 1));
        let nft_id = rec.get(id).unwrap_or("").trim().to_string();
        let collection_code = rec.get(coll).unwrap_or("").trim().to_string();
        if nft_id.is_empty() || collection_code.is_empty() {
            return Err(bad("missing nft_id or collection_code".into()));
        }
        let mut traits = [None; 11];
        for (k, &j) in trait_idx.iter().enumerate() {
            traits[k] = parse_opt(rec.get(j).unwrap_or("")).map_err(bad)?;
        }
        let most_frequent_hue = parse_opt(rec.get(hue).unwrap_or("")).map_err(bad)?;
        rows.push(TokenFeatureRow { nft_id, collection_code, traits, most_frequent_hue });
    }
    Ok(rows)
}

/// Column-wise z-scores within groups (sample sd). Missing cells and columns
/// with zero or undefined sd within a group become 0.
pub fn within_group_standardize(x: &[Vec<Option<f64>>], groups: &[&str]) -> Result<DMatrix<f64>> {
    if x.len() != groups.len() {
        return Err(Error::InvalidInput("one group label per row required".into()));
    }
    let p = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::InvalidInput("ragged feature matrix".into()));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (r, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(r);
    }
    let mut z = DMatrix::zeros(x.len(), p);
    for rows in members.values() {
        for j in 0..p {
            let vals: Vec<f64> = rows.iter().filter_map(|&r| x[r][j]).collect();
            let (Some(m), Some(sd)) = (stats::mean(&vals), stats::sample_sd(&vals)) else {
                continue;
            };
            if !(sd > 0.0) {
                continue;
            }
            for &r in rows {
                if let Some(v) = x[r][j] {
                    z[(r, j)] = (v - m) / sd;
                }
            }
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub loadings: Vec<f64>,
    pub scores: Vec<f64>,
    /// Largest eigenvalue of the sample covariance (variance of the scores).
    pub eigenvalue: f64,
    pub explained_share: f64,
}

/// First principal component of the sample covariance of `z`. The loading with
/// the largest magnitude (first on ties) is made positive.
pub fn pca_first_component(z: &DMatrix<f64>) -> Result<PcaResult> {
    let (n, p) = z.shape();
    if n < 2 || p == 0 {
        return Err(Error::InvalidInput("PCA needs at least 2 rows and 1 column".into()));
    }
    let means = z.row_mean();
    let centered = DMatrix::from_fn(n, p, |i, j| z[(i, j)] - means[j]);
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    let trace = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut k = 0;
    for i in 1..p {
        if eig.eigenvalues[i] > eig.eigenvalues[k] {
            k = i;
        }
    }
    let mut loadings: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
    let max_abs = loadings.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pivot = loadings.iter().position(|v| v.abs() >= max_abs - 1e-12).unwrap_or(0);
    if loadings[pivot] < 0.0 {
        loadings.iter_mut().for_each(|v| *v = -*v);
    }
    let eigenvalue = eig.eigenvalues[k].max(0.0);
    if !(trace > 1e-14) {
        log::warn!("PCA input has no variation; PC1 scores set to zero");
        return Ok(PcaResult { loadings, scores: vec![0.0; n], eigenvalue: 0.0, explained_share: 0.0 });
    }
    let scores = (0..n).map(|i| (0..p).map(|j| centered[(i, j)] * loadings[j]).sum()).collect();
    Ok(PcaResult { loadings, scores, eigenvalue, explained_share: eigenvalue / trace })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisualIndexRow {
    pub nft_id: String,
    pub collection_code: String,
    pub visual_index_explicit: f64,
    pub visual_index_explicit_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualIndex {
    pub rows: Vec<VisualIndexRow>,
    /// `(input name, PC1 loading)` in input order.
    pub loadings: Vec<(String, f64)>,
    pub explained_share: f64,
    pub duplicates_dropped: usize,
}

impl VisualIndex {
    pub fn by_nft(&self) -> std::collections::HashMap<&str, f64> {
        self.rows.iter().map(|r| (r.nft_id.as_str(), r.visual_index_explicit_z)).collect()
    }

    pub fn write_index_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["nft_id", "collection_code", "visual_index_explicit", "visual_index_explicit_z"])?;
        for r in &self.rows {
            w.write_record([
                r.nft_id.clone(),
                r.collection_code.clone(),
                r.visual_index_explicit.to_string(),
                r.visual_index_explicit_z.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("visual index", e))?;
        Ok(())
    }

    pub fn write_loadings_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["feature", "loading"])?;
        for (f, l) in &self.loadings {
            w.write_record([f.clone(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("pc1 loadings", e))?;
        Ok(())
    }
}

/// Collapses to the first row per `nft_id`, standardizes the 13 inputs within
/// collection, fits PC1 on the pooled matrix and z-scores it within collection
/// (population sd; single-NFT or constant collections get 0). Output rows are
/// sorted by `(collection_code, nft_id)`.
pub fn build_visual_index(features: &[TokenFeatureRow]) -> Result<VisualIndex> {
    let mut seen = HashSet::new();
    let mut rows: Vec<&TokenFeatureRow> = features.iter().filter(|r| seen.insert(r.nft_id.as_str())).collect();
    let duplicates_dropped = features.len() - rows.len();
    rows.sort_by(|a, b| (&a.collection_code, &a.nft_id).cmp(&(&b.collection_code, &b.nft_id)));
    let x: Vec<Vec<Option<f64>>> = rows.iter().map(|r| r.inputs().to_vec()).collect();
    let groups: Vec<&str> = rows.iter().map(|r| r.collection_code.as_str()).collect();
    let z = within_group_standardize(&x, &groups)?;
    let pca = pca_first_component(&z)?;

    let mut zscore = vec![0.0; rows.len()];
    let mut start = 0;
    while start < rows.len() {
        let end = start + groups[start..].iter().take_while(|g| **g == groups[start]).count();
        let s = &pca.scores[start..end];
        if let (Some(m), Some(sd)) = (stats::mean(s), stats::population_sd(s)) {
            if sd > 0.0 && s.len() > 1 {
                for (k, v) in s.iter().enumerate() {
                    zscore[start + k] = (v - m) / sd;
                }
            }
        }
        start = end;
    }
    Ok(VisualIndex {
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, r)| VisualIndexRow {
                nft_id: r.nft_id.clone(),
                collection_code: r.collection_code.clone(),
                visual_index_explicit: pca.scores[i],
                visual_index_explicit_z: zscore[i],
            })
            .collect(),
        loadings: PCA_INPUTS.iter().map(|s| s.to_string()).zip(pca.loadings.iter().copied()).collect(),
        explained_share: pca.explained_share,
        duplicates_dropped,
    })
}
