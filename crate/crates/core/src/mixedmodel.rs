//! Linear mixed model by maximum likelihood with crossed random intercepts and
//! independent random slopes.
//!
//! With residual-variance units, `V(θ) = I + Σ_t θ_t Z_t Z_tᵀ`. The profiled
//! likelihood is evaluated from the Cholesky factor of the augmented
//! cross-product `[ZΛ X y]ᵀ[ZΛ X y] + diag(I, 0)`. The intercept factor with
//! the most levels is eliminated first as a diagonal block; the remaining
//! random-effect columns split into connected blocks (columns linked through a
//! shared row or a shared level of the eliminated factor), each factored
//! densely. The fixed-effect block is factored last.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::stats::{self, CoefficientRow};

/// Bounds on each variance ratio θ.
pub const THETA_FLOOR: f64 = 1e-10;
pub const THETA_CEIL: f64 = 1e6;
const RIDGE: f64 = 1e-10;
const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupFactor {
    Nft,
    Collection,
    CollectionBin,
    Month,
    Cluster,
}

impl GroupFactor {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupFactor::Nft => "nft_id",
            GroupFactor::Collection => "collection",
            GroupFactor::CollectionBin => "collection_x_bin",
            GroupFactor::Month => "month",
            GroupFactor::Cluster => "cluster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub factor: GroupFactor,
    /// `None` for an intercept, otherwise the slope covariate.
    pub covariate: Option<String>,
}

impl RandomTerm {
    pub fn intercept(factor: GroupFactor) -> Self {
        RandomTerm { factor, covariate: None }
    }

    pub fn slope(factor: GroupFactor, covariate: &str) -> Self {
        RandomTerm { factor, covariate: Some(covariate.to_string()) }
    }

    pub fn name(&self) -> String {
        match &self.covariate {
            None => format!("{} intercept", self.factor.as_str()),
            Some(c) => format!("{} slope ({c})", self.factor.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RandomStructure {
    pub terms: Vec<RandomTerm>,
}

impl RandomStructure {
    pub fn new(terms: Vec<RandomTerm>) -> Self {
        RandomStructure { terms }
    }
}

/// Level codes and optional slope covariate of one random term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermData {
    pub name: String,
    pub codes: Vec<usize>,
    pub n_levels: usize,
    pub covariate: Option<Vec<f64>>,
}

impl TermData {
    /// Codes follow the sorted order of the distinct labels.
    pub fn from_labels(name: &str, labels: &[String], covariate: Option<Vec<f64>>) -> Self {
        let levels: BTreeMap<&str, usize> = {
            let mut m: BTreeMap<&str, usize> = labels.iter().map(|l| (l.as_str(), 0)).collect();
            for (k, v) in m.values_mut().enumerate() {
                *v = k;
            }
            m
        };
        TermData {
            name: name.to_string(),
            codes: labels.iter().map(|l| levels[l.as_str()]).collect(),
            n_levels: levels.len(),
            covariate,
        }
    }

    fn value(&self, i: usize) -> f64 {
        self.covariate.as_ref().map_or(1.0, |c| c[i])
    }
}

#[derive(Debug, Clone)]
struct Block {
    /// (term index, level) of each column.
    cols: Vec<(usize, usize)>,
    g_zz: DMatrix<f64>,
    g_zw: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct EliminatedLevel {
    n: f64,
    a_w: DVector<f64>,
    block: Option<usize>,
    a_z: Vec<(usize, f64)>,
}

/// Profiled likelihood evaluator for one dataset and random structure.
#[derive(Debug, Clone)]
pub struct MixedProblem {
    n: usize,
    p: usize,
    names: Vec<String>,
    terms: Vec<TermData>,
    eliminated: Option<usize>,
    levels: Vec<EliminatedLevel>,
    blocks: Vec<Block>,
    g_ww: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub loglik: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    /// `(Xᵀ V⁻¹ X)⁻¹` in residual-variance units.
    pub xtvx_inv: DMatrix<f64>,
    pub logdet_v: f64,
    pub rss: f64,
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

impl MixedProblem {
    pub fn from_design(design: &DesignMatrix, structure: &RandomStructure) -> Result<Self> {
        let terms = structure
            .terms
            .iter()
            .map(|t| {
                let cov = t.covariate.as_deref().map(|c| design.covariate(c)).transpose()?;
                Ok(TermData::from_labels(&t.name(), design.group(t.factor), cov))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(design.y.clone(), design.x.clone(), design.columns.clone(), terms)
    }

    /// Rows are put into a canonical order first, so estimates do not depend
    /// on the input row order.
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, names: Vec<String>, terms: Vec<TermData>) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n || names.len() != p {
            return Err(Error::InvalidInput("response, design and names disagree in shape".into()));
        }
        if n == 0 || p == 0 {
            return Err(Error::EmptySample("mixed model needs rows and columns".into()));
        }
        for t in &terms {
            if t.codes.len() != n || t.covariate.as_ref().is_some_and(|c| c.len() != n) {
                return Err(Error::InvalidInput(format!("term `{}` has the wrong length", t.name)));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            for t in &terms {
                let o = t.codes[a].cmp(&t.codes[b]).then(t.value(a).total_cmp(&t.value(b)));
                if o.is_ne() {
                    return o;
                }
            }
            let o = y[a].total_cmp(&y[b]);
            if o.is_ne() {
                return o;
            }
            for j in 0..p {
                let o = x[(a, j)].total_cmp(&x[(b, j)]);
                if o.is_ne() {
                    return o;
                }
            }
            std::cmp::Ordering::Equal
        });
        let y = DVector::from_iterator(n, order.iter().map(|&i| y[i]));
        let x = DMatrix::from_fn(n, p, |i, j| x[(order[i], j)]);
        let terms: Vec<TermData> = terms
            .into_iter()
            .map(|t| TermData {
                codes: order.iter().map(|&i| t.codes[i]).collect(),
                covariate: t.covariate.map(|c| order.iter().map(|&i| c[i]).collect()),
                ..t
            })
            .collect();
        Ok(Self::build(n, p, names, terms, x, y))
    }

    fn build(n: usize, p: usize, names: Vec<String>, terms: Vec<TermData>, x: DMatrix<f64>, y: DVector<f64>) -> Self {
        let eliminated = terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.covariate.is_none())
            .max_by(|a, b| a.1.n_levels.cmp(&b.1.n_levels).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k);
        let others: Vec<usize> = (0..terms.len()).filter(|&k| Some(k) != eliminated).collect();
        let mut offset = vec![0; terms.len()];
        let mut total = 0;
        for &k in &others {
            offset[k] = total;
            total += terms[k].n_levels;
        }
        let mut parent: Vec<usize> = (0..total).collect();
        let mut rep: Vec<Option<usize>> = vec![None; eliminated.map_or(0, |e| terms[e].n_levels)];
        for i in 0..n {
            let cols: Vec<usize> = others.iter().map(|&k| offset[k] + terms[k].codes[i]).collect();
            for w in cols.windows(2) {
                union(&mut parent, w[0], w[1]);
            }
            if let (Some(e), Some(&c0)) = (eliminated, cols.first()) {
                let lvl = terms[e].codes[i];
                match rep[lvl] {
                    Some(r) => union(&mut parent, r, c0),
                    None => rep[lvl] = Some(c0),
                }
            }
        }
        // blocks in order of their smallest column
        let mut block_of_root: BTreeMap<usize, usize> = BTreeMap::new();
        let mut col_block = vec![(0usize, 0usize); total];
        let mut block_cols: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut col_owner = vec![(0usize, 0usize); total];
        for &k in &others {
            for l in 0..terms[k].n_levels {
                col_owner[offset[k] + l] = (k, l);
            }
        }
        for c in 0..total {
            let r = find(&mut parent, c);
            let b = *block_of_root.entry(r).or_insert_with(|| {
                block_cols.push(Vec::new());
                block_cols.len() - 1
            });
            col_block[c] = (b, block_cols[b].len());
            block_cols[b].push(col_owner[c]);
        }
        let q = p + 1;
        let mut blocks: Vec<Block> = block_cols
            .into_iter()
            .map(|cols| {
                let m = cols.len();
                Block { cols, g_zz: DMatrix::zeros(m, m), g_zw: DMatrix::zeros(m, q) }
            })
            .collect();
        let mut g_ww = DMatrix::zeros(q, q);
        let mut levels: Vec<EliminatedLevel> = (0..rep.len())
            .map(|_| EliminatedLevel { n: 0.0, a_w: DVector::zeros(q), block: None, a_z: Vec::new() })
            .collect();
        let mut w = DVector::zeros(q);
        for i in 0..n {
            for j in 0..p {
                w[j] = x[(i, j)];
            }
            w[p] = y[i];
            g_ww.ger(1.0, &w, &w, 1.0);
            let entries: Vec<(usize, usize, f64)> = others
                .iter()
                .map(|&k| {
                    let (b, loc) = col_block[offset[k] + terms[k].codes[i]];
                    (b, loc, terms[k].value(i))
                })
                .collect();
            for &(b, la, va) in &entries {
                let blk = &mut blocks[b];
                for &(_, lb, vb) in &entries {
                    blk.g_zz[(la, lb)] += va * vb;
                }
                for j in 0..q {
                    blk.g_zw[(la, j)] += va * w[j];
                }
            }
            if let Some(e) = eliminated {
                let lv = &mut levels[terms[e].codes[i]];
                lv.n += 1.0;
                lv.a_w += &w;
                for &(b, loc, v) in &entries {
                    lv.block = Some(b);
                    match lv.a_z.iter_mut().find(|(l, _)| *l == loc) {
                        Some(slot) => slot.1 += v,
                        None => lv.a_z.push((loc, v)),
                    }
                }
            }
        }
        MixedProblem { n, p, names, terms, eliminated, levels, blocks, g_ww, x, y }
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn terms(&self) -> &[TermData] {
        &self.terms
    }

    /// Canonically ordered response and design.
    pub fn data(&self) -> (&DVector<f64>, &DMatrix<f64>) {
        (&self.y, &self.x)
    }

    /// GLS fit at fixed θ with σ² profiled out (ML, or REML when `reml`).
    pub fn profile(&self, theta: &[f64], reml: bool) -> Result<Profile> {
        if theta.len() != self.terms.len() {
            return Err(Error::InvalidInput("one θ per random term required".into()));
        }
        if theta.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidInput("θ must be finite and non-negative".into()));
        }
        let p = self.p;
        let q = p + 1;
        let mut s_ww = self.g_ww.clone();
        let mut logdet = 0.0;
        let scale_of_block: Vec<DVector<f64>> = self
            .blocks
            .iter()
            .map(|b| DVector::from_iterator(b.cols.len(), b.cols.iter().map(|&(k, _)| theta[k].sqrt())))
            .collect();
        let mut s_zz: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks.len());
        let mut s_zw: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks.len());
        for (b, d) in self.blocks.iter().zip(&scale_of_block) {
            let m = b.cols.len();
            let mut zz = DMatrix::from_fn(m, m, |r, c| d[r] * b.g_zz[(r, c)] * d[c]);
            for r in 0..m {
                zz[(r, r)] += 1.0;
            }
            s_zz.push(zz);
            s_zw.push(DMatrix::from_fn(m, q, |r, c| d[r] * b.g_zw[(r, c)]));
        }
        if let Some(e) = self.eliminated {
            let te = theta[e];
            for lv in &self.levels {
                if lv.n == 0.0 {
                    continue;
                }
                let denom = te * lv.n + 1.0;
                logdet += denom.ln();
                let c = te / denom;
                s_ww.ger(-c, &lv.a_w, &lv.a_w, 1.0);
                if let Some(b) = lv.block {
                    let d = &scale_of_block[b];
                    let zz = &mut s_zz[b];
                    for &(la, va) in &lv.a_z {
                        let ua = d[la] * va;
                        for &(lb, vb) in &lv.a_z {
                            zz[(la, lb)] -= c * ua * d[lb] * vb;
                        }
                        let zw = &mut s_zw[b];
                        for j in 0..q {
                            zw[(la, j)] -= c * ua * lv.a_w[j];
                        }
                    }
                }
            }
        }
        for (zz, zw) in s_zz.into_iter().zip(s_zw) {
            let m = zz.nrows();
            let chol = match zz.clone().cholesky() {
                Some(c) => c,
                None => {
                    log::warn!("random-effect block not positive definite; adding ridge {RIDGE}");
                    (zz + DMatrix::identity(m, m) * RIDGE)
                        .cholesky()
                        .ok_or_else(|| Error::Numerical("random-effect block is singular".into()))?
                }
            };
            logdet += 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let l = chol.l();
            let w = l.solve_lower_triangular(&zw).ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            s_ww -= w.tr_mul(&w);
        }
        let a = s_ww.view((0, 0), (p, p)).clone_owned();
        let bvec = s_ww.view((0, p), (p, 1)).clone_owned();
        let c = s_ww[(p, p)];
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numerical("fixed-effect design is rank deficient under V(θ)".into()))?;
        let beta = chol.solve(&bvec).column(0).clone_owned();
        let rss = (c - bvec.column(0).dot(&beta)).max(0.0);
        let xtvx_inv = chol.inverse();
        let n = self.n as f64;
        let pf = p as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let (loglik, sigma2) = if reml {
            let s2 = (rss / (n - pf)).max(f64::MIN_POSITIVE);
            let logdet_xtvx: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(p).map(|v| v.ln()).sum::<f64>();
            (-0.5 * (n - pf) * (ln2pi + s2.ln() + 1.0) - 0.5 * logdet - 0.5 * logdet_xtvx, s2)
        } else {
            let s2 = (rss / n).max(f64::MIN_POSITIVE);
            (-0.5 * n * (ln2pi + s2.ln() + 1.0) - 0.5 * logdet, s2)
        };
        Ok(Profile { loglik, beta, sigma2, xtvx_inv, logdet_v: logdet, rss })
    }

    /// ML profiled log-likelihood.
    pub fn profile_loglik(&self, theta: &[f64]) -> Result<Profile> {
        self.profile(theta, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComponent {
    pub term: String,
    pub variance: f64,
    pub theta: f64,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub term: String,
    pub n_levels: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub mean_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub components: Vec<VarianceComponent>,
    /// Residual variance.
    pub sigma2: f64,
    pub loglik: f64,
    pub converged: bool,
    pub reml: bool,
    pub n_obs: usize,
    pub groups: Vec<GroupSummary>,
    pub iterations: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedOptions {
    pub reml: bool,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for MixedOptions {
    fn default() -> Self {
        MixedOptions { reml: false, seed: 0, restarts: 3, max_iter: 200 }
    }
}

struct Objective<'a> {
    problem: &'a MixedProblem,
    reml: bool,
    lo: f64,
    hi: f64,
}

impl Objective<'_> {
    fn loglik(&self, phi: &[f64]) -> f64 {
        let theta: Vec<f64> = phi.iter().map(|v| v.clamp(self.lo, self.hi).exp()).collect();
        self.problem.profile(&theta, self.reml).map_or(f64::NEG_INFINITY, |p| p.loglik)
    }

    /// Fourth-order central differences; two-point (one-sided at the bounds)
    /// when the wide stencil leaves the box.
    fn gradient(&self, phi: &[f64], f0: f64) -> Vec<f64> {
        let h = FD_STEP;
        let mut g = vec![0.0; phi.len()];
        let mut x = phi.to_vec();
        let at = |x: &mut Vec<f64>, j: usize, v: f64| {
            x[j] = v;
            let f = self.loglik(x);
            x[j] = phi[j];
            f
        };
        for j in 0..phi.len() {
            if phi[j] - 2.0 * h >= self.lo && phi[j] + 2.0 * h <= self.hi {
                let f2u = at(&mut x, j, phi[j] + 2.0 * h);
                let fu = at(&mut x, j, phi[j] + h);
                let fd = at(&mut x, j, phi[j] - h);
                let f2d = at(&mut x, j, phi[j] - 2.0 * h);
                g[j] = (-f2u + 8.0 * fu - 8.0 * fd + f2d) / (12.0 * h);
                continue;
            }
            let up = (phi[j] + h).min(self.hi);
            let dn = (phi[j] - h).max(self.lo);
            let fu = if up > phi[j] { at(&mut x, j, up) } else { f0 };
            let fd = if dn < phi[j] { at(&mut x, j, dn) } else { f0 };
            g[j] = if up > dn { (fu - fd) / (up - dn) } else { 0.0 };
        }
        g
    }
}

struct BfgsResult {
    phi: Vec<f64>,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

/// Projected BFGS maximizing the objective over a box.
fn bfgs(obj: &Objective, start: &[f64], max_iter: usize) -> BfgsResult {
    let k = start.len();
    let mut phi: Vec<f64> = start.iter().map(|v| v.clamp(obj.lo, obj.hi)).collect();
    let mut f = obj.loglik(&phi);
    if k == 0 || !f.is_finite() {
        return BfgsResult { phi, loglik: f, converged: f.is_finite(), iterations: 0 };
    }
    let mut g = obj.gradient(&phi, f);
    let mut h = DMatrix::<f64>::identity(k, k);
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    let active = |phi: &[f64], g: &[f64], j: usize| {
        (phi[j] <= obj.lo && g[j] < 0.0) || (phi[j] >= obj.hi && g[j] > 0.0)
    };
    let pg_norm = |phi: &[f64], g: &[f64]| -> f64 {
        (0..k).filter(|&j| !active(phi, g, j)).map(|j| g[j] * g[j]).sum::<f64>().sqrt()
    };
    for it in 0..max_iter {
        iterations = it + 1;
        if pg_norm(&phi, &g) < 1e-8 {
            break;
        }
        // Quasi-Newton step below 1e-9 in log θ: further progress is within gradient noise.
        let newton = (0..k)
            .filter(|&i| !active(&phi, &g, i))
            .map(|i| (0..k).filter(|&j| !active(&phi, &g, j)).map(|j| h[(i, j)] * g[j]).sum::<f64>().abs())
            .fold(0.0f64, f64::max);
        if it > 0 && newton < 1e-9 {
            break;
        }
        let mut fresh = false;
        let mut moved = false;
        for _attempt in 0..2 {
            let mut d = vec![0.0; k];
            for i in 0..k {
                if active(&phi, &g, i) {
                    continue;
                }
                for j in 0..k {
                    if !active(&phi, &g, j) {
                        d[i] += h[(i, j)] * g[j];
                    }
                }
            }
            let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope > 0.0) {
                h = DMatrix::identity(k, k);
                fresh = true;
                for i in 0..k {
                    d[i] = if active(&phi, &g, i) { 0.0 } else { g[i] };
                }
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 3.0 {
                d.iter_mut().for_each(|v| *v *= 3.0 / dmax);
            }
            let mut alpha = 1.0;
            for _ in 0..50 {
                let cand: Vec<f64> = (0..k).map(|j| (phi[j] + alpha * d[j]).clamp(obj.lo, obj.hi)).collect();
                let fc = obj.loglik(&cand);
                let gain: f64 = (0..k).map(|j| g[j] * (cand[j] - phi[j])).sum();
                if fc.is_finite() && fc >= f + 1e-4 * gain && fc >= f {
                    let gc = obj.gradient(&cand, fc);
                    let s: Vec<f64> = (0..k).map(|j| cand[j] - phi[j]).collect();
                    // ascent on f: curvature pair uses the negated gradient change
                    let yv: Vec<f64> = (0..k).map(|j| g[j] - gc[j]).collect();
                    let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
                    if sy > 1e-12 {
                        let sv = DVector::from_vec(s);
                        let yvv = DVector::from_vec(yv);
                        let rho = 1.0 / sy;
                        let i = DMatrix::<f64>::identity(k, k);
                        let left = &i - &sv * yvv.transpose() * rho;
                        let right = &i - &yvv * sv.transpose() * rho;
                        h = &left * &h * &right + &sv * sv.transpose() * rho;
                    }
                    last_change = fc - f;
                    phi = cand;
                    f = fc;
                    g = gc;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if moved || fresh {
                break;
            }
            h = DMatrix::identity(k, k);
            fresh = true;
        }
        if !moved {
            last_change = 0.0;
            break;
        }
        if last_change.abs() < 1e-14 * (1.0 + f.abs()) {
            break;
        }
    }
    let converged = pg_norm(&phi, &g) < 1e-5 && last_change.abs() < 1e-8;
    BfgsResult { phi, loglik: f, converged, iterations }
}

/// ML (or REML) fit from a design matrix and random structure.
pub fn fit_ml(design: &DesignMatrix, structure: &RandomStructure, options: &MixedOptions) -> Result<MixedFit> {
    let problem = MixedProblem::from_design(design, structure)?;
    fit_problem(&problem, options)
}

/// Maximizes the profiled likelihood over log θ from θ = 1 and `restarts`
/// seeded random starts, then pushes near-zero ratios to the floor when that
/// does not lower the likelihood.
pub fn fit_problem(problem: &MixedProblem, options: &MixedOptions) -> Result<MixedFit> {
    let obj = Objective { problem, reml: options.reml, lo: THETA_FLOOR.ln(), hi: THETA_CEIL.ln() };
    let k = problem.n_terms();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut starts = vec![vec![0.0; k]];
    for _ in 0..options.restarts {
        starts.push((0..k).map(|_| rng.random_range(-4.6..4.6)).collect());
    }
    let runs: Vec<BfgsResult> = starts.iter().map(|s| bfgs(&obj, s, options.max_iter)).collect();
    let top = runs.iter().map(|r| r.loglik).fold(f64::NEG_INFINITY, f64::max);
    // Any converged start reaching the top value certifies the optimum.
    let certified = runs.iter().any(|r| r.converged && r.loglik >= top - 1e-8);
    let mut best = runs
        .into_iter()
        .reduce(|b, r| if r.loglik > b.loglik { r } else { b })
        .expect("at least one start");
    best.converged = certified;
    if !best.loglik.is_finite() {
        return Err(Error::Numerical("profiled likelihood is not finite at any start".into()));
    }
    let mut at_boundary = vec![false; k];
    for j in 0..k {
        if best.phi[j] <= obj.lo {
            at_boundary[j] = true;
            continue;
        }
        if best.phi[j] < (1e-4f64).ln() {
            let mut cand = best.phi.clone();
            cand[j] = obj.lo;
            let f = obj.loglik(&cand);
            if f >= best.loglik - 1e-9 {
                best.phi = cand;
                best.loglik = best.loglik.max(f);
                at_boundary[j] = true;
            }
        }
    }
    let theta: Vec<f64> = best.phi.iter().map(|v| v.exp()).collect();
    let prof = problem.profile(&theta, options.reml)?;
    let se: Vec<f64> = (0..problem.p).map(|j| (prof.sigma2 * prof.xtvx_inv[(j, j)]).max(0.0).sqrt()).collect();
    let groups = problem
        .terms
        .iter()
        .map(|t| {
            let mut sizes = vec![0usize; t.n_levels];
            for &c in &t.codes {
                sizes[c] += 1;
            }
            GroupSummary {
                term: t.name.clone(),
                n_levels: t.n_levels,
                min_size: sizes.iter().copied().min().unwrap_or(0),
                max_size: sizes.iter().copied().max().unwrap_or(0),
                mean_size: problem.n as f64 / t.n_levels.max(1) as f64,
            }
        })
        .collect();
    Ok(MixedFit {
        names: problem.names.clone(),
        beta: prof.beta.iter().copied().collect(),
        se,
        components: problem
            .terms
            .iter()
            .zip(&theta)
            .zip(&at_boundary)
            .map(|((t, &th), &b)| VarianceComponent { term: t.name.clone(), variance: th * prof.sigma2, theta: th, at_boundary: b })
            .collect(),
        sigma2: prof.sigma2,
        loglik: prof.loglik,
        converged: best.converged,
        reml: options.reml,
        n_obs: problem.n,
        groups,
        iterations: best.iterations,
        theta,
    })
}

/// Coefficient table with Wald z, normal p-values and 95% intervals.
pub fn fixed_effect_inference(fit: &MixedFit) -> Vec<CoefficientRow> {
    fit.names
        .iter()
        .zip(fit.beta.iter().zip(&fit.se))
        .map(|(n, (&b, &s))| stats::coefficient_row(n, b, s))
        .collect()
}

/// Percent change in `1 + price` implied by a log-scale coefficient.
pub fn semi_elasticity(beta: f64) -> f64 {
    beta.exp_m1()
}

impl MixedFit {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        self.names.iter().position(|n| n == name).map(|j| (self.beta[j], self.se[j]))
    }

    pub fn write_variance_components<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["term", "variance", "theta", "at_boundary"])?;
        for c in &self.components {
            w.write_record([c.term.clone(), c.variance.to_string(), c.theta.to_string(), c.at_boundary.to_string()])?;
        }
        w.write_record(["residual", &self.sigma2.to_string(), "1", "false"])?;
        w.flush().map_err(|e| Error::io("variance components", e))?;
        Ok(())
    }
}
