//! Grouping eigenvectors into mutually uncorrelated blocks.
//!
//! Each eigenvector of `Ŵ` defines one column of the transformed series
//! `Ẑ_t = Y_t Σ^{-1/2} Γ`. Pairs of columns are scored by their maximum absolute
//! lagged cross-correlation, the strongest pairs are kept as edges (ratio rule
//! or fixed threshold), and connected components of the edge graph become the
//! groups.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{Mode, WEstimate};
use crate::matcore::MatrixSeries;

/// How correlated pairs are picked from the correlation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rho0", rename_all = "lowercase")]
pub enum Selector {
    /// Largest ratio between consecutive sorted correlations.
    Ratio,
    /// Every pair with correlation at least `rho0`.
    Threshold(f64),
}

/// Filter applied to the transformed columns before correlations are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrewhitenKind {
    /// One vector autoregression per column over all of its rows.
    #[default]
    Vector,
    /// One scalar autoregression per entry.
    Scalar,
}

/// Tuning for [`segment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    /// Largest absolute lag scanned for cross-correlation.
    pub tau1: usize,
    /// Fraction of the sorted pairs over which the ratio rule searches.
    pub c_r: f64,
    /// A ratio maximum sitting on a correlation below this value selects no edges.
    pub rho_floor: f64,
    pub prewhiten: bool,
    #[serde(default)]
    pub prewhiten_kind: PrewhitenKind,
    pub max_ar_order: usize,
    pub selector: Selector,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { tau1: 15, c_r: 0.75, rho_floor: 0.05, prewhiten: true, prewhiten_kind: PrewhitenKind::Vector, max_ar_order: 5, selector: Selector::Ratio }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_r > 0.0 && self.c_r < 1.0) {
            return Err(Error::InvalidInput(format!("c_r must lie in (0, 1), got {}", self.c_r)));
        }
        if !(self.rho_floor >= 0.0 && self.rho_floor < 1.0) {
            return Err(Error::InvalidInput(format!("rho_floor must lie in [0, 1), got {}", self.rho_floor)));
        }
        if let Selector::Threshold(r) = self.selector {
            check_rho0(r)?;
        }
        Ok(())
    }
}

fn check_rho0(rho0: f64) -> Result<()> {
    if rho0 > 0.0 && rho0 < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("rho0 must lie in (0, 1), got {rho0}")))
    }
}

/// A scored pair of transformed columns, `k < l`, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub k: usize,
    pub l: usize,
    pub rho: f64,
}

/// Maximum cross-correlations for every unordered column pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub d: usize,
    /// All `d(d−1)/2` pairs in lexicographic `(k, l)` order.
    pub entries: Vec<Edge>,
    pub tau1: usize,
    pub prewhitened: bool,
    /// Pairs for which every scalar combination had zero variance.
    pub degenerate_pairs: usize,
}

impl CorrelationTable {
    pub fn get(&self, k: usize, l: usize) -> Option<f64> {
        let (a, b) = if k < l { (k, l) } else { (l, k) };
        if a == b || b >= self.d {
            return None;
        }
        // lexicographic position of (a, b)
        let idx = a * (2 * self.d - a - 1) / 2 + (b - a - 1);
        Some(self.entries[idx].rho)
    }

    /// Entries sorted by descending correlation; ties keep lexicographic order.
    pub fn sorted_desc(&self) -> Vec<Edge> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| b.rho.total_cmp(&a.rho));
        v
    }
}

/// Output of the AR prewhitening filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Prewhitened {
    pub series: Vec<f64>,
    pub order: usize,
    /// Set when the input had zero variance and was returned unchanged.
    pub degenerate: bool,
}

/// A partition of `0..d` with its contiguous ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Groups sorted by smallest member, members ascending.
    pub groups: Vec<Vec<usize>>,
    /// Concatenation of `groups`.
    pub permutation: Vec<usize>,
}

impl Partition {
    pub fn singletons(d: usize) -> Self {
        group_columns(d, &[])
    }

    /// Builds a partition from arbitrary groups, normalising their order.
    pub fn from_groups(d: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut seen = vec![false; d];
        let mut edges = Vec::new();
        for g in groups {
            for &k in g {
                if k >= d || seen[k] {
                    return Err(Error::InvalidInput(format!("groups do not partition 0..{d}")));
                }
                seen[k] = true;
            }
            edges.extend(g.windows(2).map(|w| (w[0], w[1])));
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput(format!("groups do not cover 0..{d}")));
        }
        Ok(group_columns(d, &edges))
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Groups expressed as positions after applying `permutation`.
    pub fn contiguous(&self) -> Vec<Vec<usize>> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let r = (start..start + g.len()).collect();
                start += g.len();
                r
            })
            .collect()
    }
}

/// Result of segmenting one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub mode: Mode,
    pub permutation: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    pub r_hat: usize,
    pub edges: Vec<Edge>,
    pub n_groups: usize,
    /// `ρ̂_(j) / ρ̂_(j+1)` for the admissible `j` (empty for the threshold selector).
    pub ratios: Vec<f64>,
    /// The ratio maximum sat below `rho_floor` and was discarded.
    pub floor_triggered: bool,
    /// Autoregressive orders chosen by the prewhitening filter: one per column
    /// for the vector filter, one per entry (column by column) for the scalar one.
    pub prewhiten_orders: Vec<usize>,
    pub table: CorrelationTable,
}

impl SegmentationResult {
    pub fn partition(&self) -> Partition {
        Partition { groups: self.groups.clone(), permutation: self.permutation.clone() }
    }
}

/// `Ẑ_t = Y_t Σ^{-1/2} (γ̂_1, …, γ̂_d)` where `Y_t` is `X_t` (columns) or `X_tᵀ` (rows).
pub fn transformed_columns(x: &MatrixSeries, w: &WEstimate) -> Result<MatrixSeries> {
    let y = w.mode.orient(x);
    if y.cols() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} columns", w.dim()),
            actual: format!("{}", y.cols()),
        });
    }
    let proj = &w.sigma_inv_sqrt * &w.eig.eigenvectors;
    y.map(|m| m * &proj)
}

fn least_squares_ar(z: &[f64], order: usize, start: usize) -> Option<(DVector<f64>, f64)> {
    let n = z.len() - start;
    if order == 0 {
        let rss = z[start..].iter().map(|v| v * v).sum();
        return Some((DVector::zeros(0), rss));
    }
    let design = DMatrix::from_fn(n, order, |r, c| z[start + r - c - 1]);
    let target = DVector::from_iterator(n, z[start..].iter().cloned());
    let gram = design.tr_mul(&design);
    let rhs = design.tr_mul(&target);
    let coef = gram.cholesky()?.solve(&rhs);
    let resid = target - design * &coef;
    Some((coef, resid.norm_squared()))
}

/// Replaces a scalar series by the residuals of a least-squares AR(k) fit, with
/// `k ∈ 0..=max_order` chosen by AIC on a common estimation sample. The result has
/// length `T − k` (order 0 returns the centred series).
pub fn prewhiten(z: &[f64], max_order: usize) -> Result<Prewhitened> {
    let n = z.len();
    if n <= 2 * max_order + 2 {
        return Err(Error::InsufficientData { needed: 2 * max_order + 3, got: n });
    }
    let mean = z.iter().sum::<f64>() / n as f64;
    let zc: Vec<f64> = z.iter().map(|v| v - mean).collect();
    let var = zc.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var <= 1e-24 * (1.0 + mean * mean) {
        return Ok(Prewhitened { series: z.to_vec(), order: 0, degenerate: true });
    }

    let n_eff = (n - max_order) as f64;
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..=max_order {
        if let Some((_, rss)) = least_squares_ar(&zc, k, max_order) {
            let aic = n_eff * (rss / n_eff).ln() + 2.0 * k as f64;
            if aic < best.0 {
                best = (aic, k);
            }
        }
    }
    let order = best.1;
    if order == 0 {
        return Ok(Prewhitened { series: zc, order, degenerate: false });
    }
    let (coef, _) = least_squares_ar(&zc, order, order).expect("order was fitted above");
    let series = (order..n)
        .map(|t| zc[t] - (0..order).map(|c| coef[c] * zc[t - c - 1]).sum::<f64>())
        .collect();
    Ok(Prewhitened { series, order, degenerate: false })
}

/// Residuals of a least-squares VAR(k) fit to the vector series whose components
/// are `z[0], z[1], …` (all of length `T`), with `k ∈ 0..=max_order` chosen by
/// `AIC = n·log det Σ̂ + 2k d²` on a common estimation sample.
///
/// Zero-variance components are passed through centred and excluded from the
/// fit. Orders whose regression is rank deficient or leaves fewer residual
/// degrees of freedom than regressors are skipped. Residuals have length `T − k`.
pub fn prewhiten_vector(z: &[Vec<f64>], max_order: usize) -> Result<(Vec<Vec<f64>>, usize)> {
    let n = z.first().map(Vec::len).ok_or_else(|| Error::Empty("no component series".into()))?;
    if z.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput("component series differ in length".into()));
    }
    if n <= 2 * max_order + 2 {
        return Err(Error::InsufficientData { needed: 2 * max_order + 3, got: n });
    }
    let centred: Vec<Vec<f64>> = z
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let live: Vec<usize> = (0..z.len())
        .filter(|&i| {
            let m = z[i].iter().sum::<f64>() / n as f64;
            let var = centred[i].iter().map(|v| v * v).sum::<f64>() / n as f64;
            var > 1e-24 * (1.0 + m * m)
        })
        .collect();
    let d = live.len();
    if d == 0 {
        return Ok((centred, 0));
    }
    let data = DMatrix::from_fn(n, d, |t, i| centred[live[i]][t]);
    let n_eff = n - max_order;
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..=max_order {
        if n_eff <= 2 * (k * d + 1) {
            break;
        }
        if let Some((_, resid)) = least_squares_var(&data, k, max_order) {
            let cov = resid.tr_mul(&resid) / n_eff as f64;
            let Some(ch) = cov.cholesky() else { continue };
            let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let aic = n_eff as f64 * logdet + 2.0 * (k * d * d) as f64;
            if aic < best.0 {
                best = (aic, k);
            }
        }
    }
    let order = best.1;
    if order == 0 {
        return Ok((centred, 0));
    }
    let (_, resid) = least_squares_var(&data, order, order).expect("order was fitted above");
    let mut out: Vec<Vec<f64>> = centred.iter().map(|c| c[order..].to_vec()).collect();
    for (i, &c) in live.iter().enumerate() {
        out[c] = resid.column(i).iter().copied().collect();
    }
    Ok((out, order))
}

/// Regresses rows `start..` of `data` on their `order` predecessors; returns the
/// coefficient matrix and the residuals.
fn least_squares_var(data: &DMatrix<f64>, order: usize, start: usize) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (n_all, d) = data.shape();
    let n = n_all - start;
    let target = data.rows(start, n).into_owned();
    if order == 0 {
        return Some((DMatrix::zeros(0, d), target));
    }
    let design = DMatrix::from_fn(n, order * d, |r, c| data[(start + r - c / d - 1, c % d)]);
    let gram = design.tr_mul(&design);
    let rhs = design.tr_mul(&target);
    let coef = gram.cholesky()?.solve(&rhs);
    let resid = target - design * &coef;
    Some((coef, resid))
}

/// Standardised scalar component series of every transformed column, indexed
/// `[column][row]`; `None` marks zero variance.
struct ColumnPanel {
    series: Vec<Vec<Option<Vec<f64>>>>,
    n: usize,
}

fn standardise(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-24 * (1.0 + mean * mean)) {
        return None;
    }
    let sd = var.sqrt();
    Some(v.iter().map(|x| (x - mean) / sd).collect())
}

impl ColumnPanel {
    fn build(z: &MatrixSeries, filter: Option<(PrewhitenKind, usize)>) -> Result<(Self, Vec<usize>)> {
        let (_, rows, cols) = z.dims();
        let mut raw = Vec::with_capacity(cols);
        let mut orders = Vec::new();
        for k in 0..cols {
            let col: Vec<Vec<f64>> = (0..rows).map(|i| z.cell(i, k)).collect();
            raw.push(match filter {
                Some((PrewhitenKind::Vector, max)) => {
                    let (res, o) = prewhiten_vector(&col, max)?;
                    orders.push(o);
                    res
                }
                Some((PrewhitenKind::Scalar, max)) => col
                    .iter()
                    .map(|s| {
                        prewhiten(s, max).map(|pw| {
                            orders.push(pw.order);
                            pw.series
                        })
                    })
                    .collect::<Result<_>>()?,
                None => col,
            });
        }
        // right-align to the shortest residual series
        let n = raw.iter().flatten().map(Vec::len).min().unwrap_or(0);
        let series = raw
            .into_iter()
            .map(|col| col.into_iter().map(|s| standardise(&s[s.len() - n..])).collect())
            .collect();
        Ok((Self { series, n }, orders))
    }

    /// Returns `None` when every scalar combination was skipped.
    fn max_corr(&self, k: usize, l: usize, tau1: usize) -> Option<f64> {
        let n = self.n;
        let mut best: Option<f64> = None;
        for a in self.series[k].iter().flatten() {
            for b in self.series[l].iter().flatten() {
                for lag in 0..=tau1.min(n - 1) {
                    let m = n - lag;
                    let fwd: f64 = a[lag..].iter().zip(&b[..m]).map(|(x, y)| x * y).sum();
                    let mut c = fwd.abs();
                    if lag > 0 {
                        let bwd: f64 = a[..m].iter().zip(&b[lag..]).map(|(x, y)| x * y).sum();
                        c = c.max(bwd.abs());
                    }
                    let c = (c / m as f64).min(1.0);
                    best = Some(best.map_or(c, |v: f64| v.max(c)));
                }
            }
        }
        best
    }
}

/// Maximum absolute sample correlation between any scalar component of column `k`
/// at time `t + τ` and any component of column `l` at time `t`, over `|τ| ≤ tau1`.
/// Zero-variance components are skipped; if nothing is left the result is 0.
pub fn max_cross_corr(z: &MatrixSeries, k: usize, l: usize, tau1: usize) -> Result<f64> {
    let d = z.cols();
    if k >= d || l >= d || k == l {
        return Err(Error::IndexOutOfRange(format!("column pair ({k}, {l}) with {d} columns")));
    }
    if 2 * tau1 >= z.len() {
        return Err(Error::InvalidWindow { tau0: tau1, t: z.len() });
    }
    let (panel, _) = ColumnPanel::build(z, None)?;
    Ok(panel.max_corr(k, l, tau1).unwrap_or(0.0))
}

/// All pairwise maximum cross-correlations of the transformed columns, optionally
/// after prewhitening with the given filter and maximum order.
pub fn correlation_table(
    z: &MatrixSeries,
    tau1: usize,
    filter: Option<(PrewhitenKind, usize)>,
) -> Result<(CorrelationTable, Vec<usize>)> {
    let (panel, orders) = ColumnPanel::build(z, filter)?;
    if 2 * tau1 >= panel.n {
        return Err(Error::InvalidWindow { tau0: tau1, t: panel.n });
    }
    let d = z.cols();
    let mut entries = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    let mut degenerate_pairs = 0;
    for k in 0..d {
        for l in k + 1..d {
            let rho = panel.max_corr(k, l, tau1).unwrap_or_else(|| {
                degenerate_pairs += 1;
                0.0
            });
            entries.push(Edge { k, l, rho });
        }
    }
    let table = CorrelationTable { d, entries, tau1, prewhitened: filter.is_some(), degenerate_pairs };
    Ok((table, orders))
}

/// `ρ̂_(j)/ρ̂_(j+1)` for `j = 1..=min(⌊c_r q0⌋, q0 − 1)`, denominators floored at 1e-12.
pub fn ratio_sequence(rho_sorted: &[f64], c_r: f64) -> Vec<f64> {
    let q0 = rho_sorted.len();
    let jmax = ((c_r * q0 as f64).floor() as usize).min(q0.saturating_sub(1));
    (0..jmax).map(|j| rho_sorted[j] / rho_sorted[j + 1].max(1e-12)).collect()
}

/// Number of leading pairs judged correlated: the `j` maximising
/// `ρ̂_(j)/ρ̂_(j+1)` over `1 ≤ j ≤ c_r q0`, smallest `j` on ties.
pub fn ratio_select(rho_sorted: &[f64], c_r: f64) -> Result<usize> {
    if rho_sorted.is_empty() {
        return Err(Error::Empty("correlation sequence".into()));
    }
    if rho_sorted.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: 1 });
    }
    if !(c_r > 0.0 && c_r < 1.0) {
        return Err(Error::InvalidInput(format!("c_r must lie in (0, 1), got {c_r}")));
    }
    if rho_sorted.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidInput("correlations must be sorted in descending order".into()));
    }
    let ratios = ratio_sequence(rho_sorted, c_r);
    let mut best = 0;
    for (j, &r) in ratios.iter().enumerate() {
        if r > ratios[best] {
            best = j;
        }
    }
    Ok(if ratios.is_empty() { 0 } else { best + 1 })
}

/// Pairs with correlation at least `rho0`.
pub fn threshold_select(table: &CorrelationTable, rho0: f64) -> Result<Vec<Edge>> {
    check_rho0(rho0)?;
    Ok(table.entries.iter().filter(|e| e.rho >= rho0).copied().collect())
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Connected components of the graph on `0..d` with the given edges.
///
/// # Panics
/// If an edge endpoint is `>= d`.
pub fn group_columns(d: usize, edges: &[(usize, usize)]) -> Partition {
    let mut uf = UnionFind::new(d);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); d];
    for k in 0..d {
        let r = uf.find(k);
        by_root[r].push(k);
    }
    let mut groups: Vec<Vec<usize>> = by_root.into_iter().filter(|g| !g.is_empty()).collect();
    groups.sort_by_key(|g| g[0]);
    let permutation = groups.iter().flatten().copied().collect();
    Partition { groups, permutation }
}

/// Full segmentation of one mode: transformed columns, optional prewhitening,
/// correlation table, edge selection and grouping.
pub fn segment(x: &MatrixSeries, w: &WEstimate, config: &SegmentConfig) -> Result<SegmentationResult> {
    config.validate()?;
    let d = w.dim();
    let z = transformed_columns(x, w)?;
    let (table, prewhiten_orders) =
        correlation_table(&z, config.tau1, config.prewhiten.then_some((config.prewhiten_kind, config.max_ar_order)))?;

    let mut ratios = Vec::new();
    let mut floor_triggered = false;
    let (r_hat, edges) = match config.selector {
        Selector::Ratio => {
            let sorted = table.sorted_desc();
            let mut r_hat = 0;
            if sorted.len() >= 2 {
                let values: Vec<f64> = sorted.iter().map(|e| e.rho).collect();
                ratios = ratio_sequence(&values, config.c_r);
                r_hat = ratio_select(&values, config.c_r)?;
                if r_hat > 0 && values[r_hat - 1] < config.rho_floor {
                    floor_triggered = true;
                    r_hat = 0;
                }
            }
            (r_hat, sorted[..r_hat].to_vec())
        }
        Selector::Threshold(rho0) => {
            let e = threshold_select(&table, rho0)?;
            (e.len(), e)
        }
    };
    let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.k, e.l)).collect();
    let partition = group_columns(d, &pairs);
    Ok(SegmentationResult {
        mode: w.mode,
        n_groups: partition.n_groups(),
        permutation: partition.permutation,
        groups: partition.groups,
        r_hat,
        edges,
        ratios,
        floor_triggered,
        prewhiten_orders,
        table,
    })
}
