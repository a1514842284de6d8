//! Simulation designs with known block structure, evaluation metrics and a
//! seeded replication driver.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{covariance_pair, w_estimate, Mode};
use crate::forecasting::{
    backtest_with, baseline_forecasts, forecast_with_transform, rolling_backtest, BlockModel, Baseline,
    Coefficients, ModelKind, Scheme, Truth,
};
use crate::matcore::{center, default_floor, inv_sqrt, matrix_serde, sqrt_sym, MatrixSeries};
use crate::segmentation::{segment, Partition};
use crate::transform::{fit_transform, proxy_targets, PipelineConfig, TransformPair, SCHEMA};

/// Discarded warm-up steps of every recursive generator.
pub const BURN_IN: usize = 200;
/// Mixing matrices are redrawn until their condition number is below this.
pub const MAX_CONDITION: f64 = 1e8;

/// Coefficients of `z_t = b z_{t−1} + ε_t + a₁ε_{t−1} + a₂ε_{t−2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arma12 {
    pub b: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Arma12 {
    /// Stationary variance for unit innovations.
    pub fn variance(&self) -> f64 {
        let psi1 = self.b + self.a1;
        let psi2 = self.b * psi1 + self.a2;
        1.0 + psi1 * psi1 + psi2 * psi2 / (1.0 - self.b * self.b)
    }
}

fn signed_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..hi);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws `|b| ∈ (.5, .98)` and `|a₁|, |a₂| ∈ (.3, .98)` with random signs.
pub fn draw_arma12<R: Rng>(rng: &mut R) -> Arma12 {
    let b = signed_uniform(rng, 0.5, 0.98);
    let a1 = signed_uniform(rng, 0.3, 0.98);
    let a2 = signed_uniform(rng, 0.3, 0.98);
    Arma12 { b, a1, a2 }
}

/// Simulates `t_len` values of the given ARMA(1,2) after the burn-in.
pub fn gen_arma12_with<R: Rng>(t_len: usize, c: Arma12, rng: &mut R) -> Vec<f64> {
    let total = t_len + BURN_IN;
    let mut out = Vec::with_capacity(t_len);
    let (mut z, mut e1, mut e2) = (0.0, 0.0, 0.0);
    for t in 0..total {
        let e = normal(rng);
        z = c.b * z + e + c.a1 * e1 + c.a2 * e2;
        e2 = e1;
        e1 = e;
        if t >= BURN_IN {
            out.push(z);
        }
    }
    out
}

/// Draws coefficients then simulates.
pub fn gen_arma12<R: Rng>(t_len: usize, rng: &mut R) -> (Vec<f64>, Arma12) {
    let c = draw_arma12(rng);
    (gen_arma12_with(t_len, c, rng), c)
}

/// `d x d` matrix with i.i.d. U(−1, 1) entries and condition number below [`MAX_CONDITION`].
pub fn draw_mixing<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let sv = m.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if lo > 0.0 && hi / lo < MAX_CONDITION {
            return m;
        }
    }
}

/// Ground truth behind a simulated series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub design: Design,
    pub seed: u64,
    #[serde(with = "matrix_serde")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub b: DMatrix<f64>,
    #[serde(skip)]
    pub u: Option<MatrixSeries>,
    pub col_groups: Partition,
    pub row_groups: Partition,
    /// `E(X_t | past)` for every `t`, when the generator is Markov.
    #[serde(skip)]
    pub cond_mean: Option<Vec<DMatrix<f64>>>,
    /// True dynamics of every latent block as `(rows, cols, model)`.
    pub blocks: Vec<(Vec<usize>, Vec<usize>, BlockModel)>,
    pub arma: Vec<Arma12>,
}

impl SimTruth {
    pub fn latent(&self) -> &MatrixSeries {
        self.u.as_ref().expect("latent series present")
    }

    /// `B U_t Aᵀ` for every `t`.
    pub fn observed(&self) -> Result<MatrixSeries> {
        let at = self.a.transpose();
        self.latent().map(|m| &self.b * m * &at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Example1,
    Example2,
    Example3,
}

impl Design {
    pub fn name(self) -> &'static str {
        match self {
            Design::Example1 => "example1",
            Design::Example2 => "example2",
            Design::Example3 => "example3",
        }
    }
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1" => Ok(Design::Example1),
            "example2" => Ok(Design::Example2),
            "example3" => Ok(Design::Example3),
            _ => Err(Error::InvalidInput(format!("unknown design '{s}'"))),
        }
    }
}

/// Simulates any design.
pub fn generate(design: Design, t_len: usize, p: usize, q: usize, seed: u64) -> Result<(MatrixSeries, SimTruth)> {
    match design {
        Design::Example1 => gen_example1(t_len, p, q, seed),
        Design::Example2 => gen_example2(t_len, p, q, seed),
        Design::Example3 => gen_example3(t_len, p, q, seed),
    }
}

fn check_len(t_len: usize) -> Result<()> {
    if t_len < 2 {
        return Err(Error::InsufficientData { needed: 2, got: t_len });
    }
    Ok(())
}

fn assemble(t_len: usize, p: usize, q: usize, cols: &[Vec<f64>]) -> Result<MatrixSeries> {
    // cols[i * q + j] is the scalar series of cell (i, j)
    MatrixSeries::new((0..t_len).map(|t| DMatrix::from_fn(p, q, |i, j| cols[i * q + j][t])).collect())
}

/// Every latent entry an independent ARMA(1,2); `X_t = B U_t Aᵀ`.
pub fn gen_example1(t_len: usize, p: usize, q: usize, seed: u64) -> Result<(MatrixSeries, SimTruth)> {
    check_len(t_len)?;
    if p == 0 || q == 0 {
        return Err(Error::InvalidInput("dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = draw_mixing(q, &mut rng);
    let b = draw_mixing(p, &mut rng);
    let mut arma = Vec::with_capacity(p * q);
    let cells: Vec<Vec<f64>> = (0..p * q)
        .map(|_| {
            let (z, c) = gen_arma12(t_len, &mut rng);
            arma.push(c);
            z
        })
        .collect();
    let u = assemble(t_len, p, q, &cells)?;
    let truth = SimTruth {
        design: Design::Example1,
        seed,
        a,
        b,
        u: Some(u),
        col_groups: Partition::singletons(q),
        row_groups: Partition::singletons(p),
        cond_mean: None,
        blocks: Vec::new(),
        arma,
    };
    Ok((truth.observed()?, truth))
}

/// Column-only model `X_t = U_t Aᵀ` where columns 2 and 3 are the first column
/// led by one and two steps and column 5 is the fourth led by one step.
pub fn gen_example2(t_len: usize, p: usize, q: usize, seed: u64) -> Result<(MatrixSeries, SimTruth)> {
    check_len(t_len)?;
    if q < 5 || p == 0 {
        return Err(Error::InvalidInput(format!("example2 needs q >= 5 and p >= 1, got p={p}, q={q}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = draw_mixing(q, &mut rng);
    let b = DMatrix::identity(p, p);
    let mut arma = Vec::new();
    let mut cells = vec![Vec::new(); p * q];
    for i in 0..p {
        for j in [0, 3].into_iter().chain(5..q) {
            let (z, c) = gen_arma12(t_len + 2, &mut rng);
            arma.push(c);
            cells[i * q + j] = z;
        }
        let base = cells[i * q].clone();
        let fourth = cells[i * q + 3].clone();
        cells[i * q + 1] = base[1..].to_vec();
        cells[i * q + 2] = base[2..].to_vec();
        cells[i * q + 4] = fourth[1..].to_vec();
    }
    let u = assemble(t_len, p, q, &cells)?;
    let mut groups = vec![vec![0, 1, 2], vec![3, 4]];
    groups.extend((5..q).map(|j| vec![j]));
    let truth = SimTruth {
        design: Design::Example2,
        seed,
        a,
        b,
        u: Some(u),
        col_groups: Partition::from_groups(q, &groups)?,
        row_groups: Partition::singletons(p),
        cond_mean: None,
        blocks: Vec::new(),
        arma,
    };
    Ok((truth.observed()?, truth))
}

/// Row and column groups `{0,1,2}, {3,4}` followed by singletons.
pub fn example3_groups(d: usize) -> Vec<Vec<usize>> {
    let mut g = vec![vec![0, 1, 2], vec![3, 4]];
    g.extend((5..d).map(|k| vec![k]));
    g
}

/// Autoregressive weight of the four matrix blocks.
pub fn example3_lambda(row_group: usize, col_group: usize) -> Option<f64> {
    match (row_group, col_group) {
        (0, 0) => Some(0.81),
        (0, 1) => Some(0.64),
        (1, 0) | (1, 1) => Some(0.25),
        _ => None,
    }
}

fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| normal(rng)).qr().q()
}

fn true_model(kind: ModelKind, shape: (usize, usize), coeffs: Coefficients) -> BlockModel {
    BlockModel {
        kind,
        shape,
        coeffs,
        intercept: DMatrix::zeros(shape.0, shape.1),
        warning: None,
        converged: true,
        iterations: 0,
        objective: Vec::new(),
    }
}

/// Blockwise MAR(1), VAR(1) and AR(1) latent dynamics with `X_t = B U_t Aᵀ`.
pub fn gen_example3(t_len: usize, p: usize, q: usize, seed: u64) -> Result<(MatrixSeries, SimTruth)> {
    check_len(t_len)?;
    if p < 6 || q < 6 {
        return Err(Error::InvalidInput(format!("example3 needs p, q >= 6, got p={p}, q={q}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = draw_mixing(q, &mut rng);
    let b = draw_mixing(p, &mut rng);
    let row_groups = example3_groups(p);
    let col_groups = example3_groups(q);
    let mut blocks = Vec::new();
    for (gi, rg) in row_groups.iter().enumerate() {
        for (gj, cg) in col_groups.iter().enumerate() {
            let shape = (rg.len(), cg.len());
            let model = match example3_lambda(gi, gj) {
                Some(lambda) => {
                    let phi1 = random_orthogonal(shape.0, &mut rng) * lambda;
                    let phi2 = random_orthogonal(shape.1, &mut rng);
                    true_model(ModelKind::Mar1, shape, Coefficients::Mar1 { phi1, phi2 })
                }
                None if shape == (1, 1) => {
                    let phi = rng.random_range(0.1..0.3);
                    true_model(ModelKind::Ar1, shape, Coefficients::Ar1 { phi })
                }
                None => {
                    let d = shape.0 * shape.1;
                    let raw = DMatrix::from_fn(d, d, |_, _| rng.random_range(0.0..1.0));
                    let target = rng.random_range(0.1..0.3);
                    let phi = &raw * (target / raw.singular_values().max());
                    true_model(ModelKind::Var1, shape, Coefficients::Var1 { phi })
                }
            };
            blocks.push((rg.clone(), cg.clone(), model));
        }
    }
    let one_step = |u: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(p, q);
        for (rg, cg, model) in &blocks {
            let f = crate::forecasting::forecast_block(model, &u.select_rows(rg).select_columns(cg), 1)?;
            for (x, &i) in rg.iter().enumerate() {
                for (y, &j) in cg.iter().enumerate() {
                    m[(i, j)] = f[(x, y)];
                }
            }
        }
        Ok(m)
    };
    let mut cur = DMatrix::zeros(p, q);
    let mut us = Vec::with_capacity(t_len);
    let mut mus = Vec::with_capacity(t_len);
    let at = a.transpose();
    for t in 0..t_len + BURN_IN {
        let mean = one_step(&cur)?;
        cur = &mean + DMatrix::from_fn(p, q, |_, _| normal(&mut rng));
        if t >= BURN_IN {
            mus.push(&b * &mean * &at);
            us.push(cur.clone());
        }
    }
    let truth = SimTruth {
        design: Design::Example3,
        seed,
        a,
        b,
        u: Some(MatrixSeries::new(us)?),
        col_groups: Partition::from_groups(q, &col_groups)?,
        row_groups: Partition::from_groups(p, &row_groups)?,
        cond_mean: Some(mus),
        blocks,
        arma: Vec::new(),
    };
    Ok((truth.observed()?, truth))
}

/// `[2q(√q − 1)]⁻¹ Σ_j (1/maxᵢ|d_ij| + 1/maxᵢ|d_ji| − 2)` with `d = Âᵀ A`, capped to `[0, 1]`.
///
/// Zero for any signed column permutation. For `q = 1` the value is 0.
pub fn metric_d(a_hat: &DMatrix<f64>, a_star: &DMatrix<f64>) -> Result<f64> {
    if !a_hat.is_square() || a_hat.shape() != a_star.shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("two square matrices of size {}", a_star.nrows()),
            actual: format!("{:?} and {:?}", a_hat.shape(), a_star.shape()),
        });
    }
    let q = a_hat.nrows();
    if q <= 1 {
        return Ok(0.0);
    }
    let d = a_hat.transpose() * a_star;
    let mut total = 0.0;
    for j in 0..q {
        let col = d.column(j).amax();
        let row = d.row(j).amax();
        if col == 0.0 || row == 0.0 {
            return Ok(1.0);
        }
        total += 1.0 / col + 1.0 / row - 2.0;
    }
    let qf = q as f64;
    Ok((total / (2.0 * qf * (qf.sqrt() - 1.0))).clamp(0.0, 1.0))
}

/// `n_c⁻¹ Σ_j {1 − tr(A_jA_jᵀÂ_jÂ_jᵀ) / rank(A_j)}` over matched blocks with orthonormal columns.
pub fn metric_d1(a_hat_groups: &[DMatrix<f64>], a_star_groups: &[DMatrix<f64>]) -> Result<f64> {
    if a_hat_groups.len() != a_star_groups.len() || a_star_groups.is_empty() {
        return Err(Error::IncomparableSegmentations(format!(
            "{} estimated blocks against {} true blocks",
            a_hat_groups.len(),
            a_star_groups.len()
        )));
    }
    let mut total = 0.0;
    for (h, s) in a_hat_groups.iter().zip(a_star_groups) {
        if h.shape() != s.shape() {
            return Err(Error::IncomparableSegmentations(format!(
                "block of shape {:?} against {:?}",
                h.shape(),
                s.shape()
            )));
        }
        // tr(A Aᵀ Â Âᵀ) = ‖Aᵀ Â‖_F²
        let overlap = (s.transpose() * h).norm_squared();
        total += 1.0 - overlap / s.ncols() as f64;
    }
    Ok(total / a_star_groups.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegClass {
    Correct,
    Merging,
    Splitting,
    Other,
}

impl SegClass {
    pub const ALL: [SegClass; 4] = [SegClass::Correct, SegClass::Merging, SegClass::Splitting, SegClass::Other];

    pub fn name(self) -> &'static str {
        match self {
            SegClass::Correct => "correct",
            SegClass::Merging => "merging",
            SegClass::Splitting => "splitting",
            SegClass::Other => "other",
        }
    }
}

fn canonical(groups: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut g: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.sort_unstable();
            g
        })
        .collect();
    g.sort();
    g
}

/// True when `coarse` is `fine` with exactly two groups united.
fn unites_two(coarse: &[Vec<usize>], fine: &[Vec<usize>]) -> bool {
    if coarse.len() + 1 != fine.len() {
        return false;
    }
    let fine_set: std::collections::BTreeSet<&Vec<usize>> = fine.iter().collect();
    let new: Vec<&Vec<usize>> = coarse.iter().filter(|g| !fine_set.contains(g)).collect();
    if new.len() != 1 {
        return false;
    }
    let coarse_set: std::collections::BTreeSet<&Vec<usize>> = coarse.iter().collect();
    let parts: Vec<&Vec<usize>> = fine.iter().filter(|g| !coarse_set.contains(g)).collect();
    if parts.len() != 2 {
        return false;
    }
    let mut merged: Vec<usize> = parts.iter().flat_map(|g| g.iter().copied()).collect();
    merged.sort_unstable();
    &merged == new[0]
}

/// Compares a found partition with the true one.
pub fn classify_segmentation(found: &Partition, truth: &Partition) -> SegClass {
    let f = canonical(&found.groups);
    let t = canonical(&truth.groups);
    if f == t {
        SegClass::Correct
    } else if unites_two(&f, &t) {
        SegClass::Merging
    } else if unites_two(&t, &f) {
        SegClass::Splitting
    } else {
        SegClass::Other
    }
}

/// Labels every estimated direction (column of `vectors`) with the true group
/// whose span in `target` captures most of it, filling every group to its size.
///
/// Pairs are taken greedily by decreasing `‖P_g γ̂_k‖²`; ties go to the lower indices.
pub fn assign_to_groups(vectors: &DMatrix<f64>, target: &DMatrix<f64>, groups: &[Vec<usize>]) -> Vec<usize> {
    let d = vectors.ncols();
    let proj = target.transpose() * vectors;
    let mut scores = Vec::with_capacity(d * groups.len());
    for k in 0..d {
        for (g, members) in groups.iter().enumerate() {
            let s: f64 = members.iter().map(|&c| proj[(c, k)].powi(2)).sum();
            scores.push((s, k, g));
        }
    }
    scores.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut label = vec![usize::MAX; d];
    let mut room: Vec<usize> = groups.iter().map(Vec::len).collect();
    for (_, k, g) in scores {
        if label[k] == usize::MAX && room[g] > 0 {
            label[k] = g;
            room[g] -= 1;
        }
    }
    label
}

/// The partition of direction indices induced by group labels.
pub fn induced_partition(labels: &[usize], n_groups: usize) -> Result<Partition> {
    let mut groups = vec![Vec::new(); n_groups];
    for (k, &g) in labels.iter().enumerate() {
        groups.get_mut(g).ok_or_else(|| Error::IndexOutOfRange(format!("group label {g}")))?.push(k);
    }
    groups.retain(|g| !g.is_empty());
    Partition::from_groups(labels.len(), &groups)
}

/// Settings of one replication experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub design: Design,
    pub p: usize,
    pub q: usize,
    /// Training length; forecasting designs simulate `t + holdout` observations.
    pub t: usize,
    pub pipeline: PipelineConfig,
    pub holdout: usize,
    pub horizon: usize,
    pub scheme: Scheme,
}

impl BenchConfig {
    pub fn new(design: Design, p: usize, q: usize, t: usize) -> Self {
        Self {
            design,
            p,
            q,
            t,
            pipeline: PipelineConfig::default(),
            holdout: 10,
            horizon: 1,
            scheme: Scheme::Refit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.t < 2 || self.p == 0 || self.q == 0 {
            return Err(Error::InvalidInput("bench needs T >= 2 and positive dimensions".into()));
        }
        if self.design == Design::Example3 && (self.holdout == 0 || self.horizon != 1) {
            return Err(Error::InvalidInput(
                "example3 scores one-step forecasts against the conditional mean; use holdout >= 1 and horizon 1".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub index: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub class: Option<SegClass>,
    pub error: Option<String>,
}

/// Mean, standard deviation and count of one metric over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Aggregated replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub schema: String,
    pub config: BenchConfig,
    pub n_reps: usize,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub summaries: BTreeMap<String, Summary>,
    pub class_counts: BTreeMap<SegClass, usize>,
    pub class_frequencies: BTreeMap<SegClass, f64>,
    pub failures: usize,
    pub reps: Vec<RepOutcome>,
}

/// Seed of replication `index`, a SplitMix64 step away from the master seed.
pub fn rep_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sum by recursive halving, independent of thread scheduling.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for a single value).
pub fn summarize(v: &[f64]) -> Summary {
    let n = v.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, sd: f64::NAN };
    }
    let mean = pairwise_sum(v) / n as f64;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let sd = if n > 1 { (pairwise_sum(&dev) / (n - 1) as f64).sqrt() } else { 0.0 };
    Summary { n, mean, sd }
}

fn centred_latent(truth: &SimTruth, n: usize) -> Result<MatrixSeries> {
    Ok(center(&truth.latent().head(n)?).0)
}

/// Sample-proxy orthogonal factors over the first `n` observations.
fn proxies(x: &MatrixSeries, truth: &SimTruth, n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (xc, _) = center(&x.head(n)?);
    proxy_targets(&truth.a, &truth.b, &centred_latent(truth, n)?, &xc)
}

fn run_example1(cfg: &BenchConfig, seed: u64, metrics: &mut BTreeMap<String, f64>) -> Result<()> {
    let (x, truth) = gen_example1(cfg.t, cfg.p, cfg.q, seed)?;
    let (xc, _) = center(&x);
    let (a_star, b_star) = proxies(&x, &truth, cfg.t)?;
    let col = w_estimate(&xc, Mode::Columns, cfg.pipeline.tau0, cfg.pipeline.eig_transform)?;
    let row = w_estimate(&xc, Mode::Rows, cfg.pipeline.tau0, cfg.pipeline.eig_transform)?;
    metrics.insert("D_A".into(), metric_d(&col.eig.eigenvectors, &a_star)?);
    metrics.insert("D_B".into(), metric_d(&row.eig.eigenvectors, &b_star)?);
    Ok(())
}

fn run_example2(cfg: &BenchConfig, seed: u64, metrics: &mut BTreeMap<String, f64>) -> Result<SegClass> {
    let (x, truth) = gen_example2(cfg.t, cfg.p, cfg.q, seed)?;
    let (xc, _) = center(&x);
    let (a_star, _) = proxies(&x, &truth, cfg.t)?;
    let col = w_estimate(&xc, Mode::Columns, cfg.pipeline.tau0, cfg.pipeline.eig_transform)?;
    let seg = segment(&xc, &col, &cfg.pipeline.segment)?;
    let vectors = &col.eig.eigenvectors;
    let labels = assign_to_groups(vectors, &a_star, &truth.col_groups.groups);
    let truth_part = induced_partition(&labels, truth.col_groups.n_groups())?;
    let class = classify_segmentation(&seg.partition(), &truth_part);
    metrics.insert("n_groups".into(), seg.n_groups as f64);
    if class == SegClass::Correct {
        let mut hat = Vec::new();
        let mut star = Vec::new();
        for (g, members) in truth.col_groups.groups.iter().enumerate() {
            let found: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == g).collect();
            hat.push(vectors.select_columns(&found));
            star.push(a_star.select_columns(members));
        }
        metrics.insert("D1".into(), metric_d1(&hat, &star)?);
    }
    Ok(class)
}

/// Transform that uses estimated directions grouped by the true structure.
fn oracle_o1_pair(hist: &MatrixSeries, truth: &SimTruth, config: &PipelineConfig) -> Result<TransformPair> {
    let n = hist.len();
    let (xc, mean) = center(hist);
    let col = w_estimate(&xc, Mode::Columns, config.tau0, config.eig_transform)?;
    let row = w_estimate(&xc, Mode::Rows, config.tau0, config.eig_transform)?;
    let (a_star, b_star) = proxy_targets(&truth.a, &truth.b, &centred_latent(truth, n)?, &xc)?;
    let col_labels = assign_to_groups(&col.eig.eigenvectors, &a_star, &truth.col_groups.groups);
    let row_labels = assign_to_groups(&row.eig.eigenvectors, &b_star, &truth.row_groups.groups);
    let cp = induced_partition(&col_labels, truth.col_groups.n_groups())?;
    let rp = induced_partition(&row_labels, truth.row_groups.n_groups())?;
    TransformPair::from_partitions(&col, &row, &cp, &rp, mean)
}

/// Transform built from the true mixing matrices and the true latent series.
fn oracle_o2_pair(hist: &MatrixSeries, truth: &SimTruth) -> Result<TransformPair> {
    let n = hist.len();
    let (xc, mean) = center(hist);
    let (a_star, b_star) = proxy_targets(&truth.a, &truth.b, &centred_latent(truth, n)?, &xc)?;
    let (s1, s2) = covariance_pair(&xc)?;
    let pair = TransformPair {
        a_star: a_star.select_columns(&truth.col_groups.permutation),
        b_star: b_star.select_columns(&truth.row_groups.permutation),
        sigma1_inv_sqrt: inv_sqrt(&s1, default_floor(&s1))?,
        sigma2_inv_sqrt: inv_sqrt(&s2, default_floor(&s2))?,
        sigma1_sqrt: sqrt_sym(&s1)?,
        sigma2_sqrt: sqrt_sym(&s2)?,
        col_groups: truth.col_groups.contiguous(),
        row_groups: truth.row_groups.contiguous(),
        mean,
    };
    Ok(pair)
}

fn combine_classes(r: SegClass, c: SegClass) -> SegClass {
    use SegClass::*;
    match (r, c) {
        (Correct, Correct) => Correct,
        (Correct, Merging) | (Merging, Correct) => Merging,
        (Correct, Splitting) | (Splitting, Correct) => Splitting,
        _ => Other,
    }
}

fn run_example3(cfg: &BenchConfig, seed: u64, metrics: &mut BTreeMap<String, f64>) -> Result<SegClass> {
    let total = cfg.t + cfg.holdout;
    let (x, truth) = gen_example3(total, cfg.p, cfg.q, seed)?;
    let mu_all = truth.cond_mean.as_ref().expect("example3 records conditional means");
    let mu = &mu_all[cfg.t..];
    let truth_ref = Truth::ConditionalMean(mu);
    let (m, h) = (cfg.holdout, cfg.horizon);

    let seg = rolling_backtest(&x, m, h, cfg.scheme, &cfg.pipeline, truth_ref)?;
    metrics.insert("mse_segmentation".into(), seg.mse);
    let o1 = match cfg.scheme {
        Scheme::Refit => backtest_with(&x, m, h, truth_ref, "oracle_o1", Some(cfg.scheme), |hist| {
            forecast_with_transform(hist, &oracle_o1_pair(hist, &truth, &cfg.pipeline)?, h)
        })?,
        Scheme::Fixed => {
            let pair = oracle_o1_pair(&x.head(cfg.t)?, &truth, &cfg.pipeline)?;
            backtest_with(&x, m, h, truth_ref, "oracle_o1", Some(cfg.scheme), |hist| forecast_with_transform(hist, &pair, h))?
        }
    };
    metrics.insert("mse_o1".into(), o1.mse);
    let o2 = match cfg.scheme {
        Scheme::Refit => backtest_with(&x, m, h, truth_ref, "oracle_o2", Some(cfg.scheme), |hist| {
            forecast_with_transform(hist, &oracle_o2_pair(hist, &truth)?, h)
        })?,
        Scheme::Fixed => {
            let pair = oracle_o2_pair(&x.head(cfg.t)?, &truth)?;
            backtest_with(&x, m, h, truth_ref, "oracle_o2", Some(cfg.scheme), |hist| forecast_with_transform(hist, &pair, h))?
        }
    };
    metrics.insert("mse_o2".into(), o2.mse);
    for kind in [Baseline::Var1Stacked, Baseline::Mar1Direct] {
        let r = baseline_forecasts(&x, m, h, kind, truth_ref)?;
        metrics.insert(format!("mse_{}", kind.name()), r.mse);
    }

    // segmentation quality on the training window
    let train = x.head(cfg.t)?;
    let fitted = fit_transform(&train, &cfg.pipeline)?;
    let (a_star, b_star) = proxies(&x, &truth, cfg.t)?;
    let classify = |vectors: &DMatrix<f64>, target: &DMatrix<f64>, groups: &Partition, found: Partition| {
        let labels = assign_to_groups(vectors, target, &groups.groups);
        induced_partition(&labels, groups.n_groups()).map(|t| classify_segmentation(&found, &t))
    };
    let cc = classify(&fitted.col_w.eig.eigenvectors, &a_star, &truth.col_groups, fitted.col_segmentation.partition())?;
    let rc = classify(&fitted.row_w.eig.eigenvectors, &b_star, &truth.row_groups, fitted.row_segmentation.partition())?;
    metrics.insert("n_col_groups".into(), fitted.col_segmentation.n_groups as f64);
    metrics.insert("n_row_groups".into(), fitted.row_segmentation.n_groups as f64);
    metrics.insert("correct_cols".into(), f64::from(u8::from(cc == SegClass::Correct)));
    metrics.insert("correct_rows".into(), f64::from(u8::from(rc == SegClass::Correct)));
    Ok(combine_classes(rc, cc))
}

/// Runs one replication with the given seed.
pub fn run_one(cfg: &BenchConfig, index: usize, seed: u64) -> RepOutcome {
    let mut metrics = BTreeMap::new();
    let res = match cfg.design {
        Design::Example1 => run_example1(cfg, seed, &mut metrics).map(|_| None),
        Design::Example2 => run_example2(cfg, seed, &mut metrics).map(Some),
        Design::Example3 => run_example3(cfg, seed, &mut metrics).map(Some),
    };
    match res {
        Ok(class) => RepOutcome { index, seed, metrics, class, error: None },
        Err(e) => RepOutcome { index, seed, metrics: BTreeMap::new(), class: None, error: Some(e.to_string()) },
    }
}

/// Runs `n_reps` seeded replications in parallel and aggregates them in index order.
pub fn run_replications(cfg: &BenchConfig, n_reps: usize, master_seed: u64) -> Result<ReplicationReport> {
    cfg.validate()?;
    if n_reps == 0 {
        return Err(Error::InvalidInput("at least one replication is required".into()));
    }
    let seeds: Vec<u64> = (0..n_reps).map(|i| rep_seed(master_seed, i)).collect();
    let reps: Vec<RepOutcome> = seeds.par_iter().enumerate().map(|(i, &s)| run_one(cfg, i, s)).collect();
    Ok(aggregate(*cfg, master_seed, seeds, reps))
}

fn aggregate(config: BenchConfig, master_seed: u64, seeds: Vec<u64>, reps: Vec<RepOutcome>) -> ReplicationReport {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &reps {
        for (k, v) in &r.metrics {
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    let summaries = values.iter().map(|(k, v)| (k.clone(), summarize(v))).collect();
    let failures = reps.iter().filter(|r| r.error.is_some()).count();
    let mut class_counts = BTreeMap::new();
    let mut class_frequencies = BTreeMap::new();
    let classified = reps.iter().filter(|r| r.class.is_some()).count();
    if classified > 0 {
        for c in SegClass::ALL {
            let n = reps.iter().filter(|r| r.class == Some(c)).count();
            class_counts.insert(c, n);
            class_frequencies.insert(c, n as f64 / classified as f64);
        }
    }
    ReplicationReport {
        schema: SCHEMA.to_string(),
        config,
        n_reps: reps.len(),
        master_seed,
        seeds,
        summaries,
        class_counts,
        class_frequencies,
        failures,
        reps,
    }
}

impl ReplicationReport {
    /// `metric,n,mean,sd` rows followed by `class:<name>,count,frequency,` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,n,mean,sd\n");
        for (k, s) in &self.summaries {
            out.push_str(&format!("{k},{},{:.16e},{:.16e}\n", s.n, s.mean, s.sd));
        }
        for (c, n) in &self.class_counts {
            out.push_str(&format!("class:{},{n},{:.16e},\n", c.name(), self.class_frequencies[c]));
        }
        out.push_str(&format!("failures,{},,\n", self.failures));
        out
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summaries.get(metric).map(|s| s.mean)
    }

    pub fn frequency(&self, class: SegClass) -> Option<f64> {
        self.class_frequencies.get(&class).copied()
    }
}
