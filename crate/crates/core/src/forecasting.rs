//! Per-block autoregressive models, rolling backtests and forecast error summaries.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{matrix_serde, MatrixSeries};
use crate::transform::{fit_transform, from_latent_one, to_latent, PipelineConfig, TransformPair};

/// Largest admissible absolute AR(1) coefficient.
pub const AR1_CLAMP: f64 = 0.999;
/// Relative ridge added to a singular Gram matrix.
pub const RIDGE: f64 = 1e-8;
/// Stopping threshold on the relative objective decrease of the MAR(1) fit.
pub const MAR1_TOL: f64 = 1e-8;
pub const MAR1_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ar1,
    Var1,
    Mar1,
}

/// Model family used for a block of the given shape.
pub fn model_for_block(rows: usize, cols: usize) -> Result<ModelKind> {
    match (rows, cols) {
        (0, _) | (_, 0) => Err(Error::InvalidInput("block dimensions must be positive".into())),
        (1, 1) => Ok(ModelKind::Ar1),
        (1, _) | (_, 1) => Ok(ModelKind::Var1),
        _ => Ok(ModelKind::Mar1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficients {
    Ar1 {
        phi: f64,
    },
    /// Acts on the block flattened column by column.
    Var1 {
        #[serde(with = "matrix_serde")]
        phi: DMatrix<f64>,
    },
    Mar1 {
        #[serde(with = "matrix_serde")]
        phi1: DMatrix<f64>,
        #[serde(with = "matrix_serde")]
        phi2: DMatrix<f64>,
    },
}

/// A fitted one-lag model for one block of the latent series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockModel {
    pub kind: ModelKind,
    pub shape: (usize, usize),
    pub coeffs: Coefficients,
    #[serde(with = "matrix_serde")]
    pub intercept: DMatrix<f64>,
    pub warning: Option<String>,
    /// False only for a MAR(1) fit that hit the iteration cap.
    pub converged: bool,
    pub iterations: usize,
    /// Objective after every half step of the MAR(1) alternation.
    pub objective: Vec<f64>,
}

impl BlockModel {
    fn new(kind: ModelKind, shape: (usize, usize), coeffs: Coefficients, intercept: DMatrix<f64>) -> Self {
        Self { kind, shape, coeffs, intercept, warning: None, converged: true, iterations: 0, objective: Vec::new() }
    }

    /// One step of the centred map.
    fn step(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.coeffs {
            Coefficients::Ar1 { phi } => z * *phi,
            Coefficients::Var1 { phi } => {
                let v = phi * DVector::from_column_slice(z.as_slice());
                DMatrix::from_column_slice(z.nrows(), z.ncols(), v.as_slice())
            }
            Coefficients::Mar1 { phi1, phi2 } => phi1 * z * phi2.transpose(),
        }
    }
}

fn centred_scalar(z: &[f64]) -> (Vec<f64>, f64) {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    (z.iter().map(|v| v - mean).collect(), mean)
}

/// Least-squares AR(1) on the centred series, `|φ|` clamped to [`AR1_CLAMP`].
pub fn fit_ar1(z: &[f64]) -> Result<BlockModel> {
    if z.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: z.len() });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("AR(1) input".into()));
    }
    let (c, mean) = centred_scalar(z);
    let num: f64 = c.windows(2).map(|w| w[1] * w[0]).sum();
    let den: f64 = c[..c.len() - 1].iter().map(|v| v * v).sum();
    let mut warning = None;
    let phi = if den > 0.0 {
        (num / den).clamp(-AR1_CLAMP, AR1_CLAMP)
    } else {
        warning = Some("zero variance; coefficient set to 0".to_string());
        0.0
    };
    let mut model = BlockModel::new(
        ModelKind::Ar1,
        (1, 1),
        Coefficients::Ar1 { phi },
        DMatrix::from_element(1, 1, mean),
    );
    model.warning = warning;
    Ok(model)
}

/// `num · gram⁻¹` for a symmetric `gram`, adding a ridge of `RIDGE · tr(gram)` if it is singular.
/// Returns `None` when the Gram matrix is identically zero.
fn solve_gram(num: &DMatrix<f64>, gram: &DMatrix<f64>) -> Option<(DMatrix<f64>, bool)> {
    let tr = gram.trace();
    if tr <= 0.0 || !tr.is_finite() {
        return None;
    }
    if let Some(ch) = gram.clone().cholesky() {
        let sol = ch.solve(&num.transpose()).transpose();
        if sol.iter().all(|v| v.is_finite()) {
            return Some((sol, false));
        }
    }
    let d = gram.nrows();
    let ridged = gram + DMatrix::identity(d, d) * (RIDGE * tr);
    let ch = ridged.cholesky()?;
    Some((ch.solve(&num.transpose()).transpose(), true))
}

/// Least-squares VAR(1) on the centred vectors. One-dimensional input is fitted by [`fit_ar1`].
pub fn fit_var1(v: &[DVector<f64>]) -> Result<BlockModel> {
    let d = v.first().map(|x| x.len()).ok_or_else(|| Error::Empty("VAR(1) input".into()))?;
    if d == 0 || v.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidInput("VAR(1) vectors must share one positive length".into()));
    }
    if d == 1 {
        let z: Vec<f64> = v.iter().map(|x| x[0]).collect();
        let mut m = fit_ar1(&z)?;
        m.kind = ModelKind::Var1;
        if let Coefficients::Ar1 { phi } = m.coeffs {
            m.coeffs = Coefficients::Var1 { phi: DMatrix::from_element(1, 1, phi) };
        }
        return Ok(m);
    }
    if v.len() < d + 2 {
        return Err(Error::InsufficientData { needed: d + 2, got: v.len() });
    }
    let n = v.len();
    let data = DMatrix::from_fn(n, d, |t, k| v[t][k]);
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("VAR(1) input".into()));
    }
    let mean = data.row_mean();
    let centred = DMatrix::from_fn(n, d, |t, k| data[(t, k)] - mean[k]);
    let past = centred.rows(0, n - 1);
    let fut = centred.rows(1, n - 1);
    let gram = past.transpose() * past;
    let cross = fut.transpose() * past;
    let (phi, warning) = match solve_gram(&cross, &gram) {
        Some((phi, false)) => (phi, None),
        Some((phi, true)) => (phi, Some("singular Gram matrix; ridge applied".to_string())),
        None => (DMatrix::zeros(d, d), Some("zero variance; coefficients set to 0".to_string())),
    };
    let mut model = BlockModel::new(
        ModelKind::Var1,
        (d, 1),
        Coefficients::Var1 { phi },
        DMatrix::from_column_slice(d, 1, mean.transpose().as_slice()),
    );
    model.warning = warning;
    Ok(model)
}

fn mar1_objective(u: &[DMatrix<f64>], phi1: &DMatrix<f64>, phi2: &DMatrix<f64>) -> f64 {
    let phi2t = phi2.transpose();
    u.windows(2).map(|w| (&w[1] - phi1 * &w[0] * &phi2t).norm_squared()).sum()
}

/// MAR(1) `U_t = Φ₁U_{t−1}Φ₂ᵀ + E_t` by alternating least squares from `Φ₂ = I`.
///
/// The scale is fixed by `‖Φ₁‖_F = √rows`. The objective is checked to be
/// non-increasing across every half step.
pub fn fit_mar1(u: &MatrixSeries) -> Result<BlockModel> {
    let (t_len, r, c) = u.dims();
    if r < 2 || c < 2 {
        return Err(Error::InvalidInput(format!("MAR(1) needs both dimensions > 1, got {r}x{c}")));
    }
    if t_len < r + c + 2 {
        return Err(Error::InsufficientData { needed: r + c + 2, got: t_len });
    }
    let mean = u.mean();
    let z: Vec<DMatrix<f64>> = u.iter().map(|m| m - &mean).collect();
    let mut phi1 = DMatrix::zeros(r, r);
    let mut phi2 = DMatrix::<f64>::identity(c, c);
    let mut warning = None;
    let mut objective = Vec::new();
    let mut prev = mar1_objective(&z, &phi1, &phi2);
    let mut converged = false;
    let mut iterations = 0;
    let check = |history: &mut Vec<f64>, value: f64| -> Result<()> {
        if let Some(&last) = history.last() {
            if value > last * (1.0 + 1e-9) + f64::MIN_POSITIVE {
                return Err(Error::NonFinite(format!("MAR(1) objective increased from {last:e} to {value:e}")));
            }
        }
        history.push(value);
        Ok(())
    };
    'outer: for it in 1..=MAR1_MAX_ITER {
        iterations = it;
        // Φ₁ given Φ₂: regress U_t on W_t = U_{t−1}Φ₂ᵀ from the left.
        let phi2t = phi2.transpose();
        let mut num = DMatrix::zeros(r, r);
        let mut gram = DMatrix::zeros(r, r);
        for w in z.windows(2) {
            let wt = &w[0] * &phi2t;
            num += &w[1] * wt.transpose();
            gram += &wt * wt.transpose();
        }
        match solve_gram(&num, &gram) {
            Some((p, ridged)) => {
                phi1 = p;
                if ridged {
                    warning = Some("singular Gram matrix; ridge applied".to_string());
                }
            }
            None => {
                phi1 = DMatrix::zeros(r, r);
                warning = Some("zero variance; coefficients set to 0".to_string());
                objective.push(mar1_objective(&z, &phi1, &phi2));
                converged = true;
                break 'outer;
            }
        }
        check(&mut objective, mar1_objective(&z, &phi1, &phi2))?;
        // Φ₂ given Φ₁: U_tᵀ ≈ Φ₂ V_tᵀ with V_t = Φ₁U_{t−1}.
        let mut num = DMatrix::zeros(c, c);
        let mut gram = DMatrix::zeros(c, c);
        for w in z.windows(2) {
            let v = &phi1 * &w[0];
            num += w[1].transpose() * &v;
            gram += v.transpose() * &v;
        }
        match solve_gram(&num, &gram) {
            Some((p, ridged)) => {
                phi2 = p;
                if ridged {
                    warning = Some("singular Gram matrix; ridge applied".to_string());
                }
            }
            None => {
                // Φ₁ annihilates the data: the zero map is optimal.
                phi2 = DMatrix::zeros(c, c);
                objective.push(mar1_objective(&z, &phi1, &phi2));
                converged = true;
                break 'outer;
            }
        }
        let obj = mar1_objective(&z, &phi1, &phi2);
        check(&mut objective, obj)?;
        if prev - obj <= MAR1_TOL * prev.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        prev = obj;
    }
    let n1 = phi1.norm();
    if n1 > 0.0 {
        let s = n1 / (r as f64).sqrt();
        phi1 /= s;
        phi2 *= s;
    }
    if !converged {
        warning = Some(format!("not converged after {MAR1_MAX_ITER} iterations"));
    }
    let mut model = BlockModel::new(ModelKind::Mar1, (r, c), Coefficients::Mar1 { phi1, phi2 }, mean);
    model.warning = warning;
    model.converged = converged;
    model.iterations = iterations;
    model.objective = objective;
    Ok(model)
}

/// Fits the model family matching the block shape.
pub fn fit_block(u: &MatrixSeries) -> Result<BlockModel> {
    fit_kind(u, model_for_block(u.rows(), u.cols())?)
}

/// Fits a given family; a VAR(1) uses the column-major flattening of each block.
pub fn fit_kind(u: &MatrixSeries, kind: ModelKind) -> Result<BlockModel> {
    let shape = (u.rows(), u.cols());
    let mut model = match kind {
        ModelKind::Ar1 => {
            if shape != (1, 1) {
                return Err(Error::InvalidInput(format!("AR(1) needs a 1x1 block, got {}x{}", shape.0, shape.1)));
            }
            fit_ar1(&u.cell(0, 0))?
        }
        ModelKind::Var1 => {
            let v: Vec<DVector<f64>> = u.iter().map(|m| DVector::from_column_slice(m.as_slice())).collect();
            fit_var1(&v)?
        }
        ModelKind::Mar1 => fit_mar1(u)?,
    };
    model.intercept = DMatrix::from_column_slice(shape.0, shape.1, model.intercept.as_slice());
    model.shape = shape;
    Ok(model)
}

/// Iterates the fitted one-step map `h` times on the centred block and re-adds the intercept.
pub fn forecast_block(model: &BlockModel, last: &DMatrix<f64>, h: usize) -> Result<DMatrix<f64>> {
    if h == 0 {
        return Err(Error::InvalidInput("forecast horizon must be at least 1".into()));
    }
    if last.shape() != model.shape {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", model.shape.0, model.shape.1),
            actual: format!("{}x{}", last.nrows(), last.ncols()),
        });
    }
    let mut z = last - &model.intercept;
    for _ in 0..h {
        z = model.step(&z);
    }
    Ok(z + &model.intercept)
}

/// Sub-series of rows `rows` and columns `cols`.
pub fn block_series(u: &MatrixSeries, rows: &[usize], cols: &[usize]) -> Result<MatrixSeries> {
    u.map(|m| m.select_rows(rows).select_columns(cols))
}

/// Fits one model per (row group, column group) block of `u` and forecasts `h` steps.
pub fn forecast_latent(
    u: &MatrixSeries,
    row_groups: &[Vec<usize>],
    col_groups: &[Vec<usize>],
    h: usize,
) -> Result<(DMatrix<f64>, Vec<BlockModel>)> {
    let mut out = DMatrix::zeros(u.rows(), u.cols());
    let mut models = Vec::with_capacity(row_groups.len() * col_groups.len());
    let last = u.get(u.len() - 1);
    for rg in row_groups {
        for cg in col_groups {
            let b = block_series(u, rg, cg)?;
            let model = fit_block(&b)?;
            let f = forecast_block(&model, &last.select_rows(rg).select_columns(cg), h)?;
            for (a, &i) in rg.iter().enumerate() {
                for (b, &j) in cg.iter().enumerate() {
                    out[(i, j)] = f[(a, b)];
                }
            }
            models.push(model);
        }
    }
    Ok((out, models))
}

/// Forecasts `X_{n+h}` from a history of length `n` through a given transform.
pub fn forecast_with_transform(history: &MatrixSeries, pair: &TransformPair, h: usize) -> Result<DMatrix<f64>> {
    let centred = history.map(|m| m - &pair.mean)?;
    let u = to_latent(&centred, pair)?;
    let (uf, _) = forecast_latent(&u, &pair.row_groups, &pair.col_groups, h)?;
    Ok(from_latent_one(&uf, pair) + &pair.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Re-estimate transform and segmentation at every forecast origin.
    Refit,
    /// Estimate them once on the training window; refit only block models.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Realized,
    ConditionalMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Mar1Direct,
    Var1Stacked,
    Ar1PerCell,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mar1Direct => "mar1_direct",
            Baseline::Var1Stacked => "var1_stacked",
            Baseline::Ar1PerCell => "ar1_per_cell",
        }
    }
}

/// Values the forecasts are scored against.
#[derive(Debug, Clone, Copy)]
pub enum Truth<'a> {
    /// The observed series itself.
    Realized,
    /// One matrix per holdout target, in order.
    ConditionalMean(&'a [DMatrix<f64>]),
}

impl Truth<'_> {
    fn kind(&self) -> TruthKind {
        match self {
            Truth::Realized => TruthKind::Realized,
            Truth::ConditionalMean(_) => TruthKind::ConditionalMean,
        }
    }
}

/// Rolling forecast errors for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub method: String,
    pub horizon: usize,
    pub holdout: usize,
    pub scheme: Option<Scheme>,
    pub truth_kind: TruthKind,
    /// 0-based index of every target observation.
    pub target_index: Vec<usize>,
    #[serde(with = "matrix_serde::seq")]
    pub predictions: Vec<DMatrix<f64>>,
    #[serde(with = "matrix_serde::seq")]
    pub targets: Vec<DMatrix<f64>>,
    /// Signed error `X̂_s − truth_s` per target.
    #[serde(with = "matrix_serde::seq")]
    pub errors: Vec<DMatrix<f64>>,
    /// Mean squared error of every target.
    pub step_mse: Vec<f64>,
    /// Mean over targets of the squared error of every cell.
    #[serde(with = "matrix_serde")]
    pub per_cell_mse: DMatrix<f64>,
    /// Mean of all squared errors.
    pub mse: f64,
}

impl ForecastReport {
    fn build(
        method: String,
        horizon: usize,
        scheme: Option<Scheme>,
        truth_kind: TruthKind,
        target_index: Vec<usize>,
        predictions: Vec<DMatrix<f64>>,
        targets: Vec<DMatrix<f64>>,
    ) -> Self {
        let errors: Vec<DMatrix<f64>> = predictions.iter().zip(&targets).map(|(p, t)| p - t).collect();
        let (p, q) = errors[0].shape();
        let cells = (p * q) as f64;
        let step_mse = errors.iter().map(|e| e.norm_squared() / cells).collect();
        let mut per_cell_mse = DMatrix::zeros(p, q);
        for e in &errors {
            per_cell_mse += e.component_mul(e);
        }
        per_cell_mse /= errors.len() as f64;
        let mse = mean_squared(&errors);
        Self {
            method,
            horizon,
            holdout: targets.len(),
            scheme,
            truth_kind,
            target_index,
            predictions,
            targets,
            errors,
            step_mse,
            per_cell_mse,
            mse,
        }
    }
}

/// Mean of the squares of every entry of every matrix.
pub fn mean_squared(errors: &[DMatrix<f64>]) -> f64 {
    let n: usize = errors.iter().map(|e| e.len()).sum();
    errors.iter().flat_map(|e| e.iter()).map(|v| v * v).sum::<f64>() / n as f64
}

/// Scores `predict` over the last `m` observations of `x`.
///
/// For target `s` the predictor sees the first `s − h + 1` observations and
/// forecasts `h` steps ahead.
pub fn backtest_with<F>(
    x: &MatrixSeries,
    m: usize,
    h: usize,
    truth: Truth<'_>,
    method: impl Into<String>,
    scheme: Option<Scheme>,
    predict: F,
) -> Result<ForecastReport>
where
    F: Fn(&MatrixSeries) -> Result<DMatrix<f64>> + Sync,
{
    let t_len = x.len();
    if m == 0 || h == 0 {
        return Err(Error::InvalidInput("holdout and horizon must be at least 1".into()));
    }
    if m + h >= t_len {
        return Err(Error::InvalidInput(format!("holdout {m} with horizon {h} leaves no training data at T = {t_len}")));
    }
    if let Truth::ConditionalMean(mu) = truth {
        if mu.len() != m {
            return Err(Error::DimensionMismatch { expected: format!("{m} truth matrices"), actual: format!("{}", mu.len()) });
        }
    }
    let train = t_len - m;
    let targets_idx: Vec<usize> = (train..t_len).collect();
    let predictions = targets_idx
        .par_iter()
        .map(|&s| predict(&x.head(s + 1 - h)?))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<DMatrix<f64>> = match truth {
        Truth::Realized => targets_idx.iter().map(|&s| x.get(s).clone()).collect(),
        Truth::ConditionalMean(mu) => mu.to_vec(),
    };
    for (p, t) in predictions.iter().zip(&targets) {
        if p.shape() != t.shape() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", t.nrows(), t.ncols()),
                actual: format!("{}x{}", p.nrows(), p.ncols()),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forecast".into()));
        }
    }
    Ok(ForecastReport::build(method.into(), h, scheme, truth.kind(), targets_idx, predictions, targets))
}

/// Backtest of the decorrelation pipeline with per-block models.
pub fn rolling_backtest(
    x: &MatrixSeries,
    m: usize,
    h: usize,
    scheme: Scheme,
    config: &PipelineConfig,
    truth: Truth<'_>,
) -> Result<ForecastReport> {
    config.validate()?;
    if m + h >= x.len() {
        return Err(Error::InvalidInput(format!("holdout {m} with horizon {h} leaves no training data at T = {}", x.len())));
    }
    match scheme {
        Scheme::Refit => backtest_with(x, m, h, truth, "segmentation", Some(scheme), |hist| {
            let fitted = fit_transform(hist, config)?;
            forecast_with_transform(hist, &fitted.pair, h)
        }),
        Scheme::Fixed => {
            let fitted = fit_transform(&x.head(x.len() - m)?, config)?;
            backtest_with(x, m, h, truth, "segmentation", Some(scheme), |hist| {
                forecast_with_transform(hist, &fitted.pair, h)
            })
        }
    }
}

/// Backtest of a model fitted directly to the observed series.
pub fn baseline_forecasts(x: &MatrixSeries, m: usize, h: usize, kind: Baseline, truth: Truth<'_>) -> Result<ForecastReport> {
    backtest_with(x, m, h, truth, kind.name(), None, |hist| match kind {
        Baseline::Mar1Direct => {
            let model = fit_block(hist)?;
            forecast_block(&model, hist.get(hist.len() - 1), h)
        }
        Baseline::Var1Stacked => {
            let model = fit_kind(hist, if hist.dims().1 * hist.dims().2 == 1 { ModelKind::Ar1 } else { ModelKind::Var1 })?;
            forecast_block(&model, hist.get(hist.len() - 1), h)
        }
        Baseline::Ar1PerCell => {
            let last = hist.get(hist.len() - 1);
            let mut out = DMatrix::zeros(hist.rows(), hist.cols());
            for i in 0..hist.rows() {
                for j in 0..hist.cols() {
                    let model = fit_ar1(&hist.cell(i, j))?;
                    out[(i, j)] = forecast_block(&model, &DMatrix::from_element(1, 1, last[(i, j)]), h)?[(0, 0)];
                }
            }
            Ok(out)
        }
    })
}
