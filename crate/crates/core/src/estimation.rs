//! Sample covariance normalisers, lagged cross-moment blocks and the
//! accumulation matrices whose eigenvectors give the bilinear transform.
//!
//! For the column transform (`Mode::Columns`) the observations are used as
//! they are; the row transform (`Mode::Rows`) runs the identical computation
//! on the transposed observations. With `Y_t` the oriented `p x d` series and
//! `M = Σ^{-1/2}` its normaliser,
//!
//! ```text
//! V(τ,i,j) = M · Σ_t (row i of Y_{t+τ})ᵀ (row j of Y_t) / (T − τ) · M
//! W        = p⁻² Σ_{τ=−τ0..τ0} Σ_{i,j} f(V(τ,i,j) V(τ,i,j)ᵀ)
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{default_floor, inv_sqrt, sqrt_sym, sym_eig, symmetrize, MatrixSeries, SymEig};

/// Which side of the bilinear transform is being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Column transform `A*`; operates on `X_t` directly.
    Columns,
    /// Row transform `B*`; operates on `X_tᵀ`.
    Rows,
}

impl Mode {
    /// The series as seen by this mode: `X_t` for columns, `X_tᵀ` for rows.
    pub fn orient(self, x: &MatrixSeries) -> MatrixSeries {
        match self {
            Mode::Columns => x.clone(),
            Mode::Rows => x.transposed(),
        }
    }

    /// Size of the transform this mode estimates.
    pub fn dim(self, x: &MatrixSeries) -> usize {
        match self {
            Mode::Columns => x.cols(),
            Mode::Rows => x.rows(),
        }
    }
}

/// Monotone scalar map applied to the eigenvalues of each `V Vᵀ` summand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "alpha", rename_all = "lowercase")]
pub enum EigTransform {
    #[default]
    Identity,
    Log1p,
    Power(f64),
}

impl EigTransform {
    pub fn validate(self) -> Result<()> {
        match self {
            EigTransform::Power(a) if !(a > 0.0 && a.is_finite()) => Err(Error::InvalidInput(
                format!("power transform needs a positive finite exponent, got {a}"),
            )),
            _ => Ok(()),
        }
    }

    fn scalar(self, v: f64) -> f64 {
        let v = v.max(0.0);
        match self {
            EigTransform::Identity => v,
            EigTransform::Log1p => v.ln_1p(),
            EigTransform::Power(a) => v.powf(a),
        }
    }

    /// `f(S)` for a symmetric PSD `S`, acting on its eigenvalues.
    pub fn apply(self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self == EigTransform::Identity {
            return Ok(s.clone());
        }
        let eig = sym_eig(s)?;
        let mapped = eig.eigenvalues.map(|l| self.scalar(l));
        let v = &eig.eigenvectors;
        Ok(v * DMatrix::from_diagonal(&mapped) * v.transpose())
    }
}

/// An estimated accumulation matrix with its eigen-decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WEstimate {
    pub mode: Mode,
    #[serde(with = "crate::matcore::matrix_serde")]
    pub w: DMatrix<f64>,
    pub tau0: usize,
    /// Covariance normaliser (`Σ̂₁` for columns, `Σ̂₂` for rows).
    #[serde(with = "crate::matcore::matrix_serde")]
    pub sigma: DMatrix<f64>,
    #[serde(with = "crate::matcore::matrix_serde")]
    pub sigma_inv_sqrt: DMatrix<f64>,
    pub eig: SymEig,
    /// `λ_j − λ_{j+1}`, non-negative.
    pub eigengaps: Vec<f64>,
}

impl WEstimate {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn sigma_sqrt(&self) -> Result<DMatrix<f64>> {
        sqrt_sym(&self.sigma)
    }
}

/// Minimum separation between the eigenvalues indexed by `group` and all others.
/// Returns `+∞` when the group covers every index.
pub fn group_eigengap(eigenvalues: &[f64], group: &[usize]) -> f64 {
    let mut gap = f64::INFINITY;
    for (k, &lk) in eigenvalues.iter().enumerate() {
        if group.contains(&k) {
            continue;
        }
        for &j in group {
            gap = gap.min((eigenvalues[j] - lk).abs());
        }
    }
    gap
}

/// `Σ̂₁ = (Tp)⁻¹ Σ X_tᵀX_t` (q x q) and `Σ̂₂ = (Tq)⁻¹ Σ X_tX_tᵀ` (p x p).
pub fn covariance_pair(x: &MatrixSeries) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (t_len, p, q) = x.dims();
    if t_len < 2 {
        return Err(Error::InsufficientData { needed: 2, got: t_len });
    }
    let mut s1 = DMatrix::zeros(q, q);
    let mut s2 = DMatrix::zeros(p, p);
    for m in x.iter() {
        s1.gemm_tr(1.0, m, m, 1.0);
        s2.gemm(1.0, m, &m.transpose(), 1.0);
    }
    s1 /= (t_len * p) as f64;
    s2 /= (t_len * q) as f64;
    Ok((symmetrize(&s1), symmetrize(&s2)))
}

fn check_variance(sigma: &DMatrix<f64>) -> Result<()> {
    let total = sigma.trace();
    if !total.is_finite() {
        return Err(Error::NonFinite("covariance".into()));
    }
    if total <= 0.0 {
        return Err(Error::Degenerate("the series has no variance".into()));
    }
    Ok(())
}

/// Covariance normaliser for one mode.
pub fn mode_covariance(x: &MatrixSeries, mode: Mode) -> Result<DMatrix<f64>> {
    let (s1, s2) = covariance_pair(x)?;
    Ok(match mode {
        Mode::Columns => s1,
        Mode::Rows => s2,
    })
}

/// Un-normalised lagged cross-moment block
/// `Σ_t (row i of Y_{t+τ})ᵀ (row j of Y_t) / (T − |τ|)` of the oriented series.
/// Negative lags use `Σ(−τ, i, j) = Σ(τ, j, i)ᵀ`. Indices are zero-based.
pub fn lagged_block(x: &MatrixSeries, mode: Mode, tau: isize, i: usize, j: usize) -> Result<DMatrix<f64>> {
    let y = mode.orient(x);
    let (t_len, p, d) = y.dims();
    let lag = tau.unsigned_abs();
    if lag >= t_len {
        return Err(Error::InvalidWindow { tau0: lag, t: t_len });
    }
    if i >= p || j >= p {
        return Err(Error::IndexOutOfRange(format!("({i}, {j}) with {p} rows")));
    }
    if tau < 0 {
        return lagged_block(x, mode, -tau, j, i).map(|m| m.transpose());
    }
    let n = t_len - lag;
    let mut acc = DMatrix::zeros(d, d);
    for t in 0..n {
        let a = y.get(t + lag).row(i);
        let b = y.get(t).row(j);
        acc.ger(1.0, &a.transpose(), &b.transpose(), 1.0);
    }
    Ok(acc / n as f64)
}

fn check_window(x: &MatrixSeries, tau0: usize) -> Result<()> {
    if x.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: x.len() });
    }
    if tau0 >= x.len() {
        return Err(Error::InvalidWindow { tau0, t: x.len() });
    }
    Ok(())
}

fn finish(mode: Mode, w: DMatrix<f64>, tau0: usize, sigma: DMatrix<f64>, m: DMatrix<f64>) -> Result<WEstimate> {
    let w = symmetrize(&w);
    let eig = sym_eig(&w)?;
    let eigengaps = eig.gaps();
    Ok(WEstimate { mode, w, tau0, sigma, sigma_inv_sqrt: m, eig, eigengaps })
}

/// Estimates `Ŵ` for one mode by stacking the normalised observations and forming
/// each lag's full cross-moment matrix with a single matrix product.
/// The input is assumed centred.
pub fn w_estimate(x: &MatrixSeries, mode: Mode, tau0: usize, f: EigTransform) -> Result<WEstimate> {
    check_window(x, tau0)?;
    f.validate()?;
    let y = mode.orient(x);
    let (t_len, p, d) = y.dims();
    let sigma = mode_covariance(x, mode)?;
    check_variance(&sigma)?;
    let m = inv_sqrt(&sigma, default_floor(&sigma))?;

    let normalised = y.map(|yt| yt * &m)?;
    let stacked = normalised.stacked_rowwise();

    let mut w = DMatrix::zeros(d, d);
    for tau in 0..=tau0 {
        let n = t_len - tau;
        let future = stacked.rows(tau, n).transpose();
        let cross = future * stacked.rows(0, n) / n as f64;
        for i in 0..p {
            for j in 0..p {
                let v = cross.view((i * d, j * d), (d, d));
                w += f.apply(&(v * v.transpose()))?;
                if tau > 0 {
                    // lag −τ contributes V(τ,j,i)ᵀ V(τ,j,i); summing over all (i, j) covers it
                    w += f.apply(&(v.transpose() * v))?;
                }
            }
        }
    }
    w /= (p * p) as f64;
    finish(mode, w, tau0, sigma, m)
}

/// Direct evaluation of `Ŵ` from individual `lagged_block` calls over
/// `τ = −τ0..τ0`. Quadratically slower than [`w_estimate`]; kept as a reference.
pub fn w_estimate_naive(x: &MatrixSeries, mode: Mode, tau0: usize, f: EigTransform) -> Result<WEstimate> {
    check_window(x, tau0)?;
    f.validate()?;
    let p = match mode {
        Mode::Columns => x.rows(),
        Mode::Rows => x.cols(),
    };
    let d = mode.dim(x);
    let sigma = mode_covariance(x, mode)?;
    check_variance(&sigma)?;
    let m = inv_sqrt(&sigma, default_floor(&sigma))?;
    let tau0 = tau0 as isize;
    let mut w = DMatrix::zeros(d, d);
    for tau in -tau0..=tau0 {
        for i in 0..p {
            for j in 0..p {
                let v = &m * lagged_block(x, mode, tau, i, j)? * &m;
                w += f.apply(&(&v * v.transpose()))?;
            }
        }
    }
    w /= (p * p) as f64;
    finish(mode, w, tau0 as usize, sigma, m)
}

/// Column-mode and row-mode estimates; the two are computed independently.
pub fn estimate_transforms(x: &MatrixSeries, tau0: usize, f: EigTransform) -> Result<(WEstimate, WEstimate)> {
    let col = w_estimate(x, Mode::Columns, tau0, f)?;
    let row = w_estimate(x, Mode::Rows, tau0, f)?;
    Ok((col, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{center, max_abs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(t: usize, p: usize, q: usize, seed: u64) -> MatrixSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = DMatrix::<f64>::zeros(p, q);
        let vals = (0..t)
            .map(|_| {
                let e = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
                prev = &prev * 0.5 + e;
                prev.clone()
            })
            .collect();
        center(&MatrixSeries::new(vals).unwrap()).0
    }

    #[test]
    fn covariance_zero_and_scalar() {
        let z = MatrixSeries::new(vec![DMatrix::zeros(2, 3); 4]).unwrap();
        let (s1, s2) = covariance_pair(&z).unwrap();
        assert_eq!(s1, DMatrix::zeros(3, 3));
        assert_eq!(s2, DMatrix::zeros(2, 2));
        let x = MatrixSeries::new(vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, -1.0)]).unwrap();
        let (s1, s2) = covariance_pair(&x).unwrap();
        assert_eq!(s1[(0, 0)], 1.0);
        assert_eq!(s2[(0, 0)], 1.0);
    }

    #[test]
    fn covariance_matches_double_loop() {
        let x = random_series(50, 3, 2, 1);
        let (s1, s2) = covariance_pair(&x).unwrap();
        let (t, p, q) = x.dims();
        for a in 0..q {
            for b in 0..q {
                let mut acc = 0.0;
                for m in x.iter() {
                    for i in 0..p {
                        acc += m[(i, a)] * m[(i, b)];
                    }
                }
                assert!((acc / (t * p) as f64 - s1[(a, b)]).abs() < 1e-12);
            }
        }
        for a in 0..p {
            for b in 0..p {
                let mut acc = 0.0;
                for m in x.iter() {
                    for j in 0..q {
                        acc += m[(a, j)] * m[(b, j)];
                    }
                }
                assert!((acc / (t * q) as f64 - s2[(a, b)]).abs() < 1e-12);
            }
        }
        assert!((s1.trace() * p as f64 - s2.trace() * q as f64).abs() < 1e-10);
    }

    #[test]
    fn lagged_block_matches_triple_loop() {
        let x = random_series(30, 4, 3, 2);
        let (tau, i, j) = (2usize, 0usize, 2usize);
        let got = lagged_block(&x, Mode::Columns, tau as isize, i, j).unwrap();
        let n = x.len() - tau;
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = 0.0;
                for t in 0..n {
                    acc += x.get(t + tau)[(i, a)] * x.get(t)[(j, b)];
                }
                assert!((acc / n as f64 - got[(a, b)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lagged_block_scalar_is_autocovariance() {
        let x = random_series(40, 1, 1, 3);
        let z = x.cell(0, 0);
        let n = z.len() - 3;
        let acov: f64 = (0..n).map(|t| z[t + 3] * z[t]).sum::<f64>() / n as f64;
        let got = lagged_block(&x, Mode::Columns, 3, 0, 0).unwrap();
        assert!((got[(0, 0)] - acov).abs() < 1e-14);
    }

    #[test]
    fn lagged_block_negative_lag_and_errors() {
        let x = random_series(25, 3, 2, 4);
        for mode in [Mode::Columns, Mode::Rows] {
            let rows = if mode == Mode::Columns { 3 } else { 2 };
            for i in 0..rows {
                for j in 0..rows {
                    let neg = lagged_block(&x, mode, -2, i, j).unwrap();
                    let pos = lagged_block(&x, mode, 2, j, i).unwrap();
                    assert_eq!(neg, pos.transpose());
                }
            }
        }
        assert!(matches!(lagged_block(&x, Mode::Columns, 0, 3, 0), Err(Error::IndexOutOfRange(_))));
        assert!(lagged_block(&x, Mode::Columns, 25, 0, 0).is_err());
    }

    #[test]
    fn lagged_block_lag_zero_is_psd() {
        let x = random_series(20, 3, 3, 5);
        let b = lagged_block(&x, Mode::Columns, 0, 1, 1).unwrap();
        let e = sym_eig(&b).unwrap();
        assert!(e.eigenvalues.min() > -1e-12);
    }

    #[test]
    fn scalar_unit_variance_window_zero() {
        let x = MatrixSeries::new(
            (0..10).map(|t| DMatrix::from_element(1, 1, if t % 2 == 0 { 1.0 } else { -1.0 })).collect(),
        )
        .unwrap();
        let w = w_estimate(&x, Mode::Columns, 0, EigTransform::Identity).unwrap();
        assert!((w.w[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn naive_and_optimized_agree() {
        let x = random_series(100, 5, 4, 6);
        for mode in [Mode::Columns, Mode::Rows] {
            for f in [EigTransform::Identity, EigTransform::Log1p, EigTransform::Power(0.5)] {
                let a = w_estimate(&x, mode, 2, f).unwrap();
                let b = w_estimate_naive(&x, mode, 2, f).unwrap();
                assert!(max_abs(&(&a.w - &b.w)) < 1e-8, "{mode:?} {f:?}");
            }
        }
    }

    #[test]
    fn row_permutation_leaves_column_w_unchanged() {
        let x = random_series(60, 4, 3, 7);
        let perm = [2usize, 0, 3, 1];
        let xp = x
            .map(|m| DMatrix::from_fn(4, 3, |i, j| m[(perm[i], j)]))
            .unwrap();
        let a = w_estimate(&x, Mode::Columns, 3, EigTransform::Identity).unwrap();
        let b = w_estimate(&xp, Mode::Columns, 3, EigTransform::Identity).unwrap();
        assert!(max_abs(&(&a.w - &b.w)) < 1e-10);
    }

    #[test]
    fn window_too_large() {
        let x = random_series(5, 2, 2, 8);
        assert!(matches!(w_estimate(&x, Mode::Columns, 5, EigTransform::Identity), Err(Error::InvalidWindow { .. })));
        assert!(w_estimate(&x, Mode::Columns, 1, EigTransform::Power(-1.0)).is_err());
    }

    #[test]
    fn group_gap() {
        let l = [5.0, 4.0, 1.0, 0.5];
        assert_eq!(group_eigengap(&l, &[0, 1]), 3.0);
        assert_eq!(group_eigengap(&l, &[2]), 0.5);
        assert!(group_eigengap(&l, &[0, 1, 2, 3]).is_infinite());
    }
}
