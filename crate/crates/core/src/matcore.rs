//! Dense symmetric linear algebra and the matrix-series container.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered sequence of `T` real `p x q` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    values: Vec<DMatrix<f64>>,
    rows: usize,
    cols: usize,
    label: Option<String>,
}

impl MatrixSeries {
    /// Builds a series, checking that it has at least two observations, that
    /// all matrices share one shape and that every entry is finite.
    pub fn new(values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: values.len() });
        }
        let (rows, cols) = values[0].shape();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput("matrices must be at least 1x1".into()));
        }
        for (t, m) in values.iter().enumerate() {
            if m.shape() != (rows, cols) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{rows}x{cols}"),
                    actual: format!("{}x{} at t={t}", m.nrows(), m.ncols()),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("observation t={t}")));
            }
        }
        Ok(Self { values, rows, cols, label: None })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    /// Number of time points `T`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `(T, p, q)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.values.len(), self.rows, self.cols)
    }

    pub fn get(&self, t: usize) -> &DMatrix<f64> {
        &self.values[t]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DMatrix<f64>> {
        self.values.iter()
    }

    pub fn as_slice(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<DMatrix<f64>> {
        self.values
    }

    /// The first `n` observations.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::IndexOutOfRange(format!("head({n}) of length {}", self.len())));
        }
        let mut out = Self::new(self.values[..n].to_vec())?;
        out.label = self.label.clone();
        Ok(out)
    }

    /// Series of transposed matrices.
    pub fn transposed(&self) -> Self {
        Self {
            values: self.values.iter().map(|m| m.transpose()).collect(),
            rows: self.cols,
            cols: self.rows,
            label: self.label.clone(),
        }
    }

    /// Applies `f` to every observation. The output shape may differ from the input.
    pub fn map<F>(&self, f: F) -> Result<Self>
    where
        F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
    {
        let mut out = Self::new(self.values.iter().map(f).collect())?;
        out.label = self.label.clone();
        Ok(out)
    }

    /// The scalar series of cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> Vec<f64> {
        self.values.iter().map(|m| m[(i, j)]).collect()
    }

    /// Elementwise sample mean.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.rows, self.cols);
        for m in &self.values {
            acc += m;
        }
        acc / self.len() as f64
    }

    /// `T x (p q)` matrix whose row `t` is observation `t` flattened row by row.
    pub(crate) fn stacked_rowwise(&self) -> DMatrix<f64> {
        let (t_len, p, q) = self.dims();
        DMatrix::from_fn(t_len, p * q, |t, c| self.values[t][(c / q, c % q)])
    }
}

/// Subtracts the elementwise sample mean; returns the centred series and the mean.
pub fn center(series: &MatrixSeries) -> (MatrixSeries, DMatrix<f64>) {
    let mean = series.mean();
    let values = series.values.iter().map(|m| m - &mean).collect();
    let centred = MatrixSeries {
        values,
        rows: series.rows,
        cols: series.cols,
        label: series.label.clone(),
    };
    (centred, mean)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymEig {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors as columns, aligned with `eigenvalues`.
    #[serde(with = "matrix_serde")]
    pub eigenvectors: DMatrix<f64>,
}

impl SymEig {
    /// `λ_j − λ_{j+1}` for consecutive eigenvalues.
    pub fn gaps(&self) -> Vec<f64> {
        self.eigenvalues.as_slice().windows(2).map(|w| (w[0] - w[1]).max(0.0)).collect()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

/// Symmetric eigensolver. The input is symmetrised first; eigenvalues are sorted in
/// descending order and every eigenvector is signed so that its largest-magnitude
/// component (lowest index on ties) is positive.
pub fn sym_eig(s: &DMatrix<f64>) -> Result<SymEig> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            expected: "square matrix".into(),
            actual: format!("{}x{}", s.nrows(), s.ncols()),
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let d = s.nrows();
    let eig = SymmetricEigen::new(symmetrize(s));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let eigenvalues = DVector::from_iterator(d, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut lead = 0;
        for i in 1..d {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        eigenvectors.set_column(dst, &(col * sign));
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// Default eigenvalue floor `1e-10 · trace(S)/d`.
pub fn default_floor(s: &DMatrix<f64>) -> f64 {
    let d = s.nrows().max(1) as f64;
    (1e-10 * s.trace() / d).max(f64::MIN_POSITIVE)
}

fn spectral_map<F>(s: &DMatrix<f64>, neg_tol: f64, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> f64,
{
    let eig = sym_eig(s)?;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -neg_tol {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
    }
    let mapped = eig.eigenvalues.map(f);
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&mapped) * v.transpose())))
}

/// `V diag(max(λ, floor)^{-1/2}) Vᵀ`. Fails if any eigenvalue is below `-10 · floor`.
pub fn inv_sqrt(s: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    if !(floor > 0.0) {
        return Err(Error::InvalidInput(format!("eigenvalue floor must be positive, got {floor}")));
    }
    spectral_map(s, 10.0 * floor, |l| 1.0 / l.max(floor).sqrt())
}

/// `V diag(max(λ, 0)^{1/2}) Vᵀ`.
pub fn sqrt_sym(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(s, 10.0 * default_floor(s), |l| l.max(0.0).sqrt())
}

/// Serde adapter writing a matrix as `{rows, cols, data}` with `data` in row-major order.
pub mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    pub struct MatrixDoc {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl From<&DMatrix<f64>> for MatrixDoc {
        fn from(m: &DMatrix<f64>) -> Self {
            let data = m.transpose().as_slice().to_vec();
            Self { rows: m.nrows(), cols: m.ncols(), data }
        }
    }

    impl MatrixDoc {
        pub fn into_matrix(self) -> Result<DMatrix<f64>, String> {
            if self.data.len() != self.rows * self.cols {
                return Err(format!(
                    "matrix data has {} entries, expected {}x{}",
                    self.data.len(),
                    self.rows,
                    self.cols
                ));
            }
            Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
        }
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixDoc::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        MatrixDoc::deserialize(d)?.into_matrix().map_err(D::Error::custom)
    }

    /// Same layout for a sequence of matrices.
    pub mod seq {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            let docs: Vec<MatrixDoc> = v.iter().map(MatrixDoc::from).collect();
            docs.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            Vec::<MatrixDoc>::deserialize(d)?
                .into_iter()
                .map(|m| m.into_matrix().map_err(D::Error::custom))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(d, d) * 0.5
    }

    #[test]
    fn center_constant_series() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = MatrixSeries::new(vec![m.clone(); 5]).unwrap();
        let (c, mean) = center(&s);
        assert_eq!(mean, m);
        assert!(c.iter().all(|x| x.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn center_alternating_cell() {
        let vals = (0..6)
            .map(|t| DMatrix::from_element(1, 1, if t % 2 == 0 { 1.0 } else { 3.0 }))
            .collect();
        let (c, mean) = center(&MatrixSeries::new(vals).unwrap());
        assert_eq!(mean[(0, 0)], 2.0);
        assert_eq!(c.cell(0, 0), vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
        let (c2, mean2) = center(&c);
        assert_eq!(c2, c);
        assert!(mean2[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn series_rejects_mixed_shapes_and_nan() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 3);
        assert!(MatrixSeries::new(vec![a.clone(), b]).is_err());
        let mut c = a.clone();
        c[(0, 0)] = f64::NAN;
        assert!(MatrixSeries::new(vec![a.clone(), c]).is_err());
        assert!(MatrixSeries::new(vec![a]).is_err());
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[1.0, 1.0, 1.0]);
        for j in 0..3 {
            let col = e.eigenvectors.column(j);
            assert_eq!(col.iter().filter(|v| v.abs() == 1.0).count(), 1);
        }
        let e = sym_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0, 4.0]))).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[9.0, 4.0, 1.0]);
        let expect = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(e.eigenvectors, expect);
    }

    #[test]
    fn eig_random_reconstruction_and_sign_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let s = symmetrize(&g);
        let e = sym_eig(&s).unwrap();
        let resid = max_abs(&(e.reconstruct() - &s));
        assert!(resid <= 1e-8 * max_abs(&s), "residual {resid}");
        let ortho = max_abs(&(e.eigenvectors.transpose() * &e.eigenvectors - DMatrix::identity(5, 5)));
        assert!(ortho <= 1e-10);
        for w in e.eigenvalues.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
        for col in e.eigenvectors.column_iter() {
            let lead = col.iter().cloned().fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
        assert_eq!(sym_eig(&s).unwrap(), e);
    }

    #[test]
    fn eig_rejects_non_finite() {
        let mut s = DMatrix::identity(2, 2);
        s[(1, 0)] = f64::INFINITY;
        assert!(matches!(sym_eig(&s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn inv_sqrt_known_values() {
        assert_eq!(inv_sqrt(&DMatrix::identity(4, 4), 1e-10).unwrap(), DMatrix::identity(4, 4));
        let m = inv_sqrt(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0])), 1e-10).unwrap();
        assert!((m[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((m[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m[(0, 1)], 0.0);
    }

    #[test]
    fn inv_sqrt_random_spd_residual() {
        let s = random_spd(6, 11);
        let m = inv_sqrt(&s, default_floor(&s)).unwrap();
        let r = &m * &m * &s - DMatrix::identity(6, 6);
        assert!(max_abs(&r) < 1e-6);
        let r2 = &m * &s * &m - DMatrix::identity(6, 6);
        assert!(r2.norm() < 1e-6);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn inv_sqrt_rejects_indefinite() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(inv_sqrt(&s, 1e-6), Err(Error::NotPositiveSemidefinite { .. })));
        assert!(inv_sqrt(&s, 0.0).is_err());
    }

    #[test]
    fn sqrt_sym_known_and_random() {
        let m = sqrt_sym(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((m[(0, 0)] - 2.0).abs() < 1e-15 && (m[(1, 1)] - 3.0).abs() < 1e-15);
        assert_eq!(sqrt_sym(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let s = random_spd(5, 5);
        let r = sqrt_sym(&s).unwrap();
        assert!(max_abs(&(&r * &r - &s)) < 1e-8);
        let inv = inv_sqrt(&s, default_floor(&s)).unwrap();
        assert!(max_abs(&(inv * r - DMatrix::identity(5, 5))) < 1e-8);
    }
}
