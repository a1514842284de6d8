//! The assembled bilinear transform and the maps between observed and latent series.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{estimate_transforms, EigTransform, Mode, WEstimate};
use crate::matcore::{center, default_floor, inv_sqrt, matrix_serde, max_abs, sqrt_sym, MatrixSeries};
use crate::segmentation::{segment, Partition, SegmentConfig, SegmentationResult};

/// Current version tag of every JSON document the crate writes.
pub const SCHEMA: &str = "matseg/1";

/// Settings for estimating and segmenting a transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau0: usize,
    pub eig_transform: EigTransform,
    pub segment: SegmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { tau0: 5, eig_transform: EigTransform::Identity, segment: SegmentConfig::default() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.eig_transform.validate()?;
        self.segment.validate()
    }
}

/// Orthogonal factors with their covariance square roots and block structure.
///
/// `a_star` and `b_star` hold eigenvectors ordered so that every group occupies
/// a contiguous range; `col_groups` and `row_groups` list those ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPair {
    #[serde(with = "matrix_serde")]
    pub a_star: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub b_star: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub sigma1_inv_sqrt: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub sigma2_inv_sqrt: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub sigma1_sqrt: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub sigma2_sqrt: DMatrix<f64>,
    pub col_groups: Vec<Vec<usize>>,
    pub row_groups: Vec<Vec<usize>>,
    /// Sample mean removed before estimation.
    #[serde(with = "matrix_serde")]
    pub mean: DMatrix<f64>,
}

impl TransformPair {
    pub fn identity(p: usize, q: usize) -> Self {
        Self {
            a_star: DMatrix::identity(q, q),
            b_star: DMatrix::identity(p, p),
            sigma1_inv_sqrt: DMatrix::identity(q, q),
            sigma2_inv_sqrt: DMatrix::identity(p, p),
            sigma1_sqrt: DMatrix::identity(q, q),
            sigma2_sqrt: DMatrix::identity(p, p),
            col_groups: (0..q).map(|k| vec![k]).collect(),
            row_groups: (0..p).map(|k| vec![k]).collect(),
            mean: DMatrix::zeros(p, q),
        }
    }

    /// Orders the eigenvectors of both estimates by the given partitions.
    pub fn from_partitions(
        col: &WEstimate,
        row: &WEstimate,
        col_partition: &Partition,
        row_partition: &Partition,
        mean: DMatrix<f64>,
    ) -> Result<Self> {
        if col.mode != Mode::Columns || row.mode != Mode::Rows {
            return Err(Error::InvalidInput("expected a column estimate and a row estimate".into()));
        }
        let reorder = |w: &WEstimate, part: &Partition| -> Result<DMatrix<f64>> {
            if part.permutation.len() != w.dim() {
                return Err(Error::DimensionMismatch {
                    expected: format!("partition of {} indices", w.dim()),
                    actual: format!("{}", part.permutation.len()),
                });
            }
            Ok(w.eig.eigenvectors.select_columns(&part.permutation))
        };
        let pair = Self {
            a_star: reorder(col, col_partition)?,
            b_star: reorder(row, row_partition)?,
            sigma1_inv_sqrt: col.sigma_inv_sqrt.clone(),
            sigma2_inv_sqrt: row.sigma_inv_sqrt.clone(),
            sigma1_sqrt: sqrt_sym(&col.sigma)?,
            sigma2_sqrt: sqrt_sym(&row.sigma)?,
            col_groups: col_partition.contiguous(),
            row_groups: row_partition.contiguous(),
            mean,
        };
        pair.check_dims()?;
        Ok(pair)
    }

    /// `(p, q)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.b_star.nrows(), self.a_star.nrows())
    }

    fn check_dims(&self) -> Result<()> {
        let (p, q) = self.dims();
        let shapes = [
            (self.a_star.shape(), (q, q)),
            (self.b_star.shape(), (p, p)),
            (self.sigma1_inv_sqrt.shape(), (q, q)),
            (self.sigma1_sqrt.shape(), (q, q)),
            (self.sigma2_inv_sqrt.shape(), (p, p)),
            (self.sigma2_sqrt.shape(), (p, p)),
            (self.mean.shape(), (p, q)),
        ];
        for (got, want) in shapes {
            if got != want {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}", want.0, want.1),
                    actual: format!("{}x{}", got.0, got.1),
                });
            }
        }
        for (groups, d) in [(&self.col_groups, q), (&self.row_groups, p)] {
            Partition::from_groups(d, groups)?;
        }
        Ok(())
    }

    /// Checks shapes, group structure and orthonormality of both factors (1e-8).
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        let (p, q) = self.dims();
        let ea = max_abs(&(self.a_star.transpose() * &self.a_star - DMatrix::identity(q, q)));
        let eb = max_abs(&(self.b_star.transpose() * &self.b_star - DMatrix::identity(p, p)));
        if ea > 1e-8 || eb > 1e-8 {
            return Err(Error::InvalidInput(format!("transform factors are not orthonormal ({ea:e}, {eb:e})")));
        }
        Ok(())
    }

    fn check_series(&self, x: &MatrixSeries) -> Result<()> {
        let (p, q) = self.dims();
        if (x.rows(), x.cols()) != (p, q) {
            return Err(Error::DimensionMismatch {
                expected: format!("{p}x{q}"),
                actual: format!("{}x{}", x.rows(), x.cols()),
            });
        }
        Ok(())
    }

    /// `(B*ᵀ Σ̂₂^{-1/2}, Σ̂₁^{-1/2} A*)` so that `U = L X R`.
    pub fn latent_factors(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.b_star.transpose() * &self.sigma2_inv_sqrt, &self.sigma1_inv_sqrt * &self.a_star)
    }

    /// `(Σ̂₂^{1/2} B*, A*ᵀ Σ̂₁^{1/2})` so that `X = L U R`.
    pub fn observed_factors(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (&self.sigma2_sqrt * &self.b_star, self.a_star.transpose() * &self.sigma1_sqrt)
    }
}

/// `Û_t = B*ᵀ Σ̂₂^{-1/2} X_t Σ̂₁^{-1/2} A*`.
pub fn to_latent(x: &MatrixSeries, tp: &TransformPair) -> Result<MatrixSeries> {
    tp.check_series(x)?;
    let (l, r) = tp.latent_factors();
    x.map(|m| &l * m * &r)
}

/// `X̂_t = Σ̂₂^{1/2} B* U_t A*ᵀ Σ̂₁^{1/2}`.
pub fn from_latent(u: &MatrixSeries, tp: &TransformPair) -> Result<MatrixSeries> {
    tp.check_series(u)?;
    let (l, r) = tp.observed_factors();
    u.map(|m| &l * m * &r)
}

/// Single-observation variant of [`from_latent`].
pub fn from_latent_one(u: &DMatrix<f64>, tp: &TransformPair) -> DMatrix<f64> {
    let (l, r) = tp.observed_factors();
    l * u * r
}

/// A transform fitted from data together with the intermediate estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedTransform {
    pub pair: TransformPair,
    pub col_w: WEstimate,
    pub row_w: WEstimate,
    pub col_segmentation: SegmentationResult,
    pub row_segmentation: SegmentationResult,
}

/// Centres `x`, estimates both accumulation matrices and segments both modes.
pub fn fit_transform(x: &MatrixSeries, config: &PipelineConfig) -> Result<FittedTransform> {
    config.validate()?;
    let (xc, mean) = center(x);
    let (col_w, row_w) = estimate_transforms(&xc, config.tau0, config.eig_transform)?;
    let col_segmentation = segment(&xc, &col_w, &config.segment)?;
    let row_segmentation = segment(&xc, &row_w, &config.segment)?;
    let pair = TransformPair::from_partitions(
        &col_w,
        &row_w,
        &col_segmentation.partition(),
        &row_segmentation.partition(),
        mean,
    )?;
    Ok(FittedTransform { pair, col_w, row_w, col_segmentation, row_segmentation })
}

/// Simulation proxies for the orthogonal factors:
/// `A* = Σ̂₁⁽ˣ⁾^{-1/2} A Σ̂₁⁽ᵘ⁾^{1/2}` with `Σ̂₁⁽ᵘ⁾ = (Tp)⁻¹ Σ U_tᵀBᵀBU_t`, and
/// `B* = Σ̂₂⁽ˣ⁾^{-1/2} B Σ̂₂⁽ᵘ⁾^{1/2}` with `Σ̂₂⁽ᵘ⁾ = (Tq)⁻¹ Σ U_tAᵀAU_tᵀ`.
/// `x` and `u` must be centred consistently (`X_t = B U_t Aᵀ`).
pub fn proxy_targets(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &MatrixSeries,
    x: &MatrixSeries,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (t_len, p, q) = x.dims();
    if u.dims() != (t_len, p, q) || a.shape() != (q, q) || b.shape() != (p, p) {
        return Err(Error::DimensionMismatch {
            expected: format!("A {q}x{q}, B {p}x{p}, U of {t_len}x{p}x{q}"),
            actual: format!("A {:?}, B {:?}, U {:?}", a.shape(), b.shape(), u.dims()),
        });
    }
    let (sx1, sx2) = crate::estimation::covariance_pair(x)?;
    let btb = b.transpose() * b;
    let ata = a.transpose() * a;
    let mut su1 = DMatrix::zeros(q, q);
    let mut su2 = DMatrix::zeros(p, p);
    for m in u.iter() {
        su1 += m.transpose() * &btb * m;
        su2 += m * &ata * m.transpose();
    }
    su1 /= (t_len * p) as f64;
    su2 /= (t_len * q) as f64;
    let a_star = inv_sqrt(&sx1, default_floor(&sx1))? * a * sqrt_sym(&su1)?;
    let b_star = inv_sqrt(&sx2, default_floor(&sx2))? * b * sqrt_sym(&su2)?;
    Ok((a_star, b_star))
}
