//! Principal-components extraction and alignment of estimated factors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::linalg::sym_eigen_desc;
use crate::panel::{fix_column_signs, PanelData};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-12;
/// Relative gap at the cut-off below which the factor space is ambiguous.
const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Pc,
    Sls,
}

/// Estimated factors (`T × r`) and loadings (`N × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub f_hat: DMatrix<f64>,
    pub lambda_hat: DMatrix<f64>,
    pub estimator: Estimator,
    pub iterations: usize,
    pub rss_trace: Vec<f64>,
    pub converged: bool,
    /// Non-fatal numerical notes (eigenvalue ties, fallback initialization).
    pub warnings: Vec<String>,
}

impl FactorEstimate {
    /// Fitted common component `F Λ'` (`T × N`).
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.f_hat * self.lambda_hat.transpose()
    }
}

/// Principal-components estimate of `r` factors from the panel.
///
/// Factors are `√T` times the leading eigenvectors of `YY'`, so `F'F/T = I`
/// and the loadings `Λ = Y'F/T` have a diagonal Gram matrix with decreasing
/// entries. The largest-magnitude loading of every factor is positive.
pub fn pc_extract(panel: &PanelData, r: usize) -> Result<FactorEstimate> {
    pc_extract_matrix(panel.y(), r)
}

/// [`pc_extract`] on a bare `T × N` matrix.
pub fn pc_extract_matrix(y: &DMatrix<f64>, r: usize) -> Result<FactorEstimate> {
    let (t, n) = y.shape();
    if r == 0 || r >= t.min(n) {
        return Err(param(
            "r",
            format!("need 0 < r < min(N, T) = {}, got {r}", t.min(n)),
        ));
    }
    let tf = t as f64;
    let mut warnings = Vec::new();
    // Work with the smaller Gram matrix; both share the nonzero spectrum.
    let (values, mut f_hat) = if t <= n {
        let (values, vectors) = sym_eigen_desc(&(y * y.transpose()));
        check_rank(values.as_slice(), r)?;
        (values, vectors.columns(0, r) * tf.sqrt())
    } else {
        let (values, vectors) = sym_eigen_desc(&y.tr_mul(y));
        check_rank(values.as_slice(), r)?;
        let mut f = y * vectors.columns(0, r);
        for k in 0..r {
            let norm = f.column(k).norm();
            f.column_mut(k).scale_mut(tf.sqrt() / norm);
        }
        (values, f)
    };
    if values.len() > r && values[r - 1] - values[r] <= TIE_TOL * values[0] {
        warnings.push(format!(
            "eigenvalues {} and {} are tied within {TIE_TOL:e}; the factor space is not unique",
            r,
            r + 1
        ));
    }
    let mut lambda_hat = y.tr_mul(&f_hat) / tf;
    fix_column_signs(&mut lambda_hat, Some(&mut f_hat));
    Ok(FactorEstimate {
        f_hat,
        lambda_hat,
        estimator: Estimator::Pc,
        iterations: 0,
        rss_trace: Vec::new(),
        converged: true,
        warnings,
    })
}

fn check_rank(values: &[f64], r: usize) -> Result<()> {
    let top = values.first().copied().unwrap_or(0.0);
    let found = if top > 0.0 {
        values.iter().filter(|&&v| v > RANK_TOL * top).count()
    } else {
        0
    };
    if found < r {
        return Err(Error::Rank {
            requested: r,
            found,
        });
    }
    Ok(())
}

/// `Y − F Λ'`.
pub fn residuals(panel: &PanelData, est: &FactorEstimate) -> Result<DMatrix<f64>> {
    residuals_matrix(panel.y(), &est.f_hat, &est.lambda_hat)
}

/// `Y − F Λ'` on bare matrices.
pub fn residuals_matrix(
    y: &DMatrix<f64>,
    f: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if f.nrows() != y.nrows() || lambda.nrows() != y.ncols() || f.ncols() != lambda.ncols() {
        return Err(Error::Dimension(format!(
            "panel {:?}, factors {:?}, loadings {:?}",
            y.shape(),
            f.shape(),
            lambda.shape()
        )));
    }
    Ok(y - f * lambda.transpose())
}

/// Orthogonal rotation `R` minimizing `‖F R − target‖_F`.
pub fn procrustes_rotation(f: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "factors {:?} and target {:?} differ",
            f.shape(),
            target.shape()
        )));
    }
    let svd = f.tr_mul(target).svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    Ok(u * v_t)
}

/// Rotates factors and loadings by the Procrustes solution against `target`;
/// the common component is unchanged.
pub fn procrustes_align(est: &FactorEstimate, target: &DMatrix<f64>) -> Result<FactorEstimate> {
    let rot = procrustes_rotation(&est.f_hat, target)?;
    Ok(FactorEstimate {
        f_hat: &est.f_hat * &rot,
        lambda_hat: &est.lambda_hat * &rot,
        ..est.clone()
    })
}

/// Flips every factor (and its loadings) whose inner product with the
/// matching target column is negative.
pub fn sign_align(est: &FactorEstimate, target: &DMatrix<f64>) -> Result<FactorEstimate> {
    let mut out = est.clone();
    sign_align_in_place(&mut out.f_hat, &mut out.lambda_hat, target)?;
    Ok(out)
}

pub(crate) fn sign_align_in_place(
    f: &mut DMatrix<f64>,
    lambda: &mut DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<()> {
    if f.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "factors {:?} and target {:?} differ",
            f.shape(),
            target.shape()
        )));
    }
    for k in 0..f.ncols() {
        if f.column(k).dot(&target.column(k)) < 0.0 {
            f.column_mut(k).neg_mut();
            lambda.column_mut(k).neg_mut();
        }
    }
    Ok(())
}
