//! Finite-sample approximations of the asymptotic MSE of estimated factors.
//!
//! The asymptotic MSE of the factor estimate at period `t` is the sandwich
//!
//! ```text
//! Avar_t = (1/N) (Λ'Λ/N)⁻¹ Γ_t (Λ'Λ/N)⁻¹,   Γ_t = (1/N) Σ_ij λ_i λ_j' E[ε_it ε_jt]
//! ```
//!
//! and the estimators here differ only in how `Γ_t` is filled in:
//!
//! * `TRUE` uses the data-generating `Σ_ε`;
//! * `HR` uses squared residuals of the period (no cross-correlation);
//! * `FPR` uses a thresholded residual covariance (sparse cross-correlation);
//! * `HRS` / `FPRS` add a subsampling term that reflects the uncertainty of
//!   the estimated loadings.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{param, Error, Result};
use crate::linalg::{self, inverse_gram};
use crate::panel::PanelData;
use crate::pc::{Estimator, FactorEstimate};
use crate::seed::{self, Stream};
use crate::sls::{factors_step, loadings_step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    True,
    Hr,
    Hrs,
    Fpr,
    Fprs,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::True,
        Variant::Hr,
        Variant::Hrs,
        Variant::Fpr,
        Variant::Fprs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::True => "TRUE",
            Variant::Hr => "HR",
            Variant::Hrs => "HRS",
            Variant::Fpr => "FPR",
            Variant::Fprs => "FPRS",
        }
    }

    /// Uncorrected variant a subsampled one builds on.
    pub fn base(self) -> Variant {
        match self {
            Variant::Hrs => Variant::Hr,
            Variant::Fprs => Variant::Fpr,
            v => v,
        }
    }

    pub fn is_subsampled(self) -> bool {
        matches!(self, Variant::Hrs | Variant::Fprs)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| param("variant", format!("unknown variant `{s}`")))
    }
}

/// Estimate of `Γ` (the long-run cross-sectional covariance of `Λ'ε_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate {
    pub value: DMatrix<f64>,
    pub variant: Variant,
    /// Period for per-period estimates; `None` when time-invariant.
    pub t: Option<usize>,
}

/// Asymptotic MSE of the factor estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvarEstimate {
    #[serde(rename = "matrix", serialize_with = "row_major")]
    pub value: DMatrix<f64>,
    pub variant: Variant,
    pub n: usize,
    pub t: Option<usize>,
}

fn row_major<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub delta: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { delta: 2.0 }
    }
}

impl ThresholdConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(param(
                "delta",
                format!("must be finite and non-negative, got {delta}"),
            ));
        }
        Ok(Self { delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsampleConfig {
    /// Number of subsamples.
    pub b: usize,
    pub block_fraction: f64,
    pub seed: u64,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        Self {
            b: 50,
            block_fraction: 0.75,
            seed: 0,
        }
    }
}

impl SubsampleConfig {
    /// Validates the configuration for a panel of `t` periods and `r` factors
    /// and returns the block length.
    pub fn block_len(&self, t: usize, r: usize) -> Result<usize> {
        if self.b == 0 {
            return Err(param("B", "at least one subsample is required"));
        }
        if !(self.block_fraction > 0.0 && self.block_fraction <= 1.0) {
            return Err(param(
                "block_fraction",
                format!("must lie in (0, 1], got {}", self.block_fraction),
            ));
        }
        let len = (self.block_fraction * t as f64).floor() as usize;
        if len < r + 1 {
            return Err(param(
                "block_fraction",
                format!("blocks of {len} periods cannot identify {r} factors"),
            ));
        }
        Ok(len)
    }
}

/// `Γ = Λ'Σ_εΛ / N` from the data-generating covariance.
pub fn gamma_true(lambda: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> Result<GammaEstimate> {
    let value = sandwich_meat(lambda, sigma_eps)?;
    Ok(GammaEstimate {
        value,
        variant: Variant::True,
        t: None,
    })
}

fn sandwich_meat(lambda: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = lambda.nrows();
    if sigma.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "covariance is {:?} for {n} series",
            sigma.shape()
        )));
    }
    Ok(linalg::symmetrize(
        &(lambda.tr_mul(&(sigma * lambda)) / n as f64),
    ))
}

/// `Γ_t = Σ_i λ_i λ_i' ε_it² / N` for one period.
pub fn gamma_hr(lambda_hat: &DMatrix<f64>, eps_t: &DVector<f64>) -> Result<GammaEstimate> {
    if eps_t.len() != lambda_hat.nrows() {
        return Err(Error::Dimension(format!(
            "{} residuals for {} series",
            eps_t.len(),
            lambda_hat.nrows()
        )));
    }
    Ok(GammaEstimate {
        value: hr_meat(lambda_hat, eps_t.iter().copied()),
        variant: Variant::Hr,
        t: None,
    })
}

fn hr_meat(lambda: &DMatrix<f64>, eps: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let (n, r) = lambda.shape();
    let mut weighted = lambda.clone();
    for (i, e) in eps.enumerate() {
        weighted.row_mut(i).scale_mut(e * e);
    }
    let out = lambda.tr_mul(&weighted) / n as f64;
    debug_assert_eq!(out.shape(), (r, r));
    linalg::symmetrize(&out)
}

/// Per-period HR estimates from the `T × N` residual matrix.
pub fn gamma_hr_series(
    lambda_hat: &DMatrix<f64>,
    eps: &DMatrix<f64>,
) -> Result<Vec<GammaEstimate>> {
    if eps.ncols() != lambda_hat.nrows() {
        return Err(Error::Dimension(format!(
            "residuals have {} series, loadings {}",
            eps.ncols(),
            lambda_hat.nrows()
        )));
    }
    Ok((0..eps.nrows())
        .map(|t| GammaEstimate {
            value: hr_meat(lambda_hat, eps.row(t).iter().copied()),
            variant: Variant::Hr,
            t: Some(t),
        })
        .collect())
}

/// `σ̂_ij = Σ_t ε_it ε_jt / T`.
pub fn sample_idio_cov(eps: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    eps.column(i).dot(&eps.column(j)) / eps.nrows() as f64
}

/// Rate `1/√N + √(ln N / T)` scaling the threshold.
pub fn threshold_rate(n: usize, t: usize) -> f64 {
    1.0 / (n as f64).sqrt() + ((n as f64).ln() / t as f64).sqrt()
}

/// Adaptive-threshold residual covariance.
///
/// Off-diagonal entries survive when `|σ̂_ij| ≥ δ · rate · √θ_ij`, where
/// `θ_ij` is the sample variance of `ε_it ε_jt`; variances always survive.
pub fn threshold_idio_cov(eps: &DMatrix<f64>, config: &ThresholdConfig) -> DMatrix<f64> {
    let (t, n) = eps.shape();
    let tf = t as f64;
    let sample = linalg::symmetrize(&(eps.tr_mul(eps) / tf));
    if config.delta == 0.0 {
        return sample;
    }
    let squares = eps.map(|e| e * e);
    let fourth = squares.tr_mul(&squares) / tf;
    let cut = config.delta * threshold_rate(n, t);
    DMatrix::from_fn(n, n, |i, j| {
        let s = sample[(i, j)];
        if i == j {
            return s;
        }
        // mean of (ε_i ε_j − σ̂_ij)², expanded
        let theta = (0.5 * (fourth[(i, j)] + fourth[(j, i)]) - s * s).max(0.0);
        if s.abs() >= cut * theta.sqrt() {
            s
        } else {
            0.0
        }
    })
}

/// Threshold level chosen by two-fold cross-validation: the first and second
/// halves of the sample take turns as training and validation data, and the
/// `δ` whose thresholded training covariance is closest (Frobenius) to the
/// raw validation covariance wins. Ties go to the smaller `δ`.
pub fn cross_validate_delta(eps: &DMatrix<f64>, grid: &[f64]) -> Result<f64> {
    let t = eps.nrows();
    if t < 4 {
        return Err(param("T", "cross-validation needs at least four periods"));
    }
    if grid.is_empty() {
        return Err(param("delta", "empty cross-validation grid"));
    }
    let half = t / 2;
    let first = eps.rows(0, half).into_owned();
    let second = eps.rows(half, t - half).into_owned();
    let raw = |m: &DMatrix<f64>| m.tr_mul(m) / m.nrows() as f64;
    let (raw_first, raw_second) = (raw(&first), raw(&second));
    let mut best = (f64::INFINITY, grid[0]);
    for &delta in grid {
        let cfg = ThresholdConfig::new(delta)?;
        let loss = (threshold_idio_cov(&first, &cfg) - &raw_second).norm_squared()
            + (threshold_idio_cov(&second, &cfg) - &raw_first).norm_squared();
        if loss < best.0 {
            best = (loss, delta);
        }
    }
    Ok(best.1)
}

/// Default cross-validation grid `{0, 0.5, ..., 4}`.
pub fn default_delta_grid() -> Vec<f64> {
    (0..=8).map(|k| k as f64 * 0.5).collect()
}

/// `Γ = Λ'Σ̃Λ / N` from a thresholded covariance.
pub fn gamma_fpr(lambda_hat: &DMatrix<f64>, sigma_tilde: &DMatrix<f64>) -> Result<GammaEstimate> {
    let value = sandwich_meat(lambda_hat, sigma_tilde)?;
    Ok(GammaEstimate {
        value,
        variant: Variant::Fpr,
        t: None,
    })
}

/// Sandwich `(1/N)(Λ'Λ/N)⁻¹ Γ (Λ'Λ/N)⁻¹`.
pub fn avar(lambda_hat: &DMatrix<f64>, gamma: &GammaEstimate) -> Result<AvarEstimate> {
    let bread = bread(lambda_hat)?;
    Ok(apply_bread(&bread, lambda_hat.nrows(), gamma))
}

fn bread(lambda_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = lambda_hat.nrows() as f64;
    inverse_gram(&(lambda_hat.tr_mul(lambda_hat) / n), "loading Gram matrix")
}

fn apply_bread(bread: &DMatrix<f64>, n: usize, gamma: &GammaEstimate) -> AvarEstimate {
    let value = linalg::symmetrize(&(bread * &gamma.value * bread / n as f64));
    AvarEstimate {
        value,
        variant: gamma.variant,
        n,
        t: gamma.t,
    }
}

/// Options for the data-driven variants.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MseOptions {
    pub threshold: ThresholdConfig,
    /// Pick `δ` by cross-validation instead of using `threshold.delta`.
    pub cross_validate: bool,
    pub subsample: SubsampleConfig,
}

/// Per-period asymptotic MSE of an estimate under a data-driven variant.
///
/// `TRUE` needs the data-generating covariance; use [`avar_true`] instead.
pub fn estimate_avar(
    panel: &PanelData,
    est: &FactorEstimate,
    variant: Variant,
    options: &MseOptions,
) -> Result<Vec<AvarEstimate>> {
    let eps = crate::pc::residuals(panel, est)?;
    let bread = bread(&est.lambda_hat)?;
    let n = panel.n();
    let base: Vec<AvarEstimate> = match variant.base() {
        Variant::True => {
            return Err(param(
                "variant",
                "TRUE requires the data-generating covariance",
            ));
        }
        Variant::Hr => gamma_hr_series(&est.lambda_hat, &eps)?
            .iter()
            .map(|g| apply_bread(&bread, n, g))
            .collect(),
        _ => {
            let delta = if options.cross_validate {
                cross_validate_delta(&eps, &default_delta_grid())?
            } else {
                options.threshold.delta
            };
            let sigma = threshold_idio_cov(&eps, &ThresholdConfig::new(delta)?);
            let avar = apply_bread(&bread, n, &gamma_fpr(&est.lambda_hat, &sigma)?);
            (0..panel.t())
                .map(|t| AvarEstimate {
                    t: Some(t),
                    ..avar.clone()
                })
                .collect()
        }
    };
    if !variant.is_subsampled() {
        return Ok(base);
    }
    let dispersion = subsample_dispersion(panel, est, &options.subsample)?;
    apply_correction(&base, &dispersion)
}

/// `TRUE` variant: the sandwich with the data-generating covariance and
/// loadings (time-invariant).
pub fn avar_true(lambda: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> Result<AvarEstimate> {
    avar(lambda, &gamma_true(lambda, sigma_eps)?)
}

/// Between-subsample dispersion of the factor estimates, per period.
///
/// Each of the `B` subsamples is a contiguous block of periods with a seeded
/// start. On the block the loadings are re-estimated by least squares on the
/// full-sample factors (respecting the block-zero pattern for SLS), and the
/// factors of every period are recomputed with those loadings. The result at
/// `t` is the covariance of these `B` factor estimates.
pub fn subsample_dispersion(
    panel: &PanelData,
    est: &FactorEstimate,
    config: &SubsampleConfig,
) -> Result<Vec<DMatrix<f64>>> {
    let (t, r) = (panel.t(), est.f_hat.ncols());
    if est.f_hat.nrows() != t || est.lambda_hat.nrows() != panel.n() {
        return Err(Error::Dimension("estimate does not match the panel".into()));
    }
    let len = config.block_len(t, r)?;
    let starts: Vec<usize> = (0..config.b)
        .map(|b| {
            if len == t {
                0
            } else {
                use rand::Rng;
                seed::rng(config.seed, Stream::Subsample, b as u64).random_range(0..=t - len)
            }
        })
        .collect();
    let draws: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&start| {
            let f_block = est.f_hat.rows(start, len).into_owned();
            let y_block = panel.y().rows(start, len).into_owned();
            let lambda = match est.estimator {
                Estimator::Sls => loadings_step(&y_block, panel.structure(), &f_block)?,
                Estimator::Pc => {
                    linalg::least_squares(&f_block, &y_block, "subsample factors")?.transpose()
                }
            };
            factors_step(panel.y(), &lambda)
        })
        .collect::<Result<_>>()?;

    let b = draws.len() as f64;
    let mut mean = DMatrix::zeros(t, r);
    for d in &draws {
        mean += d;
    }
    mean /= b;
    let mut out = vec![DMatrix::zeros(r, r); t];
    for d in &draws {
        let dev = d - &mean;
        for (s, acc) in out.iter_mut().enumerate() {
            let row = dev.row(s);
            *acc += row.transpose() * row;
        }
    }
    for acc in &mut out {
        *acc /= b;
    }
    Ok(out)
}

/// Adds per-period dispersion to base (`HR`/`FPR`) estimates, producing the
/// corresponding subsampled variant.
pub fn apply_correction(
    base: &[AvarEstimate],
    dispersion: &[DMatrix<f64>],
) -> Result<Vec<AvarEstimate>> {
    if base.len() != dispersion.len() {
        return Err(Error::Dimension(format!(
            "{} base periods, {} correction periods",
            base.len(),
            dispersion.len()
        )));
    }
    base.iter()
        .zip(dispersion)
        .map(|(a, d)| {
            let variant = match a.variant {
                Variant::Hr => Variant::Hrs,
                Variant::Fpr => Variant::Fprs,
                v => {
                    return Err(param(
                        "variant",
                        format!("{v} cannot be subsample-corrected"),
                    ))
                }
            };
            Ok(AvarEstimate {
                value: &a.value + d,
                variant,
                ..a.clone()
            })
        })
        .collect()
}

/// Whether `truth` lies in the `1 − α` confidence ellipsoid around `f_hat`.
pub fn confidence_region_contains(
    f_hat: &DVector<f64>,
    avar: &AvarEstimate,
    truth: &DVector<f64>,
    alpha: f64,
) -> Result<bool> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(param("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    let r = f_hat.len();
    if truth.len() != r || avar.value.shape() != (r, r) {
        return Err(Error::Dimension("factor and Avar dimensions differ".into()));
    }
    let diff = DMatrix::from_column_slice(r, 1, (truth - f_hat).as_slice());
    let solved = linalg::solve_gram(&avar.value, &diff, "asymptotic MSE")?;
    let stat = diff.dot(&solved);
    Ok(stat <= chi_square_quantile(r, 1.0 - alpha)?)
}

/// `p`-quantile of the chi-square distribution with `df` degrees of freedom.
///
/// Newton iterations on the regularized lower incomplete gamma function,
/// safeguarded by bisection.
pub fn chi_square_quantile(df: usize, p: f64) -> Result<f64> {
    if df == 0 {
        return Err(param("df", "degrees of freedom must be positive"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(param(
            "p",
            format!("probability must lie in (0, 1), got {p}"),
        ));
    }
    let k = df as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(k, x / 2.0);
    let (mut lo, mut hi) = (0.0, df as f64 + 10.0);
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let ln_norm = statrs::function::gamma::ln_gamma(k) + k * std::f64::consts::LN_2;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = cdf(x) - p;
        if fx.abs() < 1e-15 {
            break;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = ((k - 1.0) * x.ln() - x / 2.0 - ln_norm).exp();
        let newton = x - fx / density;
        x = if density > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    Ok(x)
}
