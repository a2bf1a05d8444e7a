//! Monte Carlo experiments comparing the empirical MSE of estimated factors
//! with the asymptotic approximations.
//!
//! Factors, loadings and the idiosyncratic covariance are drawn once per
//! experiment. Each replication only redraws the idiosyncratic noise, so the
//! truth the estimates are compared with is the same in every replication.
//! Replications run in parallel but are collected in order and reduced
//! serially, so results do not depend on the number of workers.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{param, Error, Result};
use crate::mse::{self, AvarEstimate, MseOptions, Variant};
use crate::panel::{Design, DesignSpec, GroupStructure};
use crate::pc::{pc_extract, procrustes_align, sign_align, Estimator, FactorEstimate};
use crate::seed::{self, Stream};
use crate::sls::{sls_estimate, SlsOptions};

/// Largest tolerated share of failed replications.
const MAX_FAILURE_SHARE: f64 = 0.05;
/// Tolerance of the `MSE = Cov + Bias²` identity.
const IDENTITY_TOL: f64 = 1e-10;
const DENSITY_POINTS: usize = 401;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub structure: GroupStructure,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub phi: f64,
    pub c: f64,
    pub tau: f64,
    pub heteroscedastic: bool,
    pub estimator: Estimator,
    #[serde(default)]
    pub mse: MseOptions,
    /// Estimated variants to compute (`TRUE` is always reported).
    #[serde(default = "all_estimated_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub sls: SlsOptions,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// One-based periods to histogram; defaults to first, middle and last.
    #[serde(default)]
    pub histogram_periods: Option<Vec<usize>>,
    /// Level of the coverage check.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
}

fn all_estimated_variants() -> Vec<Variant> {
    vec![Variant::Hr, Variant::Hrs, Variant::Fpr, Variant::Fprs]
}

fn default_bins() -> usize {
    30
}

fn default_alpha() -> f64 {
    0.05
}

impl ExperimentConfig {
    /// Plain factor model with `r` factors estimated by PC.
    pub fn dfm(n: usize, r: usize, t: usize, m: usize) -> Result<Self> {
        Ok(Self::with_structure(
            GroupStructure::pooled(n, r)?,
            Estimator::Pc,
            t,
            m,
        ))
    }

    /// Multi-level model estimated by SLS.
    pub fn ml(structure: GroupStructure, t: usize, m: usize) -> Self {
        Self::with_structure(structure, Estimator::Sls, t, m)
    }

    fn with_structure(structure: GroupStructure, estimator: Estimator, t: usize, m: usize) -> Self {
        Self {
            structure,
            t,
            m,
            phi: 0.5,
            c: 0.25,
            tau: 0.0,
            heteroscedastic: false,
            estimator,
            mse: MseOptions::default(),
            variants: all_estimated_variants(),
            sls: SlsOptions::default(),
            histogram_bins: default_bins(),
            histogram_periods: None,
            alpha: default_alpha(),
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(param("M", "at least one replication is required"));
        }
        if self.t <= self.structure.r() {
            return Err(param(
                "T",
                format!("need more than {} periods", self.structure.r()),
            ));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(param("c", format!("must be non-negative, got {}", self.c)));
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return Err(param(
                "tau",
                format!("must lie in (-1, 1), got {}", self.tau),
            ));
        }
        if !(self.phi.abs() < 1.0) {
            return Err(param(
                "phi",
                format!("must satisfy |phi| < 1, got {}", self.phi),
            ));
        }
        if self.variants.contains(&Variant::True) {
            return Err(param(
                "variants",
                "TRUE is always computed; list only estimated variants",
            ));
        }
        if self.histogram_bins == 0 {
            return Err(param("histogram_bins", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(param(
                "alpha",
                format!("must lie in (0, 1), got {}", self.alpha),
            ));
        }
        if let Some(periods) = &self.histogram_periods {
            if let Some(&bad) = periods.iter().find(|&&p| p == 0 || p > self.t) {
                return Err(param(
                    "histogram_periods",
                    format!("period {bad} outside 1..={}", self.t),
                ));
            }
        }
        mse::ThresholdConfig::new(self.mse.threshold.delta)?;
        if self.variants.iter().any(|v| v.is_subsampled()) {
            self.mse.subsample.block_len(self.t, self.structure.r())?;
        }
        Ok(())
    }

    fn design_spec(&self) -> DesignSpec {
        DesignSpec {
            structure: self.structure.clone(),
            t: self.t,
            phi: self.phi,
            c: self.c,
            tau: self.tau,
            heteroscedastic: self.heteroscedastic,
            seed: self.seed,
        }
    }

    fn periods(&self) -> Vec<usize> {
        self.histogram_periods
            .clone()
            .unwrap_or_else(|| vec![1, self.t.div_ceil(2), self.t])
    }
}

/// Histogram of the replication estimates of one factor at one period,
/// together with the asymptotic normal density around the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub density_x: Vec<f64>,
    pub density_y: Vec<f64>,
    pub truth: f64,
    pub asymptotic_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodHistograms {
    /// One-based period.
    pub t: usize,
    pub factors: Vec<Histogram>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub labels: Vec<String>,
    #[serde(serialize_with = "ser_matrix")]
    pub empirical_mse: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub empirical_cov: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub empirical_bias2: DMatrix<f64>,
    /// Time-averaged asymptotic MSE per variant.
    #[serde(serialize_with = "ser_matrix_map")]
    pub asymptotic: BTreeMap<Variant, DMatrix<f64>>,
    /// Largest `|MSE − Cov − Bias²|` over periods and entries.
    pub identity_max_error: f64,
    /// Share of (replication, period) pairs whose `TRUE` confidence region
    /// contains the true factor; `None` for noiseless designs.
    pub coverage: Option<f64>,
    pub histograms: Vec<PeriodHistograms>,
    pub replications: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub nonconverged: usize,
    pub mean_iterations: f64,
    pub runtime_seconds: f64,
}

fn ser_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    rows(m).serialize(s)
}

fn ser_matrix_map<S: Serializer>(
    m: &BTreeMap<Variant, DMatrix<f64>>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    m.iter()
        .map(|(k, v)| (k.as_str(), rows(v)))
        .collect::<BTreeMap<_, _>>()
        .serialize(s)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// What a single replication hands back to the reducer.
struct Replication {
    f_hat: DMatrix<f64>,
    variant_means: Vec<(Variant, DMatrix<f64>)>,
    covered: Option<usize>,
    iterations: usize,
    converged: bool,
}

/// Runs the experiment on the current rayon pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let started = Instant::now();
    let design = Design::generate(config.design_spec())?;
    let truth = &design.factors.f;
    let noiseless = design.idio.is_none();
    let true_avar = if noiseless {
        None
    } else {
        Some(mse::avar_true(&design.loadings.lambda, &design.sigma_eps)?)
    };

    let outcomes: Vec<Result<Replication>> = (0..config.m)
        .into_par_iter()
        .map(|m| replicate(config, &design, true_avar.as_ref(), m))
        .collect();

    let mut reps = Vec::with_capacity(config.m);
    let mut failure_messages = Vec::new();
    for (m, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(rep) => reps.push(rep),
            Err(e) => {
                log::warn!("replication {m} failed: {e}");
                failure_messages.push(format!("replication {m}: {e}"));
            }
        }
    }
    let failures = failure_messages.len();
    if failures as f64 > MAX_FAILURE_SHARE * config.m as f64 || reps.is_empty() {
        return Err(Error::Experiment(format!(
            "{failures} of {} replications failed; first: {}",
            config.m,
            failure_messages
                .first()
                .map(String::as_str)
                .unwrap_or("none")
        )));
    }

    let estimates: Vec<DMatrix<f64>> = reps.iter().map(|r| r.f_hat.clone()).collect();
    let (t, r) = (config.t, config.structure.r());
    let mut mse_t = Vec::with_capacity(t);
    let mut cov_t = Vec::with_capacity(t);
    let mut bias_t = Vec::with_capacity(t);
    let mut identity_max_error: f64 = 0.0;
    for s in 0..t {
        let mse_s = empirical_mse(&estimates, truth, s);
        let (cov_s, bias_s) = decompose_mse(&estimates, truth, s);
        let gap = &mse_s - &cov_s - &bias_s;
        identity_max_error = identity_max_error.max(gap.amax());
        mse_t.push(mse_s);
        cov_t.push(cov_s);
        bias_t.push(bias_s);
    }
    if identity_max_error > IDENTITY_TOL {
        return Err(Error::Experiment(format!(
            "MSE decomposition identity violated by {identity_max_error:e}"
        )));
    }

    let mut asymptotic = BTreeMap::new();
    asymptotic.insert(
        Variant::True,
        true_avar
            .as_ref()
            .map(|a| a.value.clone())
            .unwrap_or_else(|| DMatrix::zeros(r, r)),
    );
    for &v in &config.variants {
        let per_rep: Vec<DMatrix<f64>> = reps
            .iter()
            .map(|rep| {
                rep.variant_means
                    .iter()
                    .find(|(k, _)| *k == v)
                    .expect("computed")
                    .1
                    .clone()
            })
            .collect();
        asymptotic.insert(v, average_over_time(&per_rep)?);
    }

    let coverage = if noiseless {
        None
    } else {
        let hits: usize = reps.iter().map(|r| r.covered.unwrap_or(0)).sum();
        Some(hits as f64 / (reps.len() * t) as f64)
    };

    let mut histograms = Vec::new();
    if let (Some(avar), true) = (&true_avar, reps.len() >= 2) {
        for p in config.periods() {
            let mut factors = Vec::with_capacity(r);
            for k in 0..r {
                let values: Vec<f64> = estimates.iter().map(|e| e[(p - 1, k)]).collect();
                let sd = avar.value[(k, k)].sqrt();
                factors.push(histogram_data(
                    &values,
                    config.histogram_bins,
                    sd,
                    truth[(p - 1, k)],
                )?);
            }
            histograms.push(PeriodHistograms { t: p, factors });
        }
    }

    let nonconverged = reps.iter().filter(|r| !r.converged).count();
    let mean_iterations = reps.iter().map(|r| r.iterations as f64).sum::<f64>() / reps.len() as f64;
    Ok(ExperimentResult {
        config: config.clone(),
        labels: config.structure.factor_labels(),
        empirical_mse: average_over_time(&mse_t)?,
        empirical_cov: average_over_time(&cov_t)?,
        empirical_bias2: average_over_time(&bias_t)?,
        asymptotic,
        identity_max_error,
        coverage,
        histograms,
        replications: reps.len(),
        failures,
        failure_messages,
        nonconverged,
        mean_iterations,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs the experiment on a dedicated pool of `workers` threads.
pub fn run_experiment_with_workers(
    config: &ExperimentConfig,
    workers: usize,
) -> Result<ExperimentResult> {
    if workers == 0 {
        return Err(param("workers", "must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Experiment(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_experiment(config))
}

fn replicate(
    config: &ExperimentConfig,
    design: &Design,
    true_avar: Option<&AvarEstimate>,
    m: usize,
) -> Result<Replication> {
    let rep_seed = seed::derive_seed(config.seed, Stream::Replication, m as u64);
    let panel = design.simulate(rep_seed)?;
    let truth = &design.factors.f;
    let est: FactorEstimate = match config.estimator {
        Estimator::Pc => procrustes_align(&pc_extract(&panel, config.structure.r())?, truth)?,
        Estimator::Sls => sign_align(
            &sls_estimate(&panel, &config.sls)?.to_factor_estimate(),
            truth,
        )?,
    };

    let mut options = config.mse;
    options.subsample.seed =
        seed::derive_seed(rep_seed, Stream::Subsample, config.mse.subsample.seed);
    let mut variant_means = Vec::with_capacity(config.variants.len());
    if !config.variants.is_empty() {
        let mut base: BTreeMap<Variant, Vec<AvarEstimate>> = BTreeMap::new();
        for base_variant in [Variant::Hr, Variant::Fpr] {
            if config.variants.iter().any(|v| v.base() == base_variant) {
                base.insert(
                    base_variant,
                    mse::estimate_avar(&panel, &est, base_variant, &options)?,
                );
            }
        }
        let dispersion = if config.variants.iter().any(|v| v.is_subsampled()) {
            Some(mse::subsample_dispersion(&panel, &est, &options.subsample)?)
        } else {
            None
        };
        for &v in &config.variants {
            let series = if v.is_subsampled() {
                mse::apply_correction(&base[&v.base()], dispersion.as_ref().expect("computed"))?
            } else {
                base[&v].clone()
            };
            let values: Vec<DMatrix<f64>> = series.into_iter().map(|a| a.value).collect();
            variant_means.push((v, average_over_time(&values)?));
        }
    }

    let covered = match true_avar {
        Some(avar) => {
            let mut hits = 0;
            for s in 0..config.t {
                let f_hat =
                    DVector::from_iterator(est.f_hat.ncols(), est.f_hat.row(s).iter().copied());
                let f = DVector::from_iterator(truth.ncols(), truth.row(s).iter().copied());
                if mse::confidence_region_contains(&f_hat, avar, &f, config.alpha)? {
                    hits += 1;
                }
            }
            Some(hits)
        }
        None => None,
    };

    Ok(Replication {
        f_hat: est.f_hat,
        variant_means,
        covered,
        iterations: est.iterations,
        converged: est.converged,
    })
}

fn error_at(estimate: &DMatrix<f64>, reference: &DVector<f64>, t: usize) -> DVector<f64> {
    DVector::from_iterator(reference.len(), estimate.row(t).iter().copied()) - reference
}

fn row(m: &DMatrix<f64>, t: usize) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.row(t).iter().copied())
}

/// `(1/M) Σ_m (F̂_t − F_t)(F̂_t − F_t)'` at period `t` (zero-based).
pub fn empirical_mse(estimates: &[DMatrix<f64>], truth: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let f = row(truth, t);
    let mut acc = DMatrix::zeros(f.len(), f.len());
    for e in estimates {
        let d = error_at(e, &f, t);
        acc += &d * d.transpose();
    }
    acc / estimates.len() as f64
}

/// Splits the empirical MSE at `t` into the covariance around the
/// replication mean and the squared bias of that mean.
pub fn decompose_mse(
    estimates: &[DMatrix<f64>],
    truth: &DMatrix<f64>,
    t: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = truth.ncols();
    let mut mean = DVector::zeros(r);
    for e in estimates {
        mean += row(e, t);
    }
    mean /= estimates.len() as f64;
    let mut cov = DMatrix::zeros(r, r);
    for e in estimates {
        let d = error_at(e, &mean, t);
        cov += &d * d.transpose();
    }
    cov /= estimates.len() as f64;
    let bias = row(truth, t) - mean;
    (cov, &bias * bias.transpose())
}

/// Elementwise mean of a series of equally sized matrices.
pub fn average_over_time(series: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = series
        .first()
        .ok_or_else(|| param("series", "cannot average an empty series"))?;
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for m in series {
        if m.shape() != first.shape() {
            return Err(Error::Dimension(
                "matrices in the series differ in shape".into(),
            ));
        }
        acc += m;
    }
    Ok(acc / series.len() as f64)
}

/// Equal-width histogram of `estimates` plus the `N(truth, sd²)` density on
/// a grid covering both the data and five standard deviations around the
/// truth.
pub fn histogram_data(
    estimates: &[f64],
    bins: usize,
    asymptotic_sd: f64,
    truth: f64,
) -> Result<Histogram> {
    if estimates.len() < 2 {
        return Err(param("estimates", "a histogram needs at least two values"));
    }
    if bins == 0 {
        return Err(param("bins", "must be positive"));
    }
    if !(asymptotic_sd > 0.0 && asymptotic_sd.is_finite()) {
        return Err(param(
            "asymptotic_sd",
            format!("must be positive, got {asymptotic_sd}"),
        ));
    }
    let lo = estimates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = estimates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &x in estimates {
        let k = (((x - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let a = lo.min(truth - 5.0 * asymptotic_sd);
    let b = hi.max(truth + 5.0 * asymptotic_sd);
    let step = (b - a) / (DENSITY_POINTS - 1) as f64;
    let norm = 1.0 / (asymptotic_sd * (2.0 * std::f64::consts::PI).sqrt());
    let density_x: Vec<f64> = (0..DENSITY_POINTS).map(|k| a + k as f64 * step).collect();
    let density_y = density_x
        .iter()
        .map(|x| norm * (-0.5 * ((x - truth) / asymptotic_sd).powi(2)).exp())
        .collect();
    Ok(Histogram {
        edges,
        counts,
        density_x,
        density_y,
        truth,
        asymptotic_sd,
    })
}

pub const TABLE_COLUMNS: [&str; 8] = [
    "MSE", "Cov", "Bias2", "Asym-MSE", "HR", "HRS", "FPR", "FPRS",
];

/// Summary in the layout of the published tables: one row per factor and
/// per factor pair, eight value columns, entries multiplied by 10.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    /// `None` for variants that were not computed.
    pub values: [Option<f64>; 8],
}

/// Factor index pairs in table order. Single-level models list adjacent
/// pairs first; multi-level models list pairs lexicographically.
pub fn table_pairs(structure: &GroupStructure) -> Vec<(usize, usize)> {
    let r = structure.r();
    let mut pairs: Vec<(usize, usize)> = (0..r).map(|k| (k, k)).collect();
    if structure.is_pooled() {
        pairs.extend((1..r).map(|k| (k - 1, k)));
        for gap in 2..r {
            pairs.extend((gap..r).map(|k| (k - gap, k)));
        }
    } else {
        for i in 0..r {
            pairs.extend((i + 1..r).map(|j| (i, j)));
        }
    }
    pairs
}

impl ExperimentResult {
    pub fn table(&self) -> Table {
        let labels = &self.labels;
        let columns: [Option<&DMatrix<f64>>; 8] = [
            Some(&self.empirical_mse),
            Some(&self.empirical_cov),
            Some(&self.empirical_bias2),
            self.asymptotic.get(&Variant::True),
            self.asymptotic.get(&Variant::Hr),
            self.asymptotic.get(&Variant::Hrs),
            self.asymptotic.get(&Variant::Fpr),
            self.asymptotic.get(&Variant::Fprs),
        ];
        let rows = table_pairs(&self.config.structure)
            .into_iter()
            .map(|(i, j)| TableRow {
                label: if i == j {
                    labels[i].clone()
                } else {
                    format!("{},{}", labels[i], labels[j])
                },
                values: columns.map(|m| m.map(|m| 10.0 * m[(i, j)])),
            })
            .collect();
        Table { rows }
    }
}

impl Table {
    /// CSV with a `factor` column followed by [`TABLE_COLUMNS`]; values use
    /// the shortest round-trip decimal form, missing values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(std::iter::once("factor").chain(TABLE_COLUMNS))?;
        for row in &self.rows {
            let mut record = vec![row.label.clone()];
            record.extend(
                row.values
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            w.write_record(&record)?;
        }
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn col(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    #[test]
    fn empirical_mse_examples() {
        let truth = col(&[1.0]);
        let same = vec![truth.clone(), truth.clone()];
        assert_eq!(empirical_mse(&same, &truth, 0), DMatrix::zeros(1, 1));
        let e = 0.3;
        let two = vec![col(&[1.0 + e]), col(&[1.0 - e])];
        assert_abs_diff_eq!(
            empirical_mse(&two, &truth, 0)[(0, 0)],
            e * e,
            epsilon = 1e-15
        );
        let (cov, bias) = decompose_mse(&two, &truth, 0);
        assert!(bias[(0, 0)].abs() < 1e-14);
        assert_abs_diff_eq!(cov[(0, 0)], e * e, epsilon = 1e-15);
    }

    #[test]
    fn decomposition_of_identical_replications() {
        let truth = DMatrix::from_row_slice(1, 2, &[0.5, -0.5]);
        let est = DMatrix::from_row_slice(1, 2, &[0.7, -0.2]);
        let (cov, bias) = decompose_mse(&[est.clone(), est.clone()], &truth, 0);
        assert_eq!(cov, DMatrix::zeros(2, 2));
        let d = DVector::from_vec(vec![0.2, 0.3]);
        assert_abs_diff_eq!(bias, &d * d.transpose(), epsilon = 1e-15);
    }

    #[test]
    fn decomposition_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = DMatrix::from_fn(3, 2, |_, _| StandardNormal.sample(&mut rng));
        let ests: Vec<DMatrix<f64>> = (0..20)
            .map(|_| DMatrix::from_fn(3, 2, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let t = 1;
        let mut mean = [0.0; 2];
        for e in &ests {
            for k in 0..2 {
                mean[k] += e[(t, k)] / 20.0;
            }
        }
        let mut cov = [[0.0; 2]; 2];
        let mut mse = [[0.0; 2]; 2];
        for e in &ests {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += (e[(t, a)] - mean[a]) * (e[(t, b)] - mean[b]) / 20.0;
                    mse[a][b] += (e[(t, a)] - truth[(t, a)]) * (e[(t, b)] - truth[(t, b)]) / 20.0;
                }
            }
        }
        let (c, b2) = decompose_mse(&ests, &truth, t);
        let m = empirical_mse(&ests, &truth, t);
        for a in 0..2 {
            for b in 0..2 {
                assert!((c[(a, b)] - cov[a][b]).abs() < 1e-12);
                assert!((m[(a, b)] - mse[a][b]).abs() < 1e-12);
                let bias = (truth[(t, a)] - mean[a]) * (truth[(t, b)] - mean[b]);
                assert!((b2[(a, b)] - bias).abs() < 1e-12);
                assert!((m[(a, b)] - c[(a, b)] - b2[(a, b)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn average_over_time_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            average_over_time(&[a.clone(), a.clone(), a.clone()]).unwrap(),
            a
        );
        assert_eq!(
            average_over_time(&[a.clone(), -&a]).unwrap(),
            DMatrix::zeros(2, 2)
        );
        let b = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let c = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 2.5, 0.0]);
        let avg = average_over_time(&[a.clone(), b.clone(), c.clone()]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((avg[(i, j)] - (a[(i, j)] + b[(i, j)] + c[(i, j)]) / 3.0).abs() < 1e-14);
            }
        }
        assert!(average_over_time(&[]).is_err());
    }

    #[test]
    fn histogram_of_identical_values() {
        let h = histogram_data(&[0.3; 10], 5, 0.1, 0.3).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 10);
    }

    #[test]
    fn density_integrates_to_one() {
        let h = histogram_data(&[-0.2, 0.1, 0.4], 4, 0.5, 0.0).unwrap();
        let area: f64 = h
            .density_x
            .windows(2)
            .zip(h.density_y.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum();
        assert!((area - 1.0).abs() < 1e-3, "area {area}");
    }

    #[test]
    fn standard_normal_sample_fits_emitted_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let h = histogram_data(&xs, 20, 1.0, 0.0).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        // Merge sparse tail bins so every expected count is at least 5.
        let mut stat = 0.0;
        let mut cells = 0;
        let (mut obs, mut exp) = (0.0, 0.0);
        for k in 0..20 {
            obs += h.counts[k] as f64;
            exp += 1000.0 * (normal.cdf(h.edges[k + 1]) - normal.cdf(h.edges[k]));
            if exp >= 5.0 {
                stat += (obs - exp).powi(2) / exp;
                cells += 1;
                obs = 0.0;
                exp = 0.0;
            }
        }
        let crit = mse::chi_square_quantile(cells - 1, 0.99).unwrap();
        assert!(stat < crit, "chi-square {stat} vs {crit}");
    }

    #[test]
    fn single_replication_has_no_covariance() {
        let mut cfg = ExperimentConfig::dfm(20, 2, 30, 1).unwrap();
        cfg.variants = vec![Variant::Hr];
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.empirical_cov, DMatrix::zeros(2, 2));
        assert_eq!(res.empirical_mse, res.empirical_bias2);
        assert!(res.histograms.is_empty());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut cfg = ExperimentConfig::ml(
            GroupStructure::new(vec![10, 10], 1, vec![1, 1]).unwrap(),
            30,
            12,
        );
        cfg.mse.subsample.b = 5;
        let a = run_experiment_with_workers(&cfg, 1).unwrap();
        let b = run_experiment_with_workers(&cfg, 3).unwrap();
        assert_eq!(a.empirical_mse, b.empirical_mse);
        assert_eq!(a.table().to_csv_string(), b.table().to_csv_string());
    }

    #[test]
    fn table_layouts() {
        let pooled = GroupStructure::pooled(10, 3).unwrap();
        assert_eq!(
            table_pairs(&pooled),
            vec![(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)]
        );
        let ml = GroupStructure::new(vec![5, 5], 1, vec![1, 1]).unwrap();
        assert_eq!(
            table_pairs(&ml),
            vec![(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
        );

        let mut cfg = ExperimentConfig::ml(ml, 20, 4);
        cfg.variants = vec![Variant::Hr, Variant::Fpr];
        let res = run_experiment(&cfg).unwrap();
        let csv = res.table().to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "factor,MSE,Cov,Bias2,Asym-MSE,HR,HRS,FPR,FPRS");
        assert_eq!(lines.len(), 7);
        assert!(lines[4].starts_with("\"G,L1\","));
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert!(fields[6].is_empty() && fields[8].is_empty() && !fields[7].is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::dfm(20, 2, 30, 0).unwrap();
        assert!(run_experiment(&cfg).is_err());
        cfg.m = 2;
        cfg.tau = 1.0;
        assert!(matches!(
            run_experiment(&cfg),
            Err(Error::Parameter { name: "tau", .. })
        ));
    }
}
