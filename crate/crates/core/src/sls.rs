//! Sequential least squares for multi-level factor models.
//!
//! The estimator starts from canonical-correlation estimates of the global
//! factors, then alternates two least-squares steps until the residual sum
//! of squares settles:
//!
//! 1. loadings, group by group, by regressing each series on the global
//!    factors and the factors of its own group;
//! 2. factors, period by period, by regressing the cross-section on the
//!    stacked loading matrix (which carries the block-zero pattern).
//!
//! Finally the estimate is rotated into the identified normalization:
//! orthonormal factors, group factors orthogonal to the global ones and
//! diagonal loading Gram matrices within each block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::linalg::{self, orthonormal_factor, sym_eigen_desc};
use crate::panel::{fix_column_signs, GroupStructure, PanelData};
use crate::pc::{pc_extract_matrix, Estimator, FactorEstimate};

/// How the global factors are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Generalized canonical correlations across group-level PC factors.
    #[default]
    Cca,
    /// Principal components of the whole panel.
    PooledPc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlsOptions {
    /// Relative RSS change that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub init: Init,
}

impl Default for SlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            init: Init::Cca,
        }
    }
}

/// Global and group-specific factor estimates with their loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct MlFactorEstimate {
    pub structure: GroupStructure,
    /// `T × r_g`.
    pub g_hat: DMatrix<f64>,
    /// One `T × r_s` block per group.
    pub l_hat: Vec<DMatrix<f64>>,
    /// `N × r_g`.
    pub lambda_g_hat: DMatrix<f64>,
    /// One `N_s × r_s` block per group.
    pub lambda_l_hat: Vec<DMatrix<f64>>,
    pub iterations: usize,
    pub rss_trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl MlFactorEstimate {
    /// Builds the block representation from stacked `[G, L_1, ..., L_S]`
    /// factors and an `N × r` loading matrix.
    pub fn from_stacked(
        structure: &GroupStructure,
        f: &DMatrix<f64>,
        lambda: &DMatrix<f64>,
    ) -> Result<Self> {
        if f.ncols() != structure.r() || lambda.shape() != (structure.n(), structure.r()) {
            return Err(Error::Dimension(format!(
                "factors {:?} / loadings {:?} do not match the structure",
                f.shape(),
                lambda.shape()
            )));
        }
        let rg = structure.r_global();
        let mut l_hat = Vec::new();
        let mut lambda_l_hat = Vec::new();
        for s in 0..structure.num_groups() {
            let cols = structure.group_factor_cols(s);
            let rows = structure.group_rows(s);
            l_hat.push(f.columns(cols.start, cols.len()).into_owned());
            lambda_l_hat.push(
                lambda
                    .view((rows.start, cols.start), (rows.len(), cols.len()))
                    .into_owned(),
            );
        }
        Ok(Self {
            structure: structure.clone(),
            g_hat: f.columns(0, rg).into_owned(),
            l_hat,
            lambda_g_hat: lambda.columns(0, rg).into_owned(),
            lambda_l_hat,
            iterations: 0,
            rss_trace: Vec::new(),
            converged: false,
            warnings: Vec::new(),
        })
    }

    /// `[G, L_1, ..., L_S]` (`T × r`).
    pub fn stacked_factors(&self) -> DMatrix<f64> {
        let mut blocks = vec![&self.g_hat];
        blocks.extend(self.l_hat.iter());
        linalg::hstack(&blocks, self.g_hat.nrows())
    }

    /// `N × r` loadings with the block-zero pattern.
    pub fn stacked_loadings(&self) -> DMatrix<f64> {
        stack_loadings(&self.structure, &self.lambda_g_hat, &self.lambda_l_hat)
    }

    pub fn common_component(&self) -> DMatrix<f64> {
        self.stacked_factors() * self.stacked_loadings().transpose()
    }

    /// Flattened view shared with the principal-components estimator.
    pub fn to_factor_estimate(&self) -> FactorEstimate {
        FactorEstimate {
            f_hat: self.stacked_factors(),
            lambda_hat: self.stacked_loadings(),
            estimator: Estimator::Sls,
            iterations: self.iterations,
            rss_trace: self.rss_trace.clone(),
            converged: self.converged,
            warnings: self.warnings.clone(),
        }
    }
}

fn stack_loadings(
    structure: &GroupStructure,
    lambda_g: &DMatrix<f64>,
    lambda_l: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(structure.n(), structure.r());
    out.columns_mut(0, structure.r_global()).copy_from(lambda_g);
    for (s, block) in lambda_l.iter().enumerate() {
        let cols = structure.group_factor_cols(s);
        let rows = structure.group_rows(s);
        out.view_mut((rows.start, cols.start), (rows.len(), cols.len()))
            .copy_from(block);
    }
    out
}

/// Starting values for the alternating updates.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaInit {
    /// `T × r_g`, with `G'G/T = I`.
    pub g0: DMatrix<f64>,
    pub l0: Vec<DMatrix<f64>>,
    /// Leading generalized canonical correlations (one per global factor);
    /// empty when the initialization did not use them.
    pub canonical_correlations: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Canonical correlations below this are treated as no common signal.
const CCA_DEGENERATE: f64 = 1e-8;

/// Initial global factors from canonical correlations across groups, and
/// group factors from principal components of what the global ones leave.
///
/// With more than two groups the correlations are the MAXVAR generalization:
/// the leading eigenvectors of the Gram matrix of all groups' (orthonormal)
/// PC factors. For two groups this is classical CCA.
pub fn cca_init(panel: &PanelData) -> Result<CcaInit> {
    init_with(panel, Init::Cca)
}

fn init_with(panel: &PanelData, init: Init) -> Result<CcaInit> {
    let structure = panel.structure();
    let (t, rg) = (panel.t(), structure.r_global());
    let num_groups = structure.num_groups();
    let mut warnings = Vec::new();
    let mut canonical_correlations = Vec::new();

    let g0 = if rg == 0 {
        DMatrix::zeros(t, 0)
    } else if init == Init::PooledPc || num_groups == 1 {
        pc_extract_matrix(panel.y(), rg)?.f_hat
    } else {
        let mut blocks = Vec::with_capacity(num_groups);
        for s in 0..num_groups {
            let k = rg + structure.r_group()[s];
            blocks.push(pc_extract_matrix(&panel.group(s), k)?.f_hat);
        }
        let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
        // Each block already satisfies F'F/T = I, i.e. it is whitened.
        let z = linalg::hstack(&refs, t) / (t as f64).sqrt();
        let (values, vectors) = sym_eigen_desc(&z.tr_mul(&z));
        let denom = (num_groups - 1) as f64;
        canonical_correlations = (0..rg).map(|k| (values[k] - 1.0) / denom).collect();
        if canonical_correlations
            .iter()
            .all(|&rho| rho < CCA_DEGENERATE)
        {
            warnings.push(
                "canonical correlations vanish; global factors initialized by pooled PC".into(),
            );
            pc_extract_matrix(panel.y(), rg)?.f_hat
        } else {
            let g = &z * vectors.columns(0, rg);
            orthonormal_factor(&g)?.0
        }
    };

    let u = panel.y() - &g0 * (g0.tr_mul(panel.y()) / t as f64);
    let mut l0 = Vec::with_capacity(num_groups);
    for s in 0..num_groups {
        let rs = structure.r_group()[s];
        if rs == 0 {
            l0.push(DMatrix::zeros(t, 0));
            continue;
        }
        let rows = structure.group_rows(s);
        let us = u.columns(rows.start, rows.len()).into_owned();
        l0.push(pc_extract_matrix(&us, rs)?.f_hat);
    }
    Ok(CcaInit {
        g0,
        l0,
        canonical_correlations,
        warnings,
    })
}

/// Loadings given factors: each group's series are regressed on the global
/// factors and that group's factors.
pub fn update_loadings(
    panel: &PanelData,
    g: &DMatrix<f64>,
    l: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let structure = panel.structure();
    check_factor_blocks(structure, panel.t(), g, l)?;
    let mut blocks = vec![g];
    blocks.extend(l.iter());
    let f = linalg::hstack(&blocks, panel.t());
    let lambda = loadings_step(panel.y(), structure, &f)?;
    let est = MlFactorEstimate::from_stacked(structure, &f, &lambda)?;
    Ok((est.lambda_g_hat, est.lambda_l_hat))
}

/// Factors given loadings: each period's cross-section is regressed on the
/// stacked loading matrix.
pub fn update_factors(
    panel: &PanelData,
    lambda_g: &DMatrix<f64>,
    lambda_l: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let structure = panel.structure();
    if lambda_g.shape() != (structure.n(), structure.r_global())
        || lambda_l.len() != structure.num_groups()
        || lambda_l
            .iter()
            .enumerate()
            .any(|(s, b)| b.shape() != (structure.group_sizes()[s], structure.r_group()[s]))
    {
        return Err(Error::Dimension(
            "loading blocks do not match the group structure".into(),
        ));
    }
    let lambda = stack_loadings(structure, lambda_g, lambda_l);
    let f = factors_step(panel.y(), &lambda)?;
    let est = MlFactorEstimate::from_stacked(structure, &f, &lambda)?;
    Ok((est.g_hat, est.l_hat))
}

fn check_factor_blocks(
    structure: &GroupStructure,
    t: usize,
    g: &DMatrix<f64>,
    l: &[DMatrix<f64>],
) -> Result<()> {
    let bad = g.shape() != (t, structure.r_global())
        || l.len() != structure.num_groups()
        || l.iter()
            .enumerate()
            .any(|(s, b)| b.shape() != (t, structure.r_group()[s]));
    if bad {
        return Err(Error::Dimension(
            "factor blocks do not match the group structure".into(),
        ));
    }
    Ok(())
}

/// Regressors `[G, L_s]` of group `s` taken from stacked factors.
fn group_regressors(structure: &GroupStructure, f: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
    let rg = structure.r_global();
    let cols = structure.group_factor_cols(s);
    let mut x = DMatrix::zeros(f.nrows(), rg + cols.len());
    x.columns_mut(0, rg).copy_from(&f.columns(0, rg));
    x.columns_mut(rg, cols.len())
        .copy_from(&f.columns(cols.start, cols.len()));
    x
}

/// Loadings step on stacked factors; returns the `N × r` masked loadings.
pub(crate) fn loadings_step(
    y: &DMatrix<f64>,
    structure: &GroupStructure,
    f: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let rg = structure.r_global();
    let mut lambda = DMatrix::zeros(structure.n(), structure.r());
    for s in 0..structure.num_groups() {
        let rows = structure.group_rows(s);
        let cols = structure.group_factor_cols(s);
        let x = group_regressors(structure, f, s);
        let ys = y.columns(rows.start, rows.len()).into_owned();
        let coef =
            linalg::least_squares(&x, &ys, "group regressors").map_err(|_| Error::Update {
                block: format!("group {}", s + 1),
            })?;
        let coef = coef.transpose();
        lambda
            .view_mut((rows.start, 0), (rows.len(), rg))
            .copy_from(&coef.columns(0, rg));
        lambda
            .view_mut((rows.start, cols.start), (rows.len(), cols.len()))
            .copy_from(&coef.columns(rg, cols.len()));
    }
    Ok(lambda)
}

/// Factors step: `F = Y Λ (Λ'Λ)⁻¹`.
pub(crate) fn factors_step(y: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rhs = lambda.tr_mul(&y.transpose());
    let sol =
        linalg::solve_gram(&lambda.tr_mul(lambda), &rhs, "stacked loadings").map_err(|_| {
            Error::Update {
                block: "stacked loadings".into(),
            }
        })?;
    Ok(sol.transpose())
}

fn rss(y: &DMatrix<f64>, f: &DMatrix<f64>, lambda: &DMatrix<f64>) -> f64 {
    (y - f * lambda.transpose()).norm_squared()
}

/// Runs the full estimator: initialization, alternating updates until the
/// relative RSS change drops below `tol`, and identification.
///
/// Hitting `max_iter` is not an error; the estimate is flagged
/// `converged = false`.
pub fn sls_estimate(panel: &PanelData, options: &SlsOptions) -> Result<MlFactorEstimate> {
    if !(options.tol > 0.0) {
        return Err(param(
            "tol",
            format!("must be positive, got {}", options.tol),
        ));
    }
    if options.max_iter == 0 {
        return Err(param("max_iter", "must be at least 1"));
    }
    let structure = panel.structure();
    if panel.t() <= structure.r() {
        return Err(param(
            "T",
            format!("need more periods than the {} factors", structure.r()),
        ));
    }
    let init = init_with(panel, options.init)?;
    let mut blocks = vec![&init.g0];
    blocks.extend(init.l0.iter());
    let mut f = linalg::hstack(&blocks, panel.t());
    let y = panel.y();

    let mut lambda = DMatrix::zeros(structure.n(), structure.r());
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..options.max_iter {
        lambda = loadings_step(y, structure, &f)?;
        f = factors_step(y, &lambda)?;
        let current = rss(y, &f, &lambda);
        let done = trace
            .last()
            .is_some_and(|&prev: &f64| (prev - current).abs() / prev.max(1e-12) < options.tol);
        trace.push(current);
        if done {
            converged = true;
            break;
        }
    }
    let mut est = MlFactorEstimate::from_stacked(structure, &f, &lambda)?;
    est.iterations = trace.len();
    est.rss_trace = trace;
    est.converged = converged;
    est.warnings = init.warnings;
    finalize_identification(&est)
}

/// Rotates an estimate into the identified normalization without changing
/// its common component.
pub fn finalize_identification(est: &MlFactorEstimate) -> Result<MlFactorEstimate> {
    let mut out = est.clone();
    let structure = &est.structure;

    let (g, a) = orthonormal_factor(&est.g_hat)?;
    out.g_hat = g;
    out.lambda_g_hat = &est.lambda_g_hat * a.transpose();

    let t = est.g_hat.nrows() as f64;
    for s in 0..structure.num_groups() {
        if est.l_hat[s].ncols() == 0 {
            continue;
        }
        // Move the part of L_s explained by G into the global loadings.
        let b = out.g_hat.tr_mul(&est.l_hat[s]) / t;
        let resid = &est.l_hat[s] - &out.g_hat * &b;
        let rows = structure.group_rows(s);
        let shift = &est.lambda_l_hat[s] * b.transpose();
        let mut global_rows = out.lambda_g_hat.rows_mut(rows.start, rows.len());
        global_rows += shift;
        let (l, a) = orthonormal_factor(&resid)?;
        out.l_hat[s] = l;
        out.lambda_l_hat[s] = &est.lambda_l_hat[s] * a.transpose();
    }

    diagonalize_block(&mut out.g_hat, &mut out.lambda_g_hat);
    for s in 0..structure.num_groups() {
        diagonalize_block(&mut out.l_hat[s], &mut out.lambda_l_hat[s]);
    }
    Ok(out)
}

/// Rotates `(F, Λ)` by the eigenvectors of `Λ'Λ` (decreasing) and fixes
/// signs so the largest loading of each factor is positive.
fn diagonalize_block(f: &mut DMatrix<f64>, lambda: &mut DMatrix<f64>) {
    if f.ncols() == 0 {
        return;
    }
    let (_, v) = sym_eigen_desc(&lambda.tr_mul(lambda));
    *f = &*f * &v;
    *lambda = &*lambda * &v;
    fix_column_signs(lambda, Some(f));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::check_identification;
    use crate::panel::{
        simulate_factors, simulate_loadings, simulate_panel, FactorSet, LoadingSet,
    };
    use crate::pc::sign_align;
    use approx::assert_abs_diff_eq;

    fn ml_design(ns: usize, t: usize, seed: u64) -> (GroupStructure, FactorSet, LoadingSet) {
        let s = GroupStructure::new(vec![ns, ns], 1, vec![1, 1]).unwrap();
        let f = simulate_factors(t, 3, 0.5, seed).unwrap();
        let l = simulate_loadings(&s, seed).unwrap();
        (s, f, l)
    }

    fn noisy_panel(ns: usize, t: usize, seed: u64) -> (PanelData, FactorSet) {
        let (s, f, l) = ml_design(ns, t, seed);
        let sigma = DMatrix::identity(s.n(), s.n()) * 0.25;
        (simulate_panel(&f, &l, &sigma, seed + 100).unwrap(), f)
    }

    #[test]
    fn noiseless_exact_recovery() {
        let (s, f, l) = ml_design(25, 50, 1);
        let panel = simulate_panel(&f, &l, &DMatrix::zeros(s.n(), s.n()), 0).unwrap();
        let est = sls_estimate(&panel, &SlsOptions::default()).unwrap();
        let aligned = sign_align(&est.to_factor_estimate(), &f.f).unwrap();
        assert!(linalg::max_abs(&(&aligned.f_hat - &f.f)) < 1e-6);
        assert!(*est.rss_trace.last().unwrap() < 1e-16 * panel.y().norm_squared().max(1.0));
        assert!(est.converged);
    }

    #[test]
    fn cca_recovers_shared_global_factor() {
        let s = GroupStructure::new(vec![10, 12], 1, vec![0, 0]).unwrap();
        let f = simulate_factors(60, 1, 0.5, 3).unwrap();
        let l = simulate_loadings(&s, 3).unwrap();
        let panel = simulate_panel(&f, &l, &DMatrix::zeros(22, 22), 0).unwrap();
        let init = cca_init(&panel).unwrap();
        assert!((init.canonical_correlations[0] - 1.0).abs() < 1e-8);
        let corr = init.g0.column(0).dot(&f.f.column(0)) / 60.0;
        assert!(corr.abs() > 1.0 - 1e-8);
    }

    #[test]
    fn degenerate_cca_falls_back_to_pooled_pc() {
        // Two groups whose own factors are exactly orthogonal: no shared signal.
        let s = GroupStructure::new(vec![6, 6], 1, vec![0, 0]).unwrap();
        let f = simulate_factors(40, 2, 0.0, 8).unwrap().f;
        let mut y = DMatrix::zeros(40, 12);
        for i in 0..6 {
            y.set_column(i, &(f.column(0) * (1.0 + i as f64 * 0.1)));
            y.set_column(6 + i, &(f.column(1) * (1.0 + i as f64 * 0.1)));
        }
        let panel = PanelData::new(y, s).unwrap();
        let init = cca_init(&panel).unwrap();
        assert!(init.canonical_correlations[0] < 1e-8);
        assert_eq!(init.warnings.len(), 1);
    }

    #[test]
    fn update_loadings_recovers_truth() {
        let (s, f, l) = ml_design(10, 30, 2);
        let panel = simulate_panel(&f, &l, &DMatrix::zeros(20, 20), 0).unwrap();
        let truth = MlFactorEstimate::from_stacked(&s, &f.f, &l.lambda).unwrap();
        let (lg, ll) = update_loadings(&panel, &truth.g_hat, &truth.l_hat).unwrap();
        assert_abs_diff_eq!(lg, truth.lambda_g_hat, epsilon = 1e-8);
        for (a, b) in ll.iter().zip(&truth.lambda_l_hat) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn update_loadings_with_orthogonal_factors_is_projection() {
        // G ⟂ L_s: the global coefficient is Y_s'G / (G'G).
        let (panel, f) = noisy_panel(5, 10, 4);
        let g = f.f.columns(0, 1).into_owned();
        let l = vec![
            f.f.columns(1, 1).into_owned(),
            f.f.columns(2, 1).into_owned(),
        ];
        let (lg, _) = update_loadings(&panel, &g, &l).unwrap();
        let expected = panel.y().tr_mul(&g) / g.norm_squared();
        assert_abs_diff_eq!(lg, expected, epsilon = 1e-10);
    }

    #[test]
    fn update_loadings_without_group_factors() {
        let s = GroupStructure::new(vec![4, 5], 1, vec![0, 0]).unwrap();
        let f = simulate_factors(12, 1, 0.5, 5).unwrap().f;
        let y = DMatrix::from_fn(12, 9, |t, i| {
            f[(t, 0)] * (i as f64 + 1.0) + ((t * 7 + i) % 5) as f64 * 0.01
        });
        let panel = PanelData::new(y.clone(), s).unwrap();
        let (lg, ll) =
            update_loadings(&panel, &f, &[DMatrix::zeros(12, 0), DMatrix::zeros(12, 0)]).unwrap();
        assert_abs_diff_eq!(
            lg,
            linalg::least_squares(&f, &y, "").unwrap().transpose(),
            epsilon = 1e-12
        );
        assert!(ll.iter().all(|b| b.ncols() == 0));
    }

    #[test]
    fn collinear_regressors_name_the_group() {
        let (panel, f) = noisy_panel(5, 10, 4);
        let g = f.f.columns(0, 1).into_owned();
        let l = vec![f.f.columns(1, 1).into_owned(), g.clone() * 2.0];
        match update_loadings(&panel, &g, &l) {
            Err(Error::Update { block }) => assert_eq!(block, "group 2"),
            other => panic!("expected update error, got {other:?}"),
        }
    }

    #[test]
    fn update_factors_recovers_truth_and_matches_dense_solve() {
        let (s, f, l) = ml_design(3, 8, 6);
        let panel = simulate_panel(&f, &l, &(DMatrix::identity(6, 6) * 0.1), 1).unwrap();
        let blocks = MlFactorEstimate::from_stacked(&s, &f.f, &l.lambda).unwrap();
        let (g, ls) = update_factors(&panel, &blocks.lambda_g_hat, &blocks.lambda_l_hat).unwrap();
        // Oracle: LU solve of the normal equations per period.
        let gram = l.lambda.tr_mul(&l.lambda);
        for t in 0..8 {
            let rhs = l.lambda.tr_mul(&panel.y().row(t).transpose());
            let sol = gram.clone().lu().solve(&rhs).unwrap();
            assert!((g[(t, 0)] - sol[0]).abs() < 1e-10);
            assert!((ls[0][(t, 0)] - sol[1]).abs() < 1e-10);
            assert!((ls[1][(t, 0)] - sol[2]).abs() < 1e-10);
        }
        let clean = simulate_panel(&f, &l, &DMatrix::zeros(6, 6), 1).unwrap();
        let (g, _) = update_factors(&clean, &blocks.lambda_g_hat, &blocks.lambda_l_hat).unwrap();
        assert_abs_diff_eq!(g, f.f.columns(0, 1).into_owned(), epsilon = 1e-8);
    }

    #[test]
    fn orthonormal_loadings_make_factors_a_projection() {
        let s = GroupStructure::new(vec![3, 3], 1, vec![1, 1]).unwrap();
        let mut lambda = DMatrix::zeros(6, 3);
        for i in 0..6 {
            lambda[(i, 0)] = 1.0 / 6f64.sqrt();
        }
        let group = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        for i in 0..3 {
            lambda[(i, 1)] = group[i];
            lambda[(3 + i, 2)] = group[i];
        }
        let y = DMatrix::from_fn(4, 6, |t, i| ((t + 1) * (i + 2)) as f64 % 7.0);
        let panel = PanelData::new(y.clone(), s.clone()).unwrap();
        let b = MlFactorEstimate::from_stacked(&s, &DMatrix::zeros(4, 3), &lambda).unwrap();
        let (g, l) = update_factors(&panel, &b.lambda_g_hat, &b.lambda_l_hat).unwrap();
        let proj = &y * &lambda;
        assert_abs_diff_eq!(g, proj.columns(0, 1).into_owned(), epsilon = 1e-12);
        assert_abs_diff_eq!(l[1], proj.columns(2, 1).into_owned(), epsilon = 1e-12);
    }

    #[test]
    fn rss_trace_is_monotone_and_identification_holds() {
        let (panel, _) = noisy_panel(25, 50, 7);
        let est = sls_estimate(&panel, &SlsOptions::default()).unwrap();
        let first = est.rss_trace[0];
        for w in est.rss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * first);
        }
        let rep = check_identification(
            &est.g_hat,
            &est.l_hat,
            &est.lambda_g_hat,
            &est.lambda_l_hat,
            1e-6,
        );
        assert!(rep.all_passed(), "{rep:?}");
    }

    #[test]
    fn finalization_is_idempotent_and_scale_invariant() {
        let (panel, _) = noisy_panel(10, 30, 8);
        let est = sls_estimate(&panel, &SlsOptions::default()).unwrap();
        let again = finalize_identification(&est).unwrap();
        assert_abs_diff_eq!(
            again.stacked_factors(),
            est.stacked_factors(),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            again.stacked_loadings(),
            est.stacked_loadings(),
            epsilon = 1e-10
        );

        let mut scaled = est.clone();
        scaled.g_hat *= 3.0;
        scaled.lambda_g_hat /= 3.0;
        let out = finalize_identification(&scaled).unwrap();
        assert_abs_diff_eq!(
            out.stacked_factors(),
            est.stacked_factors(),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            out.stacked_loadings(),
            est.stacked_loadings(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn finalization_of_arbitrary_estimate_passes_all_checks() {
        let (panel, f) = noisy_panel(10, 30, 9);
        let s = panel.structure().clone();
        // Mix the true factors: G leaks into both group factors.
        let mut mixed = f.f.clone();
        let g = f.f.column(0).into_owned();
        mixed.column_mut(1).axpy(0.7, &g, 1.0);
        mixed.column_mut(2).axpy(-0.4, &g, 1.0);
        mixed.column_mut(0).scale_mut(2.5);
        let lambda = loadings_step(panel.y(), &s, &mixed).unwrap();
        let est = MlFactorEstimate::from_stacked(&s, &mixed, &lambda).unwrap();
        let out = finalize_identification(&est).unwrap();
        let rep = check_identification(
            &out.g_hat,
            &out.l_hat,
            &out.lambda_g_hat,
            &out.lambda_l_hat,
            1e-6,
        );
        assert!(rep.all_passed(), "{rep:?}");
        assert_abs_diff_eq!(
            out.common_component(),
            est.common_component(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn initializations_agree() {
        let (panel, _) = noisy_panel(25, 50, 10);
        let opts = SlsOptions {
            tol: 1e-12,
            max_iter: 5000,
            ..SlsOptions::default()
        };
        let a = sls_estimate(&panel, &opts).unwrap();
        let b = sls_estimate(
            &panel,
            &SlsOptions {
                init: Init::PooledPc,
                ..opts
            },
        )
        .unwrap();
        let ca = a.common_component();
        let rel = (&ca - b.common_component()).norm() / ca.norm();
        assert!(rel < 1e-6, "relative gap {rel}");
    }

    #[test]
    fn non_convergence_is_flagged() {
        let (panel, _) = noisy_panel(10, 30, 11);
        let est = sls_estimate(
            &panel,
            &SlsOptions {
                max_iter: 1,
                ..SlsOptions::default()
            },
        )
        .unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 1);
        assert!(sls_estimate(
            &panel,
            &SlsOptions {
                tol: 0.0,
                ..SlsOptions::default()
            }
        )
        .is_err());
    }
}
