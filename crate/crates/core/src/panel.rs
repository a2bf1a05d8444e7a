//! Panels, group structures and the Monte Carlo data-generating process.
//!
//! A multi-level panel stacks `S` groups of series column-wise. Factors are
//! ordered `[G, L_1, ..., L_S]`: the `r_g` global factors load on every
//! series, the `r_s` factors of group `s` load only on the series of group
//! `s`. A plain factor model is the single-group structure with only global
//! factors (see [`GroupStructure::pooled`]).

use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::linalg::{self, orthonormal_factor};
use crate::seed::{self, Stream};

/// Block layout of a (multi-level) factor panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStructure", into = "RawStructure")]
pub struct GroupStructure {
    group_sizes: Vec<usize>,
    r_global: usize,
    r_group: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawStructure {
    group_sizes: Vec<usize>,
    r_g: usize,
    r_s: Vec<usize>,
}

impl TryFrom<RawStructure> for GroupStructure {
    type Error = Error;
    fn try_from(raw: RawStructure) -> Result<Self> {
        GroupStructure::new(raw.group_sizes, raw.r_g, raw.r_s)
    }
}

impl From<GroupStructure> for RawStructure {
    fn from(s: GroupStructure) -> Self {
        RawStructure {
            group_sizes: s.group_sizes,
            r_g: s.r_global,
            r_s: s.r_group,
        }
    }
}

impl GroupStructure {
    pub fn new(group_sizes: Vec<usize>, r_global: usize, r_group: Vec<usize>) -> Result<Self> {
        if group_sizes.is_empty() {
            return Err(param("group_sizes", "at least one group is required"));
        }
        if r_group.len() != group_sizes.len() {
            return Err(param(
                "r_s",
                format!(
                    "{} group factor counts given for {} groups",
                    r_group.len(),
                    group_sizes.len()
                ),
            ));
        }
        if let Some(s) = group_sizes.iter().position(|&n| n == 0) {
            return Err(param("group_sizes", format!("group {} is empty", s + 1)));
        }
        let n: usize = group_sizes.iter().sum();
        let r = r_global + r_group.iter().sum::<usize>();
        if r == 0 {
            return Err(param("r_g", "the model needs at least one factor"));
        }
        if r >= n {
            return Err(param(
                "r_s",
                format!("{r} factors need more than {n} series"),
            ));
        }
        for (s, (&ns, &rs)) in group_sizes.iter().zip(&r_group).enumerate() {
            if r_global + rs >= ns {
                return Err(param(
                    "group_sizes",
                    format!(
                        "group {} has {ns} series for {} factors",
                        s + 1,
                        r_global + rs
                    ),
                ));
            }
        }
        Ok(Self {
            group_sizes,
            r_global,
            r_group,
        })
    }

    /// Single group carrying `r` factors that load on every series.
    pub fn pooled(n: usize, r: usize) -> Result<Self> {
        Self::new(vec![n], r, vec![0])
    }

    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// Total number of series.
    pub fn n(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn r_global(&self) -> usize {
        self.r_global
    }

    pub fn r_group(&self) -> &[usize] {
        &self.r_group
    }

    /// Total number of factors.
    pub fn r(&self) -> usize {
        self.r_global + self.r_group.iter().sum::<usize>()
    }

    /// True for the plain (single-level) factor model.
    pub fn is_pooled(&self) -> bool {
        self.num_groups() == 1 && self.r_group[0] == 0
    }

    /// Series (column) indices of group `s`.
    pub fn group_rows(&self, s: usize) -> Range<usize> {
        let start: usize = self.group_sizes[..s].iter().sum();
        start..start + self.group_sizes[s]
    }

    /// Factor indices of group `s` within the stacked `[G, L_1, ..., L_S]` order.
    pub fn group_factor_cols(&self, s: usize) -> Range<usize> {
        let start = self.r_global + self.r_group[..s].iter().sum::<usize>();
        start..start + self.r_group[s]
    }

    /// Factor indices of the global block.
    pub fn global_cols(&self) -> Range<usize> {
        0..self.r_global
    }

    /// `N × r` mask, `true` where the loading is structurally zero.
    pub fn zero_mask(&self) -> DMatrix<bool> {
        let mut mask = DMatrix::from_element(self.n(), self.r(), false);
        for s in 0..self.num_groups() {
            for other in (0..self.num_groups()).filter(|&o| o != s) {
                for i in self.group_rows(s) {
                    for j in self.group_factor_cols(other) {
                        mask[(i, j)] = true;
                    }
                }
            }
        }
        mask
    }

    /// Human-readable factor names: `F1..Fr` for a pooled model, otherwise
    /// `G`/`G1..` for global and `L1`/`L1_1..` for group factors.
    pub fn factor_labels(&self) -> Vec<String> {
        if self.is_pooled() {
            return (1..=self.r()).map(|k| format!("F{k}")).collect();
        }
        let mut labels = Vec::with_capacity(self.r());
        for k in 1..=self.r_global {
            labels.push(if self.r_global == 1 {
                "G".to_string()
            } else {
                format!("G{k}")
            });
        }
        for (s, &rs) in self.r_group.iter().enumerate() {
            for k in 1..=rs {
                labels.push(if rs == 1 {
                    format!("L{}", s + 1)
                } else {
                    format!("L{}_{k}", s + 1)
                });
            }
        }
        labels
    }
}

/// `T × N` observations together with their group partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    y: DMatrix<f64>,
    structure: GroupStructure,
}

impl PanelData {
    pub fn new(y: DMatrix<f64>, structure: GroupStructure) -> Result<Self> {
        if y.ncols() != structure.n() {
            return Err(Error::Dimension(format!(
                "panel has {} columns but the group structure has {} series",
                y.ncols(),
                structure.n()
            )));
        }
        if y.nrows() == 0 {
            return Err(Error::Dimension("panel has no time periods".into()));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            let (t, i) = (pos % y.nrows(), pos / y.nrows());
            return Err(param(
                "Y",
                format!("non-finite value at t={}, series {}", t + 1, i + 1),
            ));
        }
        Ok(Self { y, structure })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn structure(&self) -> &GroupStructure {
        &self.structure
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    /// Columns belonging to group `s`.
    pub fn group(&self, s: usize) -> DMatrix<f64> {
        let rows = self.structure.group_rows(s);
        self.y.columns(rows.start, rows.len()).into_owned()
    }

    /// Same observations, different block layout (e.g. pooled for PC).
    pub fn with_structure(&self, structure: GroupStructure) -> Result<Self> {
        Self::new(self.y.clone(), structure)
    }

    /// Panel restricted to the periods in `rows`.
    pub fn periods(&self, rows: Range<usize>) -> Result<Self> {
        if rows.end > self.t() || rows.is_empty() {
            return Err(Error::Dimension(format!("invalid period range {rows:?}")));
        }
        Self::new(
            self.y.rows(rows.start, rows.len()).into_owned(),
            self.structure.clone(),
        )
    }
}

/// Which factors a [`FactorSet`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Global,
    Group(usize),
    /// All factors stacked as `[G, L_1, ..., L_S]`.
    Pooled,
}

/// A `T × r` factor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub f: DMatrix<f64>,
    pub kind: FactorKind,
    pub orthonormalized: bool,
}

impl FactorSet {
    /// Sub-block of a stacked factor set.
    pub fn block(&self, structure: &GroupStructure, kind: FactorKind) -> FactorSet {
        let cols = match kind {
            FactorKind::Global => structure.global_cols(),
            FactorKind::Group(s) => structure.group_factor_cols(s),
            FactorKind::Pooled => 0..structure.r(),
        };
        FactorSet {
            f: self.f.columns(cols.start, cols.len()).into_owned(),
            kind,
            orthonormalized: self.orthonormalized,
        }
    }
}

/// `N × r` loading matrix respecting the block-zero pattern of its structure.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingSet {
    pub lambda: DMatrix<f64>,
    pub structure: GroupStructure,
    pub zero_mask: DMatrix<bool>,
}

impl LoadingSet {
    /// Wraps a loading matrix, forcing masked entries to exactly zero.
    pub fn new(mut lambda: DMatrix<f64>, structure: GroupStructure) -> Result<Self> {
        if lambda.shape() != (structure.n(), structure.r()) {
            return Err(Error::Dimension(format!(
                "loadings are {:?}, structure needs {:?}",
                lambda.shape(),
                (structure.n(), structure.r())
            )));
        }
        let zero_mask = structure.zero_mask();
        for (v, &z) in lambda.iter_mut().zip(zero_mask.iter()) {
            if z {
                *v = 0.0;
            }
        }
        Ok(Self {
            lambda,
            structure,
            zero_mask,
        })
    }

    /// True when every masked entry is exactly zero.
    pub fn respects_mask(&self) -> bool {
        self.lambda
            .iter()
            .zip(self.zero_mask.iter())
            .all(|(&v, &z)| !z || v == 0.0)
    }
}

/// Idiosyncratic covariance design: `σ_i² = c·u_i`, Toeplitz decay `τ` and a
/// symmetric permutation of the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdioSpec {
    /// Relative variances `u_i`.
    pub scales: Vec<f64>,
    pub tau: f64,
    /// `permutation[i]` is the source index placed at position `i`.
    pub permutation: Vec<usize>,
    /// Signal-to-noise constant.
    pub c: f64,
}

impl IdioSpec {
    pub fn new(scales: Vec<f64>, tau: f64, permutation: Vec<usize>, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(param("c", format!("must be positive and finite, got {c}")));
        }
        if !(tau > -1.0 && tau < 1.0) {
            return Err(param("tau", format!("must lie in (-1, 1), got {tau}")));
        }
        if let Some(u) = scales.iter().find(|u| !(**u > 0.0 && u.is_finite())) {
            return Err(param(
                "scales",
                format!("variances must be positive, got {u}"),
            ));
        }
        if permutation.len() != scales.len() {
            return Err(param(
                "permutation",
                "length differs from the number of series",
            ));
        }
        let mut seen = vec![false; scales.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(param(
                    "permutation",
                    "not a permutation of the series indices",
                ));
            }
        }
        Ok(Self {
            scales,
            tau,
            permutation,
            c,
        })
    }

    /// Unit scales, identity permutation.
    pub fn homoscedastic(n: usize, c: f64, tau: f64) -> Result<Self> {
        Self::new(vec![1.0; n], tau, (0..n).collect(), c)
    }

    /// Draws `u_i` (all ones, or `U(0.5, 2)` when heteroscedastic) and a
    /// uniform random permutation.
    pub fn draw(n: usize, c: f64, tau: f64, heteroscedastic: bool, seed: u64) -> Result<Self> {
        let scales = if heteroscedastic {
            let mut rng = seed::rng(seed, Stream::IdioScales, 0);
            let dist = Uniform::new(0.5, 2.0).expect("valid bounds");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        } else {
            vec![1.0; n]
        };
        let mut permutation: Vec<usize> = (0..n).collect();
        permutation.shuffle(&mut seed::rng(seed, Stream::IdioPermutation, 0));
        Self::new(scales, tau, permutation, c)
    }

    /// `σ_i² = c·u_i`.
    pub fn variances(&self) -> Vec<f64> {
        self.scales.iter().map(|u| self.c * u).collect()
    }
}

/// Draws `r` independent stationary AR(1) paths with unit variance, before
/// orthonormalization (columns are independent streams).
pub fn simulate_ar1_paths(t: usize, r: usize, phi: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(phi.abs() < 1.0) {
        return Err(param(
            "phi",
            format!("AR(1) parameter must satisfy |phi| < 1, got {phi}"),
        ));
    }
    let innov_sd = (1.0 - phi * phi).sqrt();
    let mut f = DMatrix::zeros(t, r);
    for k in 0..r {
        let mut rng = seed::rng(seed, Stream::Factors, k as u64);
        let mut prev = 0.0;
        for s in 0..t {
            let z: f64 = StandardNormal.sample(&mut rng);
            // stationary start: x_0 ~ N(0, 1)
            prev = if s == 0 { z } else { phi * prev + innov_sd * z };
            f[(s, k)] = prev;
        }
    }
    Ok(f)
}

/// Independent AR(1) factors, orthonormalized so that `F'F/T = I_r`.
pub fn simulate_factors(t: usize, r: usize, phi: f64, seed: u64) -> Result<FactorSet> {
    if t <= r {
        return Err(param(
            "T",
            format!("need more periods than factors ({t} <= {r})"),
        ));
    }
    let raw = simulate_ar1_paths(t, r, phi, seed)?;
    Ok(FactorSet {
        f: orthonormalize(&raw)?,
        kind: FactorKind::Pooled,
        orthonormalized: true,
    })
}

/// Returns `Q` with `Q'Q/T = I_k` spanning the columns of `m`; the first
/// non-negligible entry of every column is positive.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    orthonormal_factor(m).map(|(q, _)| q)
}

/// Raw masked loadings: every free entry i.i.d. `U(0.5, 1)`.
pub fn simulate_raw_loadings(structure: &GroupStructure, seed: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(seed, Stream::Loadings, 0);
    let dist = Uniform::new(0.5, 1.0).expect("valid bounds");
    let mask = structure.zero_mask();
    let mut lambda = DMatrix::zeros(structure.n(), structure.r());
    for j in 0..structure.r() {
        for i in 0..structure.n() {
            if !mask[(i, j)] {
                lambda[(i, j)] = dist.sample(&mut rng);
            }
        }
    }
    lambda
}

/// Simulated loadings: raw `U(0.5, 1)` draws made orthogonal block by block.
///
/// The global block is rotated so its Gram matrix is diagonal (decreasing).
/// Within each group the group-specific columns are first purged of the
/// group's global loadings and then rotated the same way. The zero pattern
/// survives and the full Gram matrix `Λ'Λ` ends up diagonal.
pub fn simulate_loadings(structure: &GroupStructure, seed: u64) -> Result<LoadingSet> {
    let raw = simulate_raw_loadings(structure, seed);
    orthogonalize_loadings(&raw, structure)
}

/// Block-respecting orthogonalization used by [`simulate_loadings`].
pub fn orthogonalize_loadings(
    raw: &DMatrix<f64>,
    structure: &GroupStructure,
) -> Result<LoadingSet> {
    let mut lambda = raw.clone();
    let rg = structure.r_global();
    if rg > 0 {
        let global = lambda.columns(0, rg).into_owned();
        lambda
            .columns_mut(0, rg)
            .copy_from(&diagonalize_gram(&global));
    }
    for s in 0..structure.num_groups() {
        let cols = structure.group_factor_cols(s);
        if cols.is_empty() {
            continue;
        }
        let rows = structure.group_rows(s);
        let mut block = lambda
            .view((rows.start, cols.start), (rows.len(), cols.len()))
            .into_owned();
        if rg > 0 {
            let global = lambda.view((rows.start, 0), (rows.len(), rg)).into_owned();
            let coef = linalg::least_squares(&global, &block, "global loadings")?;
            block -= &global * coef;
        }
        let rotated = diagonalize_gram(&block);
        lambda
            .view_mut((rows.start, cols.start), (rows.len(), cols.len()))
            .copy_from(&rotated);
    }
    LoadingSet::new(lambda, structure.clone())
}

/// Rotates `m` by the eigenvectors of `m'm` (decreasing), then makes the
/// largest-magnitude entry of every column positive.
fn diagonalize_gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (_, v) = linalg::sym_eigen_desc(&m.tr_mul(m));
    let mut out = m * v;
    fix_column_signs(&mut out, None);
    out
}

/// Flips columns of `m` (and the matching columns of `partner`) so that the
/// entry of largest magnitude in each column of `m` is positive.
pub(crate) fn fix_column_signs(m: &mut DMatrix<f64>, mut partner: Option<&mut DMatrix<f64>>) {
    for j in 0..m.ncols() {
        let col = m.column(j);
        let idx = col.iamax();
        if !col.is_empty() && col[idx] < 0.0 {
            m.column_mut(j).neg_mut();
            if let Some(p) = partner.as_deref_mut() {
                p.column_mut(j).neg_mut();
            }
        }
    }
}

/// `P Σ P'` with `(PΣP')_{ij} = Σ_{π(i), π(j)}`.
pub fn permute_symmetric(m: &DMatrix<f64>, permutation: &[usize]) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| m[(permutation[i], permutation[j])])
}

/// Inverse of [`permute_symmetric`].
pub fn unpermute_symmetric(m: &DMatrix<f64>, permutation: &[usize]) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(permutation[i], permutation[j])] = m[(i, j)];
        }
    }
    out
}

/// `Σ_ε` with `σ_ij = σ_i σ_j τ^{|i−j|}`, symmetrically permuted.
pub fn build_idio_cov(n: usize, spec: &IdioSpec) -> Result<DMatrix<f64>> {
    if spec.scales.len() != n {
        return Err(Error::Dimension(format!(
            "idiosyncratic spec has {} series, expected {n}",
            spec.scales.len()
        )));
    }
    let sd: Vec<f64> = spec.variances().iter().map(|v| v.sqrt()).collect();
    let base = DMatrix::from_fn(n, n, |i, j| {
        let lag = i.abs_diff(j) as i32;
        sd[i] * sd[j] * spec.tau.powi(lag)
    });
    let sigma = permute_symmetric(&base, &spec.permutation);
    if sigma.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: linalg::min_eigenvalue(&sigma),
        });
    }
    Ok(sigma)
}

/// Draws `ε_t ~ N(0, Σ_ε)` row by row; a zero covariance yields zero noise.
#[derive(Debug, Clone)]
pub struct IdioSampler {
    n: usize,
    kind: SamplerKind,
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Zero,
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

impl IdioSampler {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let n = sigma.nrows();
        if sigma.ncols() != n {
            return Err(Error::Dimension(
                "idiosyncratic covariance must be square".into(),
            ));
        }
        if sigma.iter().all(|&v| v == 0.0) {
            return Ok(Self {
                n,
                kind: SamplerKind::Zero,
            });
        }
        let off_diagonal_zero = (0..n).all(|i| (0..n).all(|j| i == j || sigma[(i, j)] == 0.0));
        if off_diagonal_zero && sigma.diagonal().iter().all(|&v| v > 0.0) {
            let sd = sigma.diagonal().iter().map(|v| v.sqrt()).collect();
            return Ok(Self {
                n,
                kind: SamplerKind::Diagonal(sd),
            });
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite {
                min_eigenvalue: linalg::min_eigenvalue(sigma),
            })?;
        Ok(Self {
            n,
            kind: SamplerKind::Full(chol.l()),
        })
    }

    /// `T × N` matrix of draws (rows are periods).
    pub fn draw<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> DMatrix<f64> {
        let n = self.n;
        match &self.kind {
            SamplerKind::Zero => DMatrix::zeros(t, n),
            SamplerKind::Diagonal(sd) => {
                let mut out = DMatrix::zeros(t, n);
                for s in 0..t {
                    for i in 0..n {
                        let z: f64 = StandardNormal.sample(rng);
                        out[(s, i)] = sd[i] * z;
                    }
                }
                out
            }
            SamplerKind::Full(l) => {
                let mut z = DMatrix::<f64>::zeros(t, n);
                for s in 0..t {
                    for i in 0..n {
                        z[(s, i)] = StandardNormal.sample(rng);
                    }
                }
                z * l.transpose()
            }
        }
    }
}

/// `Y_t = Λ F_t + ε_t` with Gaussian `ε_t ~ N(0, Σ_ε)` i.i.d. over `t`.
pub fn simulate_panel(
    factors: &FactorSet,
    loadings: &LoadingSet,
    sigma_eps: &DMatrix<f64>,
    seed: u64,
) -> Result<PanelData> {
    let sampler = IdioSampler::new(sigma_eps)?;
    simulate_panel_with(factors, loadings, &sampler, seed)
}

/// [`simulate_panel`] with a pre-factored covariance.
pub fn simulate_panel_with(
    factors: &FactorSet,
    loadings: &LoadingSet,
    sampler: &IdioSampler,
    seed: u64,
) -> Result<PanelData> {
    let n = loadings.structure.n();
    if factors.f.ncols() != loadings.lambda.ncols() {
        return Err(Error::Dimension(format!(
            "{} factors but {} loading columns",
            factors.f.ncols(),
            loadings.lambda.ncols()
        )));
    }
    if sampler.n != n {
        return Err(Error::Dimension(format!(
            "idiosyncratic covariance is {0}×{0}, panel has {n} series",
            sampler.n
        )));
    }
    let t = factors.f.nrows();
    let mut y = &factors.f * loadings.lambda.transpose();
    y += sampler.draw(t, &mut seed::rng(seed, Stream::Noise, 0));
    PanelData::new(y, loadings.structure.clone())
}

/// Factor strength `Λ' Σ_ε⁻¹ Λ`.
pub fn factor_strength(lambda: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma_eps.nrows() != lambda.nrows() || sigma_eps.ncols() != lambda.nrows() {
        return Err(Error::Dimension("Σ_ε must be N×N for N×r loadings".into()));
    }
    let solved = linalg::solve_gram(sigma_eps, lambda, "idiosyncratic covariance")?;
    Ok(linalg::symmetrize(&lambda.tr_mul(&solved)))
}

/// Parameters of one simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub structure: GroupStructure,
    pub t: usize,
    pub phi: f64,
    /// Noise scale; `0` produces a noiseless panel.
    pub c: f64,
    pub tau: f64,
    pub heteroscedastic: bool,
    pub seed: u64,
}

/// Factors, loadings and idiosyncratic covariance drawn once per design and
/// held fixed across replications.
#[derive(Debug, Clone)]
pub struct Design {
    pub spec: DesignSpec,
    pub factors: FactorSet,
    pub loadings: LoadingSet,
    /// `None` for a noiseless design.
    pub idio: Option<IdioSpec>,
    pub sigma_eps: DMatrix<f64>,
    sampler: IdioSampler,
}

impl Design {
    pub fn generate(spec: DesignSpec) -> Result<Self> {
        let n = spec.structure.n();
        let factors = simulate_factors(spec.t, spec.structure.r(), spec.phi, spec.seed)?;
        let loadings = simulate_loadings(&spec.structure, spec.seed)?;
        if !(spec.tau > -1.0 && spec.tau < 1.0) {
            return Err(param(
                "tau",
                format!("must lie in (-1, 1), got {}", spec.tau),
            ));
        }
        let (idio, sigma_eps) = if spec.c == 0.0 {
            (None, DMatrix::zeros(n, n))
        } else {
            let idio = IdioSpec::draw(n, spec.c, spec.tau, spec.heteroscedastic, spec.seed)?;
            let sigma = build_idio_cov(n, &idio)?;
            (Some(idio), sigma)
        };
        let sampler = IdioSampler::new(&sigma_eps)?;
        Ok(Self {
            spec,
            factors,
            loadings,
            idio,
            sigma_eps,
            sampler,
        })
    }

    /// One panel draw; `noise_seed` selects the idiosyncratic realization.
    pub fn simulate(&self, noise_seed: u64) -> Result<PanelData> {
        simulate_panel_with(&self.factors, &self.loadings, &self.sampler, noise_seed)
    }
}
