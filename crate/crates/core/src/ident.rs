//! Identification of multi-level factor models: how many restrictions pin
//! down the rotation, which rotations keep the block-zero pattern, and a
//! report on whether an estimate satisfies the normalization.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::panel::GroupStructure;

/// Number of free parameters of an admissible rotation, i.e. the number of
/// restrictions needed to identify the factors.
pub fn count_restrictions(structure: &GroupStructure) -> usize {
    let rg = structure.r_global();
    let group_total: usize = structure.r_group().iter().sum();
    rg * rg + structure.r_group().iter().map(|r| r * r).sum::<usize>() + rg * group_total
}

/// Entries of a rotation `H` that may be nonzero while `Λ H` keeps the
/// block-zero loading pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMask {
    /// `true` where the entry may be nonzero.
    pub mask: DMatrix<bool>,
    pub structure: GroupStructure,
}

impl RotationMask {
    pub fn allowed_count(&self) -> usize {
        self.mask.iter().filter(|&&a| a).count()
    }
}

/// A global column of `Λ H` may mix every factor; a group column may only
/// mix factors of the same group.
pub fn rotation_mask(structure: &GroupStructure) -> RotationMask {
    let r = structure.r();
    let owner = factor_owner(structure);
    let mask = DMatrix::from_fn(r, r, |i, j| match owner[j] {
        None => true,
        Some(s) => owner[i] == Some(s),
    });
    RotationMask {
        mask,
        structure: structure.clone(),
    }
}

/// Group owning each stacked factor (`None` for global factors).
fn factor_owner(structure: &GroupStructure) -> Vec<Option<usize>> {
    let mut owner = vec![None; structure.r()];
    for s in 0..structure.num_groups() {
        for k in structure.group_factor_cols(s) {
            owner[k] = Some(s);
        }
    }
    owner
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub tol: f64,
    pub checks: Vec<Check>,
}

impl IdentificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const GLOBAL_ORTHONORMAL: &str = "global_orthonormal";
pub const GROUP_ORTHONORMAL: &str = "group_orthonormal";
pub const GROUP_GLOBAL_ORTHOGONAL: &str = "group_global_orthogonal";
pub const GLOBAL_LOADINGS_DIAGONAL: &str = "global_loadings_diagonal";
pub const GROUP_LOADINGS_DIAGONAL: &str = "group_loadings_diagonal";

/// Evaluates the five normalization conditions. Orthonormality violations
/// are absolute (`max |X'X/T − I|`); diagonality violations are the largest
/// off-diagonal entry relative to the largest diagonal entry.
pub fn check_identification(
    g: &DMatrix<f64>,
    l: &[DMatrix<f64>],
    lambda_g: &DMatrix<f64>,
    lambda_l: &[DMatrix<f64>],
    tol: f64,
) -> IdentificationReport {
    let t = g.nrows().max(1) as f64;
    let global_orth = orthonormality_gap(g, t);
    let group_orth = l
        .iter()
        .map(|ls| orthonormality_gap(ls, t))
        .fold(0.0, f64::max);
    let cross = l
        .iter()
        .map(|ls| max_abs_or_zero(&(ls.tr_mul(g) / t)))
        .fold(0.0, f64::max);
    let global_diag = off_diagonal_ratio(lambda_g);
    let group_diag = lambda_l.iter().map(off_diagonal_ratio).fold(0.0, f64::max);
    let make = |name, v: f64| Check {
        name,
        passed: v <= tol,
        max_violation: v,
    };
    IdentificationReport {
        tol,
        checks: vec![
            make(GLOBAL_ORTHONORMAL, global_orth),
            make(GROUP_ORTHONORMAL, group_orth),
            make(GROUP_GLOBAL_ORTHOGONAL, cross),
            make(GLOBAL_LOADINGS_DIAGONAL, global_diag),
            make(GROUP_LOADINGS_DIAGONAL, group_diag),
        ],
    }
}

fn orthonormality_gap(f: &DMatrix<f64>, t: f64) -> f64 {
    let k = f.ncols();
    max_abs_or_zero(&(f.tr_mul(f) / t - DMatrix::identity(k, k)))
}

fn off_diagonal_ratio(lambda: &DMatrix<f64>) -> f64 {
    let gram = lambda.tr_mul(lambda);
    let k = gram.nrows();
    let scale = (0..k).map(|i| gram[(i, i)].abs()).fold(0.0, f64::max);
    let off = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| gram[(i, j)].abs())
        .fold(0.0, f64::max);
    if off == 0.0 {
        0.0
    } else if scale > 0.0 {
        off / scale
    } else {
        f64::INFINITY
    }
}

fn max_abs_or_zero(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
