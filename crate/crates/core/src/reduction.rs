//! Generic reduction machinery: POD via the method of snapshots, EI-Greedy
//! empirical operator interpolation with locality-aware source restriction,
//! and Galerkin projection helpers.

use crate::linalg::{self, DenseMatrix, SparseMatrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("empty snapshot set")]
    EmptySnapshots,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, ReductionError>;

// ---------------------------------------------------------------------------
// POD
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum PodMode {
    /// Keep (at most) this many modes.
    FixedK(usize),
    /// Keep the smallest k with sigma_{k+1}/sigma_1 <= eps.
    RelSvTol(f64),
}

/// Orthonormal basis with singular values, produced by [`pod`].
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    /// n_full x k, columns orthonormal under the product used at build time.
    pub modes: DenseMatrix,
    /// Descending singular values of the snapshot matrix (all of them, not
    /// just the retained ones).
    pub singular_values: Vec<f64>,
}

impl ReducedBasis {
    pub fn dim(&self) -> usize {
        self.modes.rows
    }

    pub fn k(&self) -> usize {
        self.modes.cols
    }

    /// Truncated copy with the first k modes (POD bases are nested).
    pub fn truncate(&self, k: usize) -> ReducedBasis {
        let k = k.min(self.k());
        let cols: Vec<Vec<f64>> = (0..k).map(|j| self.modes.col(j).to_vec()).collect();
        ReducedBasis {
            modes: DenseMatrix::from_columns(self.dim(), &cols),
            singular_values: self.singular_values.clone(),
        }
    }

    /// Euclidean-orthogonal projection coefficients of a vector.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.modes.tr_matvec(v)
    }

    /// Lift reduced coefficients back to the full space.
    pub fn lift(&self, coeffs: &[f64]) -> Vec<f64> {
        self.modes.matvec(coeffs)
    }
}

fn product_dot(a: &[f64], b: &[f64], product: Option<&SparseMatrix>) -> f64 {
    match product {
        None => linalg::dot(a, b),
        Some(p) => linalg::dot(a, &p.matvec(b)),
    }
}

/// POD by the method of snapshots: eigendecomposition of the Gramian
/// G_ij = <s_i, s_j>_P, modes assembled as scaled snapshot combinations.
pub fn pod(
    snapshots: &[Vec<f64>],
    product: Option<&SparseMatrix>,
    mode: PodMode,
) -> Result<ReducedBasis> {
    if snapshots.is_empty() {
        return Err(ReductionError::EmptySnapshots);
    }
    let n = snapshots[0].len();
    let m = snapshots.len();
    for s in snapshots {
        if s.len() != n {
            return Err(ReductionError::DimensionMismatch(format!(
                "snapshot length {} != {}",
                s.len(),
                n
            )));
        }
    }
    // Gramian in the product geometry
    let p_snaps: Vec<Vec<f64>> = match product {
        None => snapshots.to_vec(),
        Some(p) => snapshots.iter().map(|s| p.matvec(s)).collect(),
    };
    let mut g = DenseMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = linalg::dot(&snapshots[i], &p_snaps[j]);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    let (eigs, vecs) = linalg::sym_eig(&g)?;
    let lambda1 = eigs.first().copied().unwrap_or(0.0).max(0.0);
    let singular_values: Vec<f64> = eigs.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // numerical rank cutoff
    let rank = eigs
        .iter()
        .take_while(|&&l| l > 1e-28 * lambda1.max(1e-300) && l > 0.0)
        .count();
    let k = match mode {
        PodMode::FixedK(k) => k.min(rank),
        PodMode::RelSvTol(eps) => {
            let sigma1 = singular_values[0].max(1e-300);
            let mut k = rank;
            for i in 0..rank {
                if i + 1 <= singular_values.len()
                    && singular_values.get(i + 1).copied().unwrap_or(0.0) / sigma1 <= eps
                {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    };
    let mut cols = Vec::with_capacity(k);
    for i in 0..k {
        let inv_sigma = 1.0 / singular_values[i];
        let mut col = vec![0.0; n];
        for (j, s) in snapshots.iter().enumerate() {
            let w = vecs.get(j, i) * inv_sigma;
            if w != 0.0 {
                linalg::axpy(w, s, &mut col);
            }
        }
        cols.push(col);
    }
    // one re-orthogonalization pass for numerical hygiene
    for i in 0..k {
        for j in 0..i {
            let (head, tail) = cols.split_at_mut(i);
            let d = product_dot(&head[j], &tail[0], product);
            let cj = head[j].clone();
            linalg::axpy(-d, &cj, &mut cols[i]);
        }
        let nrm = product_dot(&cols[i], &cols[i], product).sqrt();
        if nrm > 0.0 {
            for v in cols[i].iter_mut() {
                *v /= nrm;
            }
        }
    }
    Ok(ReducedBasis {
        modes: DenseMatrix::from_columns(n, &cols),
        singular_values,
    })
}

// ---------------------------------------------------------------------------
// Empirical interpolation
// ---------------------------------------------------------------------------

/// Empirical interpolation data produced by [`ei_greedy`]. The collateral
/// basis is normalized so that the interpolation matrix (collateral
/// restricted to the interpolation DOFs) is unit lower triangular, which
/// makes the online interpolation a forward substitution.
#[derive(Debug, Clone)]
pub struct EIData {
    pub dim: usize,
    /// Interpolation DOFs in greedy selection order.
    pub interp_dofs: Vec<usize>,
    /// dim x M collateral basis.
    pub collateral: DenseMatrix,
    /// M x M unit lower triangular interpolation matrix.
    pub interp_matrix: DenseMatrix,
    /// Per-interpolation-DOF source dependency lists (same order as
    /// interp_dofs), used to build nested source restrictions.
    pub deps_per_point: Vec<Vec<usize>>,
    /// Sorted union of all dependency lists.
    pub source_dofs: Vec<usize>,
    /// Max interpolation error over the training set before each extension.
    pub greedy_errors: Vec<f64>,
    /// True if the greedy stopped early because the training data was
    /// exhausted (next error vector numerically zero).
    pub degenerate: bool,
}

impl EIData {
    pub fn m(&self) -> usize {
        self.interp_dofs.len()
    }

    /// Nested truncation to the first m interpolation points.
    pub fn truncate(&self, m: usize) -> EIData {
        let m = m.min(self.m());
        let cols: Vec<Vec<f64>> = (0..m).map(|j| self.collateral.col(j).to_vec()).collect();
        let mut im = DenseMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                im.set(i, j, self.interp_matrix.get(i, j));
            }
        }
        let deps: Vec<Vec<usize>> = self.deps_per_point[..m].to_vec();
        let mut src: Vec<usize> = deps.iter().flatten().copied().collect();
        src.sort_unstable();
        src.dedup();
        EIData {
            dim: self.dim,
            interp_dofs: self.interp_dofs[..m].to_vec(),
            collateral: DenseMatrix::from_columns(self.dim, &cols),
            interp_matrix: im,
            deps_per_point: deps,
            source_dofs: src,
            greedy_errors: self.greedy_errors.clone(),
            degenerate: self.degenerate,
        }
    }

    /// Interpolation coefficients from values at the interpolation DOFs
    /// (forward substitution with the unit lower triangular matrix).
    pub fn coefficients(&self, values_at_interp_dofs: &[f64]) -> Vec<f64> {
        let m = self.m();
        let mut theta = vec![0.0; m];
        for i in 0..m {
            let mut s = values_at_interp_dofs[i];
            for j in 0..i {
                s -= self.interp_matrix.get(i, j) * theta[j];
            }
            theta[i] = s; // unit diagonal
        }
        theta
    }

    /// Full interpolant from values at the interpolation DOFs.
    pub fn interpolate(&self, values_at_interp_dofs: &[f64]) -> Vec<f64> {
        self.collateral.matvec(&self.coefficients(values_at_interp_dofs))
    }

    /// Restrict a full vector to the interpolation DOFs.
    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.interp_dofs.iter().map(|&i| v[i]).collect()
    }
}

/// EI-Greedy over a set of operator evaluations. `dependency_fn` maps an
/// output DOF to the source DOFs its evaluation reads.
pub fn ei_greedy(
    evaluations: &[Vec<f64>],
    m_max: usize,
    abs_tol: f64,
    dependency_fn: &dyn Fn(usize) -> Vec<usize>,
) -> Result<EIData> {
    if evaluations.is_empty() {
        return Err(ReductionError::EmptySnapshots);
    }
    let dim = evaluations[0].len();
    for e in evaluations {
        if e.len() != dim {
            return Err(ReductionError::DimensionMismatch(format!(
                "evaluation length {} != {}",
                e.len(),
                dim
            )));
        }
    }
    let mut residuals = evaluations.to_vec();
    let mut interp_dofs: Vec<usize> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut greedy_errors = Vec::new();
    let mut degenerate = false;
    // absolute floor below which a residual is considered exhausted
    let scale0 = residuals
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-14 * scale0).max(f64::MIN_POSITIVE);
    while interp_dofs.len() < m_max.min(dim) {
        // argmax over (evaluation, dof); lowest index wins ties
        let (mut best_j, mut best_i, mut best) = (0usize, 0usize, 0.0f64);
        for (j, r) in residuals.iter().enumerate() {
            for (i, &v) in r.iter().enumerate() {
                if v.abs() > best {
                    best = v.abs();
                    best_j = j;
                    best_i = i;
                }
            }
        }
        greedy_errors.push(best);
        if best <= floor {
            // training data exhausted before reaching M_max / abs_tol
            degenerate = best > abs_tol || abs_tol <= 0.0;
            break;
        }
        if best <= abs_tol {
            break;
        }
        let pivot = residuals[best_j][best_i];
        let q: Vec<f64> = residuals[best_j].iter().map(|v| v / pivot).collect();
        for r in residuals.iter_mut() {
            let w = r[best_i];
            if w != 0.0 {
                linalg::axpy(-w, &q, r);
                r[best_i] = 0.0; // exact by construction
            }
        }
        interp_dofs.push(best_i);
        cols.push(q);
    }
    let m = interp_dofs.len();
    let mut interp_matrix = DenseMatrix::zeros(m, m);
    for (j, q) in cols.iter().enumerate() {
        for (i, &dof) in interp_dofs.iter().enumerate() {
            interp_matrix.set(i, j, q[dof]);
        }
    }
    let deps_per_point: Vec<Vec<usize>> = interp_dofs
        .iter()
        .map(|&dof| dependency_fn(dof))
        .collect();
    let mut source_dofs: Vec<usize> = deps_per_point.iter().flatten().copied().collect();
    source_dofs.sort_unstable();
    source_dofs.dedup();
    Ok(EIData {
        dim,
        interp_dofs,
        collateral: DenseMatrix::from_columns(dim, &cols),
        interp_matrix,
        deps_per_point,
        source_dofs,
        greedy_errors,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Galerkin projection helpers
// ---------------------------------------------------------------------------

/// test_basis^T . op . trial_basis.
pub fn project_linear(
    test_basis: &DenseMatrix,
    op: &SparseMatrix,
    trial_basis: &DenseMatrix,
) -> Result<DenseMatrix> {
    if op.cols != trial_basis.rows || op.rows != test_basis.rows {
        return Err(ReductionError::DimensionMismatch(format!(
            "op {}x{} vs bases {}x{}, {}x{}",
            op.rows, op.cols, test_basis.rows, test_basis.cols, trial_basis.rows, trial_basis.cols
        )));
    }
    let cols: Vec<Vec<f64>> = (0..trial_basis.cols)
        .map(|j| test_basis.tr_matvec(&op.matvec(trial_basis.col(j))))
        .collect();
    Ok(DenseMatrix::from_columns(test_basis.cols, &cols))
}

/// test_basis^T . v.
pub fn project_vector(test_basis: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != test_basis.rows {
        return Err(ReductionError::DimensionMismatch(format!(
            "vector length {} vs basis rows {}",
            v.len(),
            test_basis.rows
        )));
    }
    Ok(test_basis.tr_matvec(v))
}
