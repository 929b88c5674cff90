//! Parametric heat conduction on the voxel geometry, reduced either by a
//! single global reduced basis or by localized per-subdomain bases (LRBMS),
//! both trained with POD-Greedy.
//!
//! The electrolyte conductivity is the parameter mu; the operator is kept
//! in exact affine form B_mu = B_fixed + mu * B_el. To preserve affinity,
//! mixed electrolyte/solid faces use arithmetic conductivity averaging
//! (d_solid/2 + mu/2) while solid/solid faces use harmonic means.

use crate::grid::{BoundaryTag, Material, MaterialGrid, Partition};
use crate::linalg::{self, DenseMatrix, SolveOpts, SparseMatrix, TripletBuilder};
use crate::reduction::{self, pod, PodMode, ReducedBasis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeatError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("POD-Greedy stagnated at iteration {iteration} (error {error:.3e})")]
    Stagnation { iteration: usize, error: f64 },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Reduction(#[from] reduction::ReductionError),
}

pub type Result<T> = std::result::Result<T, HeatError>;

/// Solid conductivities [W/(cm K)]. These are configuration placeholders,
/// not literature values; the electrolyte conductivity is the parameter.
#[derive(Debug, Clone, Copy)]
pub struct HeatConductivities {
    pub neg_cc: f64,
    pub pos_cc: f64,
    pub electrode: f64,
}

impl Default for HeatConductivities {
    fn default() -> Self {
        HeatConductivities {
            neg_cc: 3.8,
            pos_cc: 2.4,
            electrode: 0.05,
        }
    }
}

impl HeatConductivities {
    /// Solid conductivity by material; None for the electrolyte (parameter).
    fn solid(&self, m: Material) -> Option<f64> {
        match m {
            Material::Electrolyte => None,
            Material::NegCollector => Some(self.neg_cc),
            Material::PosCollector => Some(self.pos_cc),
            Material::NegElectrode | Material::PosElectrode => Some(self.electrode),
        }
    }
}

/// Volumetric heat source [W/cm^3] in the electrodes.
pub const ELECTRODE_SOURCE: f64 = 1e3;

/// Heat FOM with exact affine parameter split.
pub struct HeatModel {
    pub n: usize,
    /// Diagonal L2 mass matrix (cell volumes).
    pub mass_diag: Vec<f64>,
    pub b_fixed: SparseMatrix,
    pub b_el: SparseMatrix,
    /// Volume-scaled source vector.
    pub q: Vec<f64>,
    /// H1 product M_h + S (unit-conductivity jump matrix, including
    /// Dirichlet boundary terms).
    pub h1: SparseMatrix,
    pub dt: f64,
    pub n_steps: usize,
}

/// Assembles the heat model: two-point flux with harmonic solid/solid and
/// arithmetic electrolyte/solid transmissibilities, homogeneous Dirichlet
/// (ghost value 0) at the collector boundary faces, Neumann elsewhere.
pub fn assemble_heat(
    g: &MaterialGrid,
    conds: &HeatConductivities,
    dt: f64,
    n_steps: usize,
) -> Result<HeatModel> {
    let n = g.cell_count();
    let vol = g.cell_volume();
    let mut fixed = TripletBuilder::new(n, n);
    let mut el = TripletBuilder::new(n, n);
    let mut s = TripletBuilder::new(n, n);
    for (a, b, axis) in g.internal_faces() {
        let t_geom = g.face_area(axis) / g.face_distance(axis);
        match (conds.solid(g.material[a]), conds.solid(g.material[b])) {
            (Some(da), Some(db)) => {
                let t = 2.0 * da * db / (da + db) * t_geom;
                add_face(&mut fixed, a, b, t);
            }
            (Some(d), None) | (None, Some(d)) => {
                add_face(&mut fixed, a, b, 0.5 * d * t_geom);
                add_face(&mut el, a, b, 0.5 * t_geom);
            }
            (None, None) => {
                add_face(&mut el, a, b, t_geom);
            }
        }
        add_face(&mut s, a, b, t_geom);
    }
    // homogeneous Dirichlet at the collector terminals, ghost at h/2
    let ifaces = crate::grid::extract_interfaces(g);
    for f in ifaces
        .boundary_with(BoundaryTag::NegCollectorBoundary)
        .chain(ifaces.boundary_with(BoundaryTag::PosCollectorBoundary))
    {
        let d = conds
            .solid(g.material[f.cell])
            .expect("collector boundary cell is solid");
        let t = d * f.area / (0.5 * g.face_distance(f.axis));
        fixed.add(f.cell, f.cell, t);
        s.add(f.cell, f.cell, f.area / (0.5 * g.face_distance(f.axis)));
    }
    let mut q = vec![0.0; n];
    let mut mass_diag = vec![0.0; n];
    for i in 0..n {
        mass_diag[i] = vol;
        if g.material[i].is_electrode() {
            q[i] = ELECTRODE_SOURCE * vol;
        }
    }
    // H1 product = M_h + S
    let mut h1b = TripletBuilder::new(n, n);
    for i in 0..n {
        h1b.add(i, i, mass_diag[i]);
    }
    let s = s.build();
    for i in 0..n {
        let (cols, vals) = s.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            h1b.add(i, j, v);
        }
    }
    Ok(HeatModel {
        n,
        mass_diag,
        b_fixed: fixed.build(),
        b_el: el.build(),
        q,
        h1: h1b.build(),
        dt,
        n_steps,
    })
}

fn add_face(tb: &mut TripletBuilder, a: usize, b: usize, t: f64) {
    tb.add(a, a, t);
    tb.add(a, b, -t);
    tb.add(b, b, t);
    tb.add(b, a, -t);
}

impl HeatModel {
    /// B_mu = B_fixed + mu B_el.
    pub fn b_mu(&self, mu: f64) -> SparseMatrix {
        combine(&[(1.0, &self.b_fixed), (mu, &self.b_el)], self.n)
    }

    /// Backward Euler system matrix M/dt + B_mu.
    pub fn system_matrix(&self, mu: f64) -> SparseMatrix {
        let mut tb = TripletBuilder::new(self.n, self.n);
        for i in 0..self.n {
            tb.add(i, i, self.mass_diag[i] / self.dt);
        }
        for m in [&self.b_fixed] {
            add_scaled(&mut tb, 1.0, m);
        }
        add_scaled(&mut tb, mu, &self.b_el);
        tb.build()
    }

    /// H1 inner product a^T (M + S) b.
    pub fn h1_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        linalg::dot(a, &self.h1.matvec(b))
    }

    pub fn h1_norm(&self, v: &[f64]) -> f64 {
        self.h1_inner(v, v).max(0.0).sqrt()
    }
}

fn combine(terms: &[(f64, &SparseMatrix)], n: usize) -> SparseMatrix {
    let mut tb = TripletBuilder::new(n, n);
    for &(w, m) in terms {
        add_scaled(&mut tb, w, m);
    }
    tb.build()
}

fn add_scaled(tb: &mut TripletBuilder, w: f64, m: &SparseMatrix) {
    for i in 0..m.rows {
        let (cols, vals) = m.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            tb.add(i, j, w * v);
        }
    }
}

/// Backward Euler heat solve from T = 0 (BiCGStab with Jacobi
/// preconditioning, relative tolerance 1e-12). Returns n_steps + 1 states.
pub fn heat_solve(h: &HeatModel, mu: f64) -> Result<Vec<Vec<f64>>> {
    let a = h.system_matrix(mu);
    let opts = SolveOpts::Iterative {
        tol: 1e-12,
        maxit: 20_000,
    };
    let mut traj = Vec::with_capacity(h.n_steps + 1);
    let mut t = vec![0.0; h.n];
    traj.push(t.clone());
    for _ in 0..h.n_steps {
        let rhs: Vec<f64> = h
            .q
            .iter()
            .zip(&h.mass_diag)
            .zip(&t)
            .map(|((q, m), ti)| q + m * ti / h.dt)
            .collect();
        t = linalg::solve_sparse(&a, &rhs, opts)?;
        traj.push(t.clone());
    }
    Ok(traj)
}

/// max over time steps of the H1 norm of the difference.
pub fn linf_h1_error(h: &HeatModel, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HeatError::DimensionMismatch(format!(
            "trajectory lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
        worst = worst.max(h.h1_norm(&d));
    }
    Ok(worst)
}

/// max over time steps of the H1 norm.
pub fn linf_h1_norm(h: &HeatModel, a: &[Vec<f64>]) -> f64 {
    a.iter().map(|x| h.h1_norm(x)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

/// Restriction of each trajectory state to the subdomain cell sets.
/// Result: one snapshot list per subdomain.
pub fn localize(traj: &[Vec<f64>], p: &Partition) -> Vec<Vec<Vec<f64>>> {
    p.subdomain_cells
        .iter()
        .map(|cells| {
            traj.iter()
                .map(|state| cells.iter().map(|&c| state[c]).collect())
                .collect()
        })
        .collect()
}

/// Per-subdomain orthonormal bases; the global reduced space is their
/// direct sum.
pub struct LocalBasisSet {
    /// One basis per subdomain (may have zero columns).
    pub bases: Vec<ReducedBasis>,
}

impl LocalBasisSet {
    pub fn total_k(&self) -> usize {
        self.bases.iter().map(|b| b.k()).sum()
    }

    /// Lift per-subdomain coefficient slices to a global vector.
    pub fn lift(&self, coeffs: &[f64], p: &Partition) -> Vec<f64> {
        let n: usize = p.cell_to_subdomain.len();
        let mut out = vec![0.0; n];
        let mut off = 0;
        for (s, basis) in self.bases.iter().enumerate() {
            let k = basis.k();
            let local = basis.lift(&coeffs[off..off + k]);
            for (&cell, v) in p.subdomain_cells[s].iter().zip(local) {
                out[cell] = v;
            }
            off += k;
        }
        out
    }

    /// The global block-diagonal basis as a dense n x k_total matrix.
    pub fn global_modes(&self, p: &Partition) -> DenseMatrix {
        let n = p.cell_to_subdomain.len();
        let mut cols = Vec::with_capacity(self.total_k());
        for (s, basis) in self.bases.iter().enumerate() {
            for j in 0..basis.k() {
                let mut col = vec![0.0; n];
                for (&cell, &v) in p.subdomain_cells[s].iter().zip(basis.modes.col(j)) {
                    col[cell] = v;
                }
                cols.push(col);
            }
        }
        DenseMatrix::from_columns(n, &cols)
    }
}

// ---------------------------------------------------------------------------
// Block ROM
// ---------------------------------------------------------------------------

/// Block-sparse Galerkin projection of the heat model onto a localized
/// basis. Off-diagonal blocks exist only for adjacent subdomains.
pub struct BlockReducedModel {
    pub n_sub: usize,
    pub k_per_sub: Vec<usize>,
    pub offsets: Vec<usize>,
    /// (i, j, block) triples for each operator; includes diagonal blocks.
    pub m_blocks: Vec<(usize, usize, DenseMatrix)>,
    pub b_fixed_blocks: Vec<(usize, usize, DenseMatrix)>,
    pub b_el_blocks: Vec<(usize, usize, DenseMatrix)>,
    pub q_red: Vec<f64>,
    pub dt: f64,
    pub n_steps: usize,
}

fn restrict_block(
    op: &SparseMatrix,
    rows: &[usize],
    cols: &[usize],
    row_of: &[Option<usize>],
) -> DenseMatrix {
    // row_of maps global cell -> local col index within `cols`
    let mut out = DenseMatrix::zeros(rows.len(), cols.len());
    for (li, &gi) in rows.iter().enumerate() {
        let (cs, vs) = op.row(gi);
        for (&gj, &v) in cs.iter().zip(vs) {
            if let Some(lj) = row_of[gj] {
                out.set(li, lj, v);
            }
        }
    }
    out
}

/// Projects the heat operators onto the localized basis, keeping only
/// blocks for equal or adjacent subdomains.
pub fn build_block_rom(
    h: &HeatModel,
    bases: &LocalBasisSet,
    p: &Partition,
) -> Result<BlockReducedModel> {
    if bases.bases.len() != p.n_subdomains {
        return Err(HeatError::DimensionMismatch(format!(
            "{} bases vs {} subdomains",
            bases.bases.len(),
            p.n_subdomains
        )));
    }
    let n_sub = p.n_subdomains;
    let k_per_sub: Vec<usize> = bases.bases.iter().map(|b| b.k()).collect();
    let mut offsets = vec![0usize];
    for k in &k_per_sub {
        offsets.push(offsets.last().unwrap() + k);
    }
    // adjacency from coupling faces, plus self
    let mut pairs: Vec<(usize, usize)> = (0..n_sub).map(|i| (i, i)).collect();
    for ((i, j), _) in &p.coupling_faces {
        pairs.push((*i, *j));
        pairs.push((*j, *i));
    }
    pairs.sort_unstable();
    pairs.dedup();
    // local column index per global cell, per subdomain
    let mut col_of: Vec<Vec<Option<usize>>> = vec![vec![None; h.n]; n_sub];
    for (s, cells) in p.subdomain_cells.iter().enumerate() {
        for (l, &c) in cells.iter().enumerate() {
            col_of[s][c] = Some(l);
        }
    }
    let project = |op: &SparseMatrix| -> Vec<(usize, usize, DenseMatrix)> {
        let blocks: Vec<(usize, usize, DenseMatrix)> = crate::parallel::par_map(
            pairs.clone(),
            |(i, j)| {
                let local =
                    restrict_block(op, &p.subdomain_cells[i], &p.subdomain_cells[j], &col_of[j]);
                // basis_i^T local basis_j
                let tmp = local.matmul(&bases.bases[j].modes);
                (i, j, bases.bases[i].modes.tr_matmul(&tmp))
            },
        );
        blocks
    };
    // diagonal mass blocks only (M is diagonal, no cross-subdomain terms)
    let mut mass = TripletBuilder::new(h.n, h.n);
    for i in 0..h.n {
        mass.add(i, i, h.mass_diag[i]);
    }
    let mass = mass.build();
    let m_blocks = project(&mass)
        .into_iter()
        .filter(|(i, j, b)| i == j || b.max_abs() > 0.0)
        .collect();
    let b_fixed_blocks = project(&h.b_fixed);
    let b_el_blocks = project(&h.b_el);
    let mut q_red = Vec::with_capacity(*offsets.last().unwrap());
    for (s, basis) in bases.bases.iter().enumerate() {
        let local_q: Vec<f64> = p.subdomain_cells[s].iter().map(|&c| h.q[c]).collect();
        q_red.extend(basis.modes.tr_matvec(&local_q));
    }
    Ok(BlockReducedModel {
        n_sub,
        k_per_sub,
        offsets,
        m_blocks,
        b_fixed_blocks,
        b_el_blocks,
        q_red,
        dt: h.dt,
        n_steps: h.n_steps,
    })
}

impl BlockReducedModel {
    pub fn k_total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Assemble a block list into a dense k_total x k_total matrix.
    fn dense_from_blocks(&self, blocks: &[(usize, usize, DenseMatrix)]) -> DenseMatrix {
        let k = self.k_total();
        let mut out = DenseMatrix::zeros(k, k);
        for (i, j, b) in blocks {
            let (oi, oj) = (self.offsets[*i], self.offsets[*j]);
            for c in 0..b.cols {
                for r in 0..b.rows {
                    out.set(oi + r, oj + c, out.get(oi + r, oj + c) + b.get(r, c));
                }
            }
        }
        out
    }

    pub fn dense_system(&self, mu: f64) -> DenseMatrix {
        let m = self.dense_from_blocks(&self.m_blocks);
        let bf = self.dense_from_blocks(&self.b_fixed_blocks);
        let be = self.dense_from_blocks(&self.b_el_blocks);
        let k = self.k_total();
        let mut out = DenseMatrix::zeros(k, k);
        for j in 0..k {
            for i in 0..k {
                out.set(i, j, m.get(i, j) / self.dt + bf.get(i, j) + mu * be.get(i, j));
            }
        }
        out
    }
}

/// Backward Euler on the reduced block system; returns reduced coefficient
/// vectors per step (initial state zero).
pub fn block_rom_solve(brm: &BlockReducedModel, mu: f64) -> Result<Vec<Vec<f64>>> {
    let k = brm.k_total();
    if k == 0 {
        return Ok(vec![Vec::new(); brm.n_steps + 1]);
    }
    let a = brm.dense_system(mu);
    let m = brm.dense_from_blocks(&brm.m_blocks);
    let mut traj = Vec::with_capacity(brm.n_steps + 1);
    let mut t = vec![0.0; k];
    traj.push(t.clone());
    for _ in 0..brm.n_steps {
        let mt = m.matvec(&t);
        let rhs: Vec<f64> = brm
            .q_red
            .iter()
            .zip(&mt)
            .map(|(q, mti)| q + mti / brm.dt)
            .collect();
        t = linalg::dense_solve(&a, &rhs)?;
        traj.push(t.clone());
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// POD-Greedy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GreedyMode {
    GlobalRb,
    Lrbms,
}

#[derive(Debug, Clone)]
pub struct GreedyLogRow {
    pub iteration: usize,
    pub worst_mu: f64,
    pub max_error: f64,
}

pub struct GreedyResult {
    pub bases: LocalBasisSet,
    /// Partition actually used (single subdomain for global RB).
    pub partition: Partition,
    pub log: Vec<GreedyLogRow>,
    pub reached_target: bool,
}

/// Classic POD-Greedy: per iteration, evaluate the true L-inf-in-time H1
/// training error of the current reduced model, solve the FOM at the worst
/// parameter, and extend the basis with the dominant POD mode of the
/// H1-orthogonal projection error of that trajectory (per subdomain for
/// LRBMS). One mode per (subdomain and) extension.
pub fn pod_greedy(
    h: &HeatModel,
    g: &MaterialGrid,
    training: &[f64],
    target_factor: f64,
    max_ext: usize,
    mode: GreedyMode,
    partition: &Partition,
) -> Result<GreedyResult> {
    if training.is_empty() {
        return Err(HeatError::DimensionMismatch("empty training set".into()));
    }
    let p = match mode {
        GreedyMode::GlobalRb => crate::grid::partition_subdomains(g, [1, 1, 1])
            .map_err(|e| HeatError::DimensionMismatch(e.to_string()))?,
        GreedyMode::Lrbms => partition.clone(),
    };
    // training FOM trajectories (parameter-parallel)
    let fom_trajs: Vec<Vec<Vec<f64>>> =
        crate::parallel::par_map(training.to_vec(), |mu| heat_solve(h, mu))
            .into_iter()
            .collect::<Result<_>>()?;
    // local H1 products
    let local_h1: Vec<SparseMatrix> = p
        .subdomain_cells
        .iter()
        .map(|cells| submatrix(&h.h1, cells))
        .collect();
    let mut bases = LocalBasisSet {
        bases: (0..p.n_subdomains)
            .map(|_| ReducedBasis {
                modes: DenseMatrix::zeros(0, 0),
                singular_values: Vec::new(),
            })
            .collect(),
    };
    // initialize empty bases with correct row counts
    for (s, cells) in p.subdomain_cells.iter().enumerate() {
        bases.bases[s].modes = DenseMatrix::zeros(cells.len(), 0);
    }
    let mut log = Vec::new();
    let mut target = f64::NAN;
    let mut reached_target = false;
    for iteration in 0..=max_ext {
        // training errors of the current reduced model
        let brm = build_block_rom(h, &bases, &p)?;
        let errors: Vec<f64> = crate::parallel::par_map_indexed(training.len(), |ti| {
            let red = match block_rom_solve(&brm, training[ti]) {
                Ok(r) => r,
                Err(_) => return f64::INFINITY,
            };
            let rec: Vec<Vec<f64>> = red.iter().map(|c| bases.lift(c, &p)).collect();
            linf_h1_error(h, &fom_trajs[ti], &rec).unwrap_or(f64::INFINITY)
        });
        let (worst_i, &max_error) = errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        log.push(GreedyLogRow {
            iteration,
            worst_mu: training[worst_i],
            max_error,
        });
        if iteration == 0 {
            target = target_factor * max_error;
        }
        if max_error <= target {
            reached_target = true;
            break;
        }
        if iteration == max_ext {
            break;
        }
        // stagnation: no decrease over 5 consecutive extensions
        if log.len() > 5 {
            let prev = log[log.len() - 6].max_error;
            if max_error >= prev {
                return Err(HeatError::Stagnation {
                    iteration,
                    error: max_error,
                });
            }
        }
        // extend with the dominant projection-error mode(s)
        let traj = &fom_trajs[worst_i];
        for s in 0..p.n_subdomains {
            let cells = &p.subdomain_cells[s];
            let basis = &bases.bases[s];
            let local_snaps: Vec<Vec<f64>> = traj
                .iter()
                .map(|state| {
                    let mut local: Vec<f64> = cells.iter().map(|&c| state[c]).collect();
                    // H1-orthogonal projection error w.r.t. the local basis
                    if basis.k() > 0 {
                        let pv = local_h1[s].matvec(&local);
                        let coeff = basis.modes.tr_matvec(&pv);
                        let lifted = basis.lift(&coeff);
                        for (l, v) in local.iter_mut().zip(lifted) {
                            *l -= v;
                        }
                    }
                    local
                })
                .collect();
            let new_modes = pod(&local_snaps, Some(&local_h1[s]), PodMode::FixedK(1))?;
            if new_modes.k() == 0 {
                continue;
            }
            // append and re-orthonormalize against the existing basis
            let mut col = new_modes.modes.col(0).to_vec();
            for _ in 0..2 {
                let pv = local_h1[s].matvec(&col);
                let coeff = bases.bases[s].modes.tr_matvec(&pv);
                let lifted = bases.bases[s].lift(&coeff);
                for (c, v) in col.iter_mut().zip(lifted) {
                    *c -= v;
                }
            }
            let nrm = linalg::dot(&col, &local_h1[s].matvec(&col)).max(0.0).sqrt();
            if nrm < 1e-12 {
                continue;
            }
            for v in col.iter_mut() {
                *v /= nrm;
            }
            let mut cols: Vec<Vec<f64>> = (0..bases.bases[s].k())
                .map(|j| bases.bases[s].modes.col(j).to_vec())
                .collect();
            cols.push(col);
            bases.bases[s].modes = DenseMatrix::from_columns(cells.len(), &cols);
            bases.bases[s].singular_values = new_modes.singular_values.clone();
        }
    }
    Ok(GreedyResult {
        bases,
        partition: p,
        log,
        reached_target,
    })
}

/// Symmetric submatrix on an index set (rows and columns restricted).
fn submatrix(a: &SparseMatrix, cells: &[usize]) -> SparseMatrix {
    let mut local_of = vec![None; a.rows];
    for (l, &c) in cells.iter().enumerate() {
        local_of[c] = Some(l);
    }
    let mut tb = TripletBuilder::new(cells.len(), cells.len());
    for (li, &gi) in cells.iter().enumerate() {
        let (cs, vs) = a.row(gi);
        for (&gj, &v) in cs.iter().zip(vs) {
            if let Some(lj) = local_of[gj] {
                tb.add(li, lj, v);
            }
        }
    }
    tb.build()
}

/// Smallest eigenvalue of a symmetric matrix by inverse power iteration
/// (direct banded factorization). Used for SPD verification.
pub fn smallest_eigenvalue(a: &SparseMatrix, iters: usize) -> Result<f64> {
    let lu = linalg::BandedLu::factor(a)?;
    let n = a.rows;
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
    let nrm = linalg::norm2(&x);
    for v in x.iter_mut() {
        *v /= nrm;
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = lu.solve(&x);
        let ny = linalg::norm2(&y);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ny;
        }
        lambda = linalg::dot(&x, &a.matvec(&x));
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_synthetic_geometry, partition_subdomains, GeometrySpec};
    use approx::assert_relative_eq;

    fn small_grid() -> MaterialGrid {
        generate_synthetic_geometry(&GeometrySpec {
            dims: [13, 3, 3],
            voxel_size: [4e-4; 3],
            layers: [2, 4, 1, 4, 2],
            porosity: 0.3,
            seed: 3,
        })
        .unwrap()
    }

    fn small_model() -> (MaterialGrid, HeatModel) {
        let g = small_grid();
        let h = assemble_heat(&g, &HeatConductivities::default(), 1e-4, 10).unwrap();
        (g, h)
    }

    #[test]
    fn single_material_grid_has_no_parameter_part() {
        let g = MaterialGrid::new(
            [4, 2, 2],
            [1.0; 3],
            vec![Material::NegElectrode; 16],
        )
        .unwrap();
        let h = assemble_heat(&g, &HeatConductivities::default(), 1e-4, 10).unwrap();
        assert_eq!(h.b_el.nnz(), 0);
    }

    #[test]
    fn interior_row_sums_vanish() {
        let (g, h) = small_model();
        let ones = vec![1.0; h.n];
        let bv = h.b_mu(3.7).matvec(&ones);
        // rows of cells not on a Dirichlet terminal face must sum to zero
        let ifaces = crate::grid::extract_interfaces(&g);
        let mut dirichlet = vec![false; h.n];
        for f in ifaces
            .boundary_with(BoundaryTag::NegCollectorBoundary)
            .chain(ifaces.boundary_with(BoundaryTag::PosCollectorBoundary))
        {
            dirichlet[f.cell] = true;
        }
        for i in 0..h.n {
            if !dirichlet[i] {
                assert!(bv[i].abs() < 1e-12, "row {i} sum {:.3e}", bv[i]);
            } else {
                assert!(bv[i] > 0.0);
            }
        }
    }

    #[test]
    fn three_cell_chain_matches_hand_computation() {
        // [solid d=0.05 | electrolyte mu | solid d=0.05], unit voxels
        let g = MaterialGrid::new(
            [3, 1, 1],
            [1.0; 3],
            vec![
                Material::NegElectrode,
                Material::Electrolyte,
                Material::PosElectrode,
            ],
        )
        .unwrap();
        let h = assemble_heat(&g, &HeatConductivities::default(), 1e-4, 1).unwrap();
        let mu = 2.5;
        let b = h.b_mu(mu);
        // mixed faces: arithmetic mean (0.05/2 + mu/2), area/h = 1
        let t = 0.025 + 0.5 * mu;
        assert_relative_eq!(b.get(0, 0), t, max_relative = 1e-14);
        assert_relative_eq!(b.get(0, 1), -t, max_relative = 1e-14);
        assert_relative_eq!(b.get(1, 1), 2.0 * t, max_relative = 1e-14);
        assert_relative_eq!(b.get(2, 1), -t, max_relative = 1e-14);
    }

    #[test]
    fn affine_split_matches_direct_assembly() {
        let (g, h) = small_model();
        let conds = HeatConductivities::default();
        for &mu in &[0.1, 1.0, 2.0, 5.0, 10.0] {
            let b = h.b_mu(mu);
            // direct assembly with the declared averaging rules
            let mut tb = TripletBuilder::new(h.n, h.n);
            let cond = |m: Material| conds.solid(m).unwrap_or(mu);
            for (a, c, axis) in g.internal_faces() {
                let (da, db) = (cond(g.material[a]), cond(g.material[c]));
                let mixed = g.material[a] != g.material[c]
                    && (g.material[a] == Material::Electrolyte
                        || g.material[c] == Material::Electrolyte);
                let avg = if mixed {
                    0.5 * (da + db)
                } else if g.material[a] == Material::Electrolyte {
                    mu
                } else {
                    2.0 * da * db / (da + db)
                };
                let t = avg * g.face_area(axis) / g.face_distance(axis);
                add_face(&mut tb, a, c, t);
            }
            let ifaces = crate::grid::extract_interfaces(&g);
            for f in ifaces
                .boundary_with(BoundaryTag::NegCollectorBoundary)
                .chain(ifaces.boundary_with(BoundaryTag::PosCollectorBoundary))
            {
                let t = cond(g.material[f.cell]) * f.area / (0.5 * g.face_distance(f.axis));
                tb.add(f.cell, f.cell, t);
            }
            let direct = tb.build();
            for i in 0..h.n {
                let (cols, vals) = direct.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    assert_relative_eq!(b.get(i, j), v, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn system_matrix_is_spd_at_interval_ends() {
        let (_, h) = small_model();
        for &mu in &[0.1, 10.0] {
            let a = h.system_matrix(mu);
            let lambda = smallest_eigenvalue(&a, 30).unwrap();
            assert!(lambda > 0.0, "smallest eigenvalue {lambda:.3e} at mu={mu}");
        }
    }

    #[test]
    fn zero_source_stays_zero() {
        let (_, mut h) = small_model();
        h.q = vec![0.0; h.n];
        let traj = heat_solve(&h, 1.0).unwrap();
        assert_eq!(traj.len(), 11);
        for state in traj {
            assert!(state.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn steady_state_satisfies_elliptic_equation() {
        let (_, mut h) = small_model();
        h.n_steps = 10_000;
        h.dt = 1e-3;
        let mu = 1.0;
        let traj = heat_solve(&h, mu).unwrap();
        let last = &traj[traj.len() - 1];
        let prev = &traj[traj.len() - 2];
        let diff: f64 = last
            .iter()
            .zip(prev)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 1e-10, "not stationary: {diff:.3e}");
        let res = h.b_mu(mu).matvec(last);
        let scale = linalg::norm2(&h.q).max(1e-300);
        let err: f64 = res
            .iter()
            .zip(&h.q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err / scale < 1e-8, "steady residual {:.3e}", err / scale);
        // non-negativity (M-matrix structure)
        for state in &traj {
            assert!(state.iter().all(|&v| v >= -1e-14));
        }
    }

    #[test]
    fn h1_norm_of_constant_on_pure_neumann_grid() {
        // no collectors -> no Dirichlet terms in S
        let g = MaterialGrid::new(
            [4, 2, 2],
            [0.5, 0.5, 0.5],
            vec![Material::Electrolyte; 16],
        )
        .unwrap();
        let h = assemble_heat(&g, &HeatConductivities::default(), 1e-4, 1).unwrap();
        assert_eq!(h.h1_norm(&vec![0.0; 16]), 0.0);
        let total_volume: f64 = 16.0 * 0.125;
        assert_relative_eq!(
            h.h1_norm(&vec![1.0; 16]),
            total_volume.sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn localize_roundtrip_is_exact() {
        let (g, h) = small_model();
        let p = partition_subdomains(&g, [2, 1, 1]).unwrap();
        let traj = heat_solve(&h, 2.0).unwrap();
        let local = localize(&traj, &p);
        assert_eq!(local.len(), p.n_subdomains);
        for (t_idx, state) in traj.iter().enumerate() {
            let mut rebuilt = vec![0.0; h.n];
            for (s, cells) in p.subdomain_cells.iter().enumerate() {
                for (l, &c) in cells.iter().enumerate() {
                    rebuilt[c] = local[s][t_idx][l];
                }
            }
            assert_eq!(&rebuilt, state);
        }
    }

    #[test]
    fn block_rom_matches_dense_projection_oracle() {
        let (g, h) = small_model();
        let p = partition_subdomains(&g, [2, 1, 1]).unwrap();
        // random-ish local bases from localized snapshots
        let trajs: Vec<Vec<Vec<f64>>> = [0.5, 2.0, 7.0]
            .iter()
            .map(|&mu| heat_solve(&h, mu).unwrap())
            .collect();
        let mut bases = Vec::new();
        let local_h1: Vec<SparseMatrix> = p
            .subdomain_cells
            .iter()
            .map(|cells| submatrix(&h.h1, cells))
            .collect();
        for s in 0..p.n_subdomains {
            let mut snaps = Vec::new();
            for t in &trajs {
                for state in t.iter().skip(1) {
                    snaps.push(
                        p.subdomain_cells[s]
                            .iter()
                            .map(|&c| state[c])
                            .collect::<Vec<f64>>(),
                    );
                }
            }
            bases.push(pod(&snaps, Some(&local_h1[s]), PodMode::FixedK(3)).unwrap());
        }
        let bases = LocalBasisSet { bases };
        let brm = build_block_rom(&h, &bases, &p).unwrap();
        // dense oracle: global block-diagonal basis, full projection
        let global = bases.global_modes(&p);
        let bf_red = reduction::project_linear(&global, &h.b_fixed, &global).unwrap();
        let bf_blocks = brm.dense_from_blocks(&brm.b_fixed_blocks);
        for i in 0..brm.k_total() {
            for j in 0..brm.k_total() {
                assert!(
                    (bf_red.get(i, j) - bf_blocks.get(i, j)).abs()
                        < 1e-12 * bf_red.max_abs().max(1.0),
                    "block mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn non_adjacent_subdomains_have_no_blocks() {
        let (g, h) = small_model();
        let p = partition_subdomains(&g, [3, 1, 1]).unwrap();
        let mut bases = Vec::new();
        for cells in &p.subdomain_cells {
            let snap: Vec<f64> = (0..cells.len()).map(|i| 1.0 + i as f64).collect();
            bases.push(pod(&[snap], None, PodMode::FixedK(1)).unwrap());
        }
        let bases = LocalBasisSet { bases };
        let brm = build_block_rom(&h, &bases, &p).unwrap();
        // subdomains 0 and 2 are not adjacent: no (0,2) block may exist
        for (i, j, _) in &brm.b_fixed_blocks {
            assert!((*i as isize - *j as isize).abs() <= 1);
        }
    }

    #[test]
    fn greedy_single_subdomain_lrbms_equals_global_rb() {
        let (g, h) = small_model();
        let p1 = partition_subdomains(&g, [1, 1, 1]).unwrap();
        let training = crate::config::equidistant(0.1, 10.0, 4);
        let glob = pod_greedy(&h, &g, &training, 1e-6, 12, GreedyMode::GlobalRb, &p1).unwrap();
        let loc = pod_greedy(&h, &g, &training, 1e-6, 12, GreedyMode::Lrbms, &p1).unwrap();
        assert_eq!(glob.log.len(), loc.log.len());
        for (a, b) in glob.log.iter().zip(&loc.log) {
            assert_eq!(a.worst_mu, b.worst_mu);
            assert_relative_eq!(a.max_error, b.max_error, max_relative = 1e-8);
        }
    }

    #[test]
    fn greedy_log_non_increasing_and_decays() {
        let (g, h) = small_model();
        let p = partition_subdomains(&g, [2, 1, 1]).unwrap();
        let training = crate::config::equidistant(0.1, 10.0, 4);
        let res = pod_greedy(&h, &g, &training, 1e-6, 20, GreedyMode::Lrbms, &p).unwrap();
        for w in res.log.windows(2) {
            assert!(
                w[1].max_error <= w[0].max_error * (1.0 + 1e-10),
                "greedy error increased: {:.3e} -> {:.3e}",
                w[0].max_error,
                w[1].max_error
            );
        }
        let first = res.log.first().unwrap().max_error;
        let last = res.log.last().unwrap().max_error;
        assert!(last <= 1e-6 * first, "decay {first:.3e} -> {last:.3e}");
    }

    #[test]
    fn single_training_parameter_reduces_to_pod() {
        let (g, h) = small_model();
        let p = partition_subdomains(&g, [1, 1, 1]).unwrap();
        let res = pod_greedy(&h, &g, &[1.0], 1e-10, 15, GreedyMode::GlobalRb, &p).unwrap();
        assert!(res.reached_target, "single-trajectory greedy must converge");
    }

    #[test]
    fn reduced_solution_close_to_projection_optimum() {
        let (g, h) = small_model();
        let p = partition_subdomains(&g, [1, 1, 1]).unwrap();
        let training = crate::config::equidistant(0.1, 10.0, 3);
        let res = pod_greedy(&h, &g, &training, 1e-4, 10, GreedyMode::GlobalRb, &p).unwrap();
        let mu = 1.0;
        let fom = heat_solve(&h, mu).unwrap();
        let brm = build_block_rom(&h, &res.bases, &p).unwrap();
        let red = block_rom_solve(&brm, mu).unwrap();
        let rec: Vec<Vec<f64>> = red.iter().map(|c| res.bases.lift(c, &p)).collect();
        let rom_err = linf_h1_error(&h, &fom, &rec).unwrap();
        // H1 projection error of the FOM trajectory onto the same space
        let basis = &res.bases.bases[0];
        let mut proj_err = 0.0f64;
        for state in &fom {
            let coeff = basis.modes.tr_matvec(&h.h1.matvec(state));
            let lifted = basis.lift(&coeff);
            let d: Vec<f64> = state.iter().zip(&lifted).map(|(a, b)| a - b).collect();
            proj_err = proj_err.max(h.h1_norm(&d));
        }
        assert!(
            rom_err <= 10.0 * proj_err.max(1e-14),
            "reduced error {rom_err:.3e} vs projection {proj_err:.3e}"
        );
    }
}
