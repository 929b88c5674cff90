//! Full-order pore-scale battery model.
//!
//! Cell-centered finite volume discretization of the coupled Li-ion
//! concentration / electric potential system on a voxel grid, with
//! Butler-Volmer kinetics at the electrode-electrolyte interfaces. The
//! spatial operator is kept in decomposed form
//!
//! ```text
//! A_mu(s) = A_const + mu * A_bnd + A_lin * s + A_1c(s) + A_bv(s)
//! ```
//!
//! where `A_1c` carries the 1/c electrolyte coupling term and `A_bv` the
//! Butler-Volmer interface exchange. Both nonlinear parts come with
//! per-output dependency lists so they can be empirically interpolated
//! with local source restrictions.
//!
//! Units are CGS throughout: cm, s, mol, A, V, K. Concentration rows are
//! scaled by cell volume, so summing them gives an exact lithium balance;
//! potential rows are current balances in A.

use crate::grid::{
    BoundaryTag, ElectrodeSide, InterfaceSet, Material, MaterialGrid,
};
use crate::linalg::{self, BandedLu, SparseMatrix, TripletBuilder};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BatteryError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("Newton failed at step {step}, iteration {iter} (scaled residual {residual:.3e})")]
    NewtonFailure {
        step: usize,
        iter: usize,
        residual: f64,
    },
    #[error("state inadmissible: {0}")]
    StateInadmissible(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad trajectory file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, BatteryError>;

/// Evaluating 1/c requires c at least this large [mol/cm^3].
pub const C_FLOOR: f64 = 1e-12;
/// The sinh argument is clamped (with linear extension) beyond this value.
/// Converged operating points stay below |arg| ~ 5; the clamp only shapes
/// Newton iterates during the stiff initial transient. It must stay small
/// enough that cosh(clamp)-sized Jacobian entries do not render the
/// exchange-current rows numerically parallel (cosh(15) ~ 1.6e6 keeps the
/// row-entry spread within f64 range; cosh(50) ~ 2.6e21 does not), and
/// large enough to sit far outside the converged operating band
/// (|arg| < ~5 at every accepted state).
pub const SINH_ARG_CLAMP: f64 = 15.0;

// ---------------------------------------------------------------------------
// Physical constants
// ---------------------------------------------------------------------------

/// Material and kinetic constants in CGS units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PhysicalConstants {
    /// Interdiffusion coefficient in the electrolyte [cm^2/s].
    pub d_e: f64,
    /// Ion conductivity of the electrolyte [S/cm].
    pub kappa: f64,
    /// Transference number.
    pub t_plus: f64,
    /// Universal gas constant [J/(mol K)].
    pub r_gas: f64,
    /// Faraday constant [As/mol].
    pub faraday: f64,
    /// Global temperature [K].
    pub temp: f64,
    /// Ion diffusion coefficient in the electrodes [cm^2/s].
    pub d_s: f64,
    /// Electronic conductivity, negative electrode and collector [S/cm].
    pub sigma_neg: f64,
    /// Electronic conductivity, positive electrode and collector [S/cm].
    pub sigma_pos: f64,
    /// Maximum Li concentration, negative electrode [mol/cm^3].
    pub c_max_neg: f64,
    /// Maximum Li concentration, positive electrode [mol/cm^3].
    pub c_max_pos: f64,
    /// Reaction rate constant, negative interface [A cm^2.5 / mol^1.5].
    pub k_neg: f64,
    /// Reaction rate constant, positive interface [A cm^2.5 / mol^1.5].
    pub k_pos: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            d_e: 1.622e-6,
            kappa: 0.02,
            t_plus: 0.39989,
            r_gas: 8.314,
            faraday: 96487.0,
            temp: 298.0,
            d_s: 1e-10,
            sigma_neg: 10.0,
            sigma_pos: 0.38,
            c_max_neg: 24681e-6,
            c_max_pos: 23671e-6,
            k_neg: 0.002,
            k_pos: 0.2,
        }
    }
}

impl PhysicalConstants {
    pub fn c_max(&self, side: ElectrodeSide) -> f64 {
        match side {
            ElectrodeSide::Neg => self.c_max_neg,
            ElectrodeSide::Pos => self.c_max_pos,
        }
    }

    pub fn rate_constant(&self, side: ElectrodeSide) -> f64 {
        match side {
            ElectrodeSide::Neg => self.k_neg,
            ElectrodeSide::Pos => self.k_pos,
        }
    }

    /// Electronic/ionic conductivity by material.
    pub fn conductivity(&self, m: Material) -> f64 {
        match m {
            Material::Electrolyte => self.kappa,
            Material::NegElectrode | Material::NegCollector => self.sigma_neg,
            Material::PosElectrode | Material::PosCollector => self.sigma_pos,
        }
    }

    /// F / (2 R T), the sinh argument coefficient [1/V].
    pub fn sinh_coef(&self) -> f64 {
        self.faraday / (2.0 * self.r_gas * self.temp)
    }

    /// kappa (1 - t+) R T / F, the 1/c flux coefficient.
    pub fn one_over_c_coef(&self) -> f64 {
        self.kappa * (1.0 - self.t_plus) * self.r_gas * self.temp / self.faraday
    }

    /// Initial concentration of the paper's small-geometry protocol
    /// [mol/cm^3] per material.
    pub fn default_initial_concentration(m: Material) -> Option<f64> {
        match m {
            Material::Electrolyte => Some(1200e-6),
            Material::NegElectrode => Some(20574e-6),
            Material::PosElectrode => Some(2639e-6),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Open circuit potential and Butler-Volmer kinetics
// ---------------------------------------------------------------------------

/// Open circuit potential [V] at stoichiometry `s` in (0, 1).
pub fn open_circuit_potential(s: f64, side: ElectrodeSide) -> Result<f64> {
    match side {
        ElectrodeSide::Neg => {
            if s <= 0.0 || s >= 1.0 {
                return Err(BatteryError::Domain(format!("neg OCP stoichiometry {s}")));
            }
            Ok(-0.132 + 1.41 * (-3.52 * s).exp())
        }
        ElectrodeSide::Pos => {
            if s <= 0.0 || s >= 1.00167 {
                return Err(BatteryError::Domain(format!("pos OCP stoichiometry {s}")));
            }
            Ok(0.0677504 * (-21.8502 * s + 12.8268).tanh()
                - 0.105734 * ((1.00167 - s).powf(-0.379571) - 1.576)
                - 0.045 * (-71.69 * s.powi(8)).exp()
                + 0.01 * (-200.0 * (s - 0.19)).exp()
                + 4.06279)
        }
    }
}

/// d U0 / d s.
pub fn open_circuit_potential_deriv(s: f64, side: ElectrodeSide) -> Result<f64> {
    match side {
        ElectrodeSide::Neg => {
            if s <= 0.0 || s >= 1.0 {
                return Err(BatteryError::Domain(format!("neg OCP stoichiometry {s}")));
            }
            Ok(-3.52 * 1.41 * (-3.52 * s).exp())
        }
        ElectrodeSide::Pos => {
            if s <= 0.0 || s >= 1.00167 {
                return Err(BatteryError::Domain(format!("pos OCP stoichiometry {s}")));
            }
            let sech2 = {
                let t = (-21.8502 * s + 12.8268).tanh();
                1.0 - t * t
            };
            Ok(0.0677504 * (-21.8502) * sech2
                - 0.105734 * 0.379571 * (1.00167 - s).powf(-1.379571)
                - 0.045 * (-71.69 * s.powi(8)).exp() * (-71.69 * 8.0 * s.powi(7))
                + 0.01 * (-200.0 * (s - 0.19)).exp() * (-200.0))
        }
    }
}

/// sinh with C1 linear extension beyond |SINH_ARG_CLAMP| (keeps Newton
/// derivatives finite and monotone when iterates overshoot). Returns
/// (value, derivative, clamped).
fn safe_sinh(arg: f64) -> (f64, f64, bool) {
    if arg > SINH_ARG_CLAMP {
        let s = SINH_ARG_CLAMP.sinh();
        let c = SINH_ARG_CLAMP.cosh();
        (s + c * (arg - SINH_ARG_CLAMP), c, true)
    } else if arg < -SINH_ARG_CLAMP {
        let s = SINH_ARG_CLAMP.sinh();
        let c = SINH_ARG_CLAMP.cosh();
        (-s + c * (arg + SINH_ARG_CLAMP), c, true)
    } else {
        (arg.sinh(), arg.cosh(), false)
    }
}

/// Butler-Volmer evaluation with partial derivatives.
#[derive(Debug, Clone, Copy)]
pub struct BvEval {
    /// Interfacial current density, electrode into electrolyte [A/cm^2].
    pub j: f64,
    /// Ion flux N = j/F [mol/(cm^2 s)].
    pub n_flux: f64,
    pub dj_dce: f64,
    pub dj_dcs: f64,
    pub dj_dphie: f64,
    pub dj_dphis: f64,
    /// True if the sinh argument exceeded the clamp.
    pub clamped: bool,
}

/// Evaluates the Butler-Volmer relation
/// j = 2k sqrt(c_e c_s (c_max - c_s)) sinh((phi_s - phi_e - U0(c_s/c_max)) F/(2RT)).
pub fn butler_volmer(
    c_e: f64,
    c_s: f64,
    phi_e: f64,
    phi_s: f64,
    side: ElectrodeSide,
    consts: &PhysicalConstants,
) -> Result<BvEval> {
    let c_max = consts.c_max(side);
    if c_e <= 0.0 {
        return Err(BatteryError::Domain(format!("electrolyte c = {c_e}")));
    }
    if c_s <= 0.0 || c_s >= c_max {
        return Err(BatteryError::Domain(format!(
            "electrode c = {c_s} outside (0, {c_max})"
        )));
    }
    let s = c_s / c_max;
    let u0 = open_circuit_potential(s, side)?;
    let du0 = open_circuit_potential_deriv(s, side)?;
    let k = consts.rate_constant(side);
    let amp = 2.0 * k * (c_e * c_s * (c_max - c_s)).sqrt();
    let coef = consts.sinh_coef();
    let arg = (phi_s - phi_e - u0) * coef;
    let (sh, ch, clamped) = safe_sinh(arg);
    let j = amp * sh;
    let damp_dce = amp / (2.0 * c_e);
    let damp_dcs = amp * (c_max - 2.0 * c_s) / (2.0 * c_s * (c_max - c_s));
    Ok(BvEval {
        j,
        n_flux: j / consts.faraday,
        dj_dce: damp_dce * sh,
        dj_dcs: damp_dcs * sh + amp * ch * coef * (-du0 / c_max),
        dj_dphie: -amp * ch * coef,
        dj_dphis: amp * ch * coef,
        clamped,
    })
}

// ---------------------------------------------------------------------------
// DOF layout and state
// ---------------------------------------------------------------------------

/// Maps cells to concentration / potential DOFs. Collector cells carry no
/// concentration DOF; every cell carries a potential DOF. The global DOF
/// vector is `[c (n_c entries) ; phi (n_phi entries)]`.
#[derive(Debug, Clone)]
pub struct DofLayout {
    /// Per-cell concentration DOF (None for collectors).
    pub c_dof: Vec<Option<usize>>,
    /// Cell index of each concentration DOF.
    pub c_cells: Vec<usize>,
    pub n_c: usize,
    pub n_phi: usize,
}

impl DofLayout {
    pub fn new(g: &MaterialGrid) -> Self {
        let mut c_dof = Vec::with_capacity(g.cell_count());
        let mut c_cells = Vec::new();
        for i in 0..g.cell_count() {
            if g.material[i].is_collector() {
                c_dof.push(None);
            } else {
                c_dof.push(Some(c_cells.len()));
                c_cells.push(i);
            }
        }
        DofLayout {
            c_dof,
            n_c: c_cells.len(),
            c_cells,
            n_phi: g.cell_count(),
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_c + self.n_phi
    }

    /// Global DOF index of the potential of a cell.
    pub fn phi_global(&self, cell: usize) -> usize {
        self.n_c + cell
    }
}

/// Discrete state: concentrations over c DOFs, potentials over all cells.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub c: Vec<f64>,
    pub phi: Vec<f64>,
    pub time: f64,
}

impl State {
    pub fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.c.len() + self.phi.len());
        v.extend_from_slice(&self.c);
        v.extend_from_slice(&self.phi);
        v
    }

    pub fn unpack(v: &[f64], n_c: usize, time: f64) -> State {
        State {
            c: v[..n_c].to_vec(),
            phi: v[n_c..].to_vec(),
            time,
        }
    }
}

// ---------------------------------------------------------------------------
// Operator decomposition
// ---------------------------------------------------------------------------

/// One electrolyte-internal face carrying the 1/c coupling term.
#[derive(Debug, Clone, Copy)]
pub struct OneOverCFace {
    /// c DOF indices of the two adjacent electrolyte cells.
    pub c_i: usize,
    pub c_j: usize,
    /// Global rows of the two potential equations.
    pub row_i: usize,
    pub row_j: usize,
    /// kappa (1 - t+) R T / F * area / h.
    pub coef: f64,
}

/// One Butler-Volmer interface face with the global rows it feeds.
#[derive(Debug, Clone, Copy)]
pub struct BvTerm {
    pub c_e: usize,
    pub c_s: usize,
    pub row_phi_e: usize,
    pub row_phi_s: usize,
    pub row_c_e: usize,
    pub row_c_s: usize,
    pub area: f64,
    pub side: ElectrodeSide,
}

/// The decomposed finite volume operator plus DOF layout and geometry
/// metadata needed for time stepping.
pub struct OperatorDecomposition {
    pub layout: DofLayout,
    pub consts: PhysicalConstants,
    /// Constant residual part (Dirichlet boundary data).
    pub a_const: Vec<f64>,
    /// Applied-current boundary vector, scaled by mu.
    pub a_bnd: Vec<f64>,
    /// All linear diffusion/conduction terms.
    pub a_lin: SparseMatrix,
    pub one_over_c_faces: Vec<OneOverCFace>,
    pub bv_terms: Vec<BvTerm>,
    /// Sorted output rows with 1/c contributions, and per-row source DOFs.
    pub outputs_1c: Vec<usize>,
    pub deps_1c: BTreeMap<usize, Vec<usize>>,
    /// Sorted output rows with Butler-Volmer contributions, and per-row
    /// source DOFs.
    pub outputs_bv: Vec<usize>,
    pub deps_bv: BTreeMap<usize, Vec<usize>>,
    /// Cell volume (uniform voxels) [cm^3].
    pub cell_volume: f64,
    /// Per-c-DOF material (for initial conditions and reporting).
    pub c_material: Vec<Material>,
    /// Per-c-DOF electrode side for electrode DOFs.
    pub c_side: Vec<Option<ElectrodeSide>>,
    /// Dirichlet potential at the negative collector boundary [V].
    pub phi_dirichlet: f64,
    /// Cells on the positive collector boundary (for reporting).
    pub pos_boundary_cells: Vec<usize>,
}

/// Assembles the decomposed operator. `u0_ref` is the fixed Dirichlet
/// potential at the negative collector boundary, U0(c(0)/c_max).
pub fn assemble_decomposition(
    g: &MaterialGrid,
    ifaces: &InterfaceSet,
    consts: &PhysicalConstants,
    u0_ref: f64,
) -> Result<OperatorDecomposition> {
    let layout = DofLayout::new(g);
    let n = layout.n_total();
    if ifaces
        .boundary_with(BoundaryTag::NegCollectorBoundary)
        .next()
        .is_none()
    {
        return Err(BatteryError::Geometry(
            "no negative collector boundary faces".into(),
        ));
    }
    if ifaces
        .boundary_with(BoundaryTag::PosCollectorBoundary)
        .next()
        .is_none()
    {
        return Err(BatteryError::Geometry(
            "no positive collector boundary faces".into(),
        ));
    }
    let mut a_const = vec![0.0; n];
    let mut a_bnd = vec![0.0; n];
    let mut lin = TripletBuilder::new(n, n);
    let mut one_over_c_faces = Vec::new();
    let coef_1c = consts.one_over_c_coef();

    for (a, b, axis) in g.internal_faces() {
        let (ma, mb) = (g.material[a], g.material[b]);
        let t_geom = g.face_area(axis) / g.face_distance(axis);
        // concentration diffusion: same-phase faces only
        if ma == mb && !ma.is_collector() {
            let d = if ma == Material::Electrolyte {
                consts.d_e
            } else {
                consts.d_s
            };
            let t = d * t_geom;
            let (ca, cb) = (layout.c_dof[a].unwrap(), layout.c_dof[b].unwrap());
            lin.add(ca, ca, t);
            lin.add(ca, cb, -t);
            lin.add(cb, cb, t);
            lin.add(cb, ca, -t);
        }
        // potential conduction
        let sigma_face = phi_face_conductivity(ma, mb, consts);
        if let Some(sig) = sigma_face {
            let t = sig * t_geom;
            let (pa, pb) = (layout.phi_global(a), layout.phi_global(b));
            lin.add(pa, pa, t);
            lin.add(pa, pb, -t);
            lin.add(pb, pb, t);
            lin.add(pb, pa, -t);
        }
        // 1/c electrolyte coupling (potential rows, concentration sources)
        if ma == Material::Electrolyte && mb == Material::Electrolyte {
            one_over_c_faces.push(OneOverCFace {
                c_i: layout.c_dof[a].unwrap(),
                c_j: layout.c_dof[b].unwrap(),
                row_i: layout.phi_global(a),
                row_j: layout.phi_global(b),
                coef: coef_1c * t_geom,
            });
        }
    }

    // Dirichlet potential at the negative collector boundary: ghost value
    // at half-cell distance
    for f in ifaces.boundary_with(BoundaryTag::NegCollectorBoundary) {
        let sigma = consts.conductivity(g.material[f.cell]);
        let t = sigma * f.area / (0.5 * g.face_distance(f.axis));
        let row = layout.phi_global(f.cell);
        lin.add(row, row, t);
        a_const[row] -= t * u0_ref;
    }
    // applied current at the positive collector boundary
    let mut pos_boundary_cells = Vec::new();
    for f in ifaces.boundary_with(BoundaryTag::PosCollectorBoundary) {
        a_bnd[layout.phi_global(f.cell)] += f.area;
        pos_boundary_cells.push(f.cell);
    }

    let mut bv_terms = Vec::with_capacity(ifaces.bv_faces.len());
    for f in &ifaces.bv_faces {
        bv_terms.push(BvTerm {
            c_e: layout.c_dof[f.electrolyte_cell].unwrap(),
            c_s: layout.c_dof[f.electrode_cell].unwrap(),
            row_phi_e: layout.phi_global(f.electrolyte_cell),
            row_phi_s: layout.phi_global(f.electrode_cell),
            row_c_e: layout.c_dof[f.electrolyte_cell].unwrap(),
            row_c_s: layout.c_dof[f.electrode_cell].unwrap(),
            area: f.area,
            side: f.side,
        });
    }

    // dependency lists
    let mut deps_1c: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for f in &one_over_c_faces {
        for row in [f.row_i, f.row_j] {
            let e = deps_1c.entry(row).or_default();
            e.push(f.c_i);
            e.push(f.c_j);
        }
    }
    let mut deps_bv: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in &bv_terms {
        let n_c = layout.n_c;
        let srcs = [t.c_e, t.c_s, n_c + (t.row_phi_e - n_c), n_c + (t.row_phi_s - n_c)];
        for row in [t.row_phi_e, t.row_phi_s, t.row_c_e, t.row_c_s] {
            deps_bv.entry(row).or_default().extend_from_slice(&srcs);
        }
    }
    for d in deps_1c.values_mut().chain(deps_bv.values_mut()) {
        d.sort_unstable();
        d.dedup();
    }
    let outputs_1c: Vec<usize> = deps_1c.keys().copied().collect();
    let outputs_bv: Vec<usize> = deps_bv.keys().copied().collect();

    let c_material: Vec<Material> = layout.c_cells.iter().map(|&c| g.material[c]).collect();
    let c_side: Vec<Option<ElectrodeSide>> = c_material
        .iter()
        .map(|m| match m {
            Material::NegElectrode => Some(ElectrodeSide::Neg),
            Material::PosElectrode => Some(ElectrodeSide::Pos),
            _ => None,
        })
        .collect();

    Ok(OperatorDecomposition {
        layout,
        consts: *consts,
        a_const,
        a_bnd,
        a_lin: lin.build(),
        one_over_c_faces,
        bv_terms,
        outputs_1c,
        deps_1c,
        outputs_bv,
        deps_bv,
        cell_volume: g.cell_volume(),
        c_material,
        c_side,
        phi_dirichlet: u0_ref,
        pos_boundary_cells,
    })
}

/// Conductivity across a potential face, or None where no conduction
/// applies (electrode-electrolyte couples only through Butler-Volmer,
/// collector-electrolyte is insulating, cross-polarity contacts do not
/// occur in admissible geometries).
fn phi_face_conductivity(ma: Material, mb: Material, consts: &PhysicalConstants) -> Option<f64> {
    use Material::*;
    let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
    match (ma, mb) {
        (a, b) if a == b => Some(consts.conductivity(a)),
        (NegCollector, NegElectrode) | (NegElectrode, NegCollector) => Some(harmonic(
            consts.conductivity(NegCollector),
            consts.conductivity(NegElectrode),
        )),
        (PosCollector, PosElectrode) | (PosElectrode, PosCollector) => Some(harmonic(
            consts.conductivity(PosCollector),
            consts.conductivity(PosElectrode),
        )),
        _ => None,
    }
}

impl OperatorDecomposition {
    pub fn n_total(&self) -> usize {
        self.layout.n_total()
    }

    fn check_admissible(&self, s: &State) -> Result<()> {
        for (i, &c) in s.c.iter().enumerate() {
            match self.c_side[i] {
                None => {
                    if c < C_FLOOR {
                        return Err(BatteryError::Domain(format!(
                            "electrolyte c[{i}] = {c:.3e} below floor"
                        )));
                    }
                }
                Some(side) => {
                    let c_max = self.consts.c_max(side);
                    if c < C_FLOOR || c > c_max - C_FLOOR {
                        return Err(BatteryError::Domain(format!(
                            "electrode c[{i}] = {c:.3e} outside (0, {c_max:.3e})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_admissible(&self, s: &State) -> bool {
        self.check_admissible(s).is_ok()
    }

    /// A_1c(s) as a full-length vector.
    pub fn eval_1c(&self, s: &State) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_total()];
        self.add_1c(s, &mut out)?;
        Ok(out)
    }

    fn add_1c(&self, s: &State, out: &mut [f64]) -> Result<()> {
        for f in &self.one_over_c_faces {
            let (ci, cj) = (s.c[f.c_i], s.c[f.c_j]);
            if ci < C_FLOOR || cj < C_FLOOR {
                return Err(BatteryError::Domain(format!(
                    "1/c evaluation at c = ({ci:.3e}, {cj:.3e})"
                )));
            }
            // harmonic face value: 1/c_f = (1/c_i + 1/c_j)/2
            let g = 0.5 * (1.0 / ci + 1.0 / cj);
            let v = f.coef * (cj - ci) * g;
            out[f.row_i] += v;
            out[f.row_j] -= v;
        }
        Ok(())
    }

    /// A_bv(s) as a full-length vector. Also reports whether any sinh
    /// argument hit the clamp.
    pub fn eval_bv(&self, s: &State) -> Result<(Vec<f64>, bool)> {
        let mut out = vec![0.0; self.n_total()];
        let clamped = self.add_bv(s, &mut out)?;
        Ok((out, clamped))
    }

    fn add_bv(&self, s: &State, out: &mut [f64]) -> Result<bool> {
        let n_c = self.layout.n_c;
        let mut clamped = false;
        for t in &self.bv_terms {
            let bv = butler_volmer(
                s.c[t.c_e],
                s.c[t.c_s],
                s.phi[t.row_phi_e - n_c],
                s.phi[t.row_phi_s - n_c],
                t.side,
                &self.consts,
            )?;
            clamped |= bv.clamped;
            out[t.row_phi_e] -= bv.j * t.area;
            out[t.row_phi_s] += bv.j * t.area;
            out[t.row_c_e] -= bv.n_flux * t.area;
            out[t.row_c_s] += bv.n_flux * t.area;
        }
        Ok(clamped)
    }

    /// The spatial operator A_mu(s) = A_const + mu A_bnd + A_lin s + A_1c(s) + A_bv(s).
    pub fn apply_spatial(&self, mu: f64, s: &State) -> Result<Vec<f64>> {
        let x = s.pack();
        let mut out = self.a_lin.matvec(&x);
        for i in 0..out.len() {
            out[i] += self.a_const[i] + mu * self.a_bnd[i];
        }
        self.add_1c(s, &mut out)?;
        self.add_bv(s, &mut out)?;
        Ok(out)
    }

    /// Backward Euler residual [ V (c_new - c_old)/dt ; 0 ] + A_mu(s_new).
    pub fn apply_residual(
        &self,
        mu: f64,
        s_new: &State,
        s_old: &State,
        dt: f64,
    ) -> Result<Vec<f64>> {
        let mut r = self.apply_spatial(mu, s_new)?;
        let w = self.cell_volume / dt;
        for i in 0..self.layout.n_c {
            r[i] += w * (s_new.c[i] - s_old.c[i]);
        }
        Ok(r)
    }

    /// Analytic Jacobian of `apply_residual` with respect to s_new.
    /// Pass `dt = f64::INFINITY` for the spatial operator alone.
    pub fn assemble_jacobian(&self, _mu: f64, s: &State, dt: f64) -> Result<SparseMatrix> {
        let n = self.n_total();
        let n_c = self.layout.n_c;
        let mut jb = TripletBuilder::new(n, n);
        // time term
        if dt.is_finite() {
            let w = self.cell_volume / dt;
            for i in 0..n_c {
                jb.add(i, i, w);
            }
        }
        // linear part
        for i in 0..n {
            let (cols, vals) = self.a_lin.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                jb.add(i, j, v);
            }
        }
        // 1/c part
        for f in &self.one_over_c_faces {
            let (ci, cj) = (s.c[f.c_i], s.c[f.c_j]);
            if ci < C_FLOOR || cj < C_FLOOR {
                return Err(BatteryError::Domain(format!(
                    "1/c Jacobian at c = ({ci:.3e}, {cj:.3e})"
                )));
            }
            let g = 0.5 * (1.0 / ci + 1.0 / cj);
            let d_dci = f.coef * (-g + (cj - ci) * (-0.5 / (ci * ci)));
            let d_dcj = f.coef * (g + (cj - ci) * (-0.5 / (cj * cj)));
            jb.add(f.row_i, f.c_i, d_dci);
            jb.add(f.row_i, f.c_j, d_dcj);
            jb.add(f.row_j, f.c_i, -d_dci);
            jb.add(f.row_j, f.c_j, -d_dcj);
        }
        // Butler-Volmer part
        for t in &self.bv_terms {
            let bv = butler_volmer(
                s.c[t.c_e],
                s.c[t.c_s],
                s.phi[t.row_phi_e - n_c],
                s.phi[t.row_phi_s - n_c],
                t.side,
                &self.consts,
            )?;
            let cols = [t.c_e, t.c_s, t.row_phi_e, t.row_phi_s];
            let dj = [bv.dj_dce, bv.dj_dcs, bv.dj_dphie, bv.dj_dphis];
            for (col, d) in cols.iter().zip(dj) {
                let da = d * t.area;
                jb.add(t.row_phi_e, *col, -da);
                jb.add(t.row_phi_s, *col, da);
                jb.add(t.row_c_e, *col, -da / self.consts.faraday);
                jb.add(t.row_c_s, *col, da / self.consts.faraday);
            }
        }
        Ok(jb.build())
    }
}

/// Volume-weighted total lithium content of a state [mol].
pub fn total_lithium(s: &State, cell_volume: f64) -> f64 {
    s.c.iter().sum::<f64>() * cell_volume
}

/// Builds the initial concentration vector from per-material values.
pub fn initial_concentration(
    d: &OperatorDecomposition,
    c_electrolyte: f64,
    c_neg: f64,
    c_pos: f64,
) -> Vec<f64> {
    d.c_material
        .iter()
        .map(|m| match m {
            Material::Electrolyte => c_electrolyte,
            Material::NegElectrode => c_neg,
            Material::PosElectrode => c_pos,
            _ => unreachable!("collector cells carry no c DOF"),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Newton and time integration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct NewtonOpts {
    /// Converged when the row-scaled residual 2-norm drops below
    /// `tol * max(1, ||scaled rhs||)`.
    pub tol: f64,
    /// Residual level accepted when the damped iteration stalls: the
    /// exchange-current rows are so stiff that below this level the exact
    /// Newton correction drops under the floating-point granularity of the
    /// state, and no further progress is representable.
    pub stall_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        NewtonOpts {
            tol: 1e-10,
            stall_tol: 1e-5,
            max_iter: 50,
            max_halvings: 10,
        }
    }
}

/// Row scaling used for Newton convergence tests: concentration rows are
/// O(V c_ref / dt), potential rows are O(boundary current). Without it a
/// single absolute tolerance would be meaningless across the two blocks.
#[derive(Debug, Clone, Copy)]
pub struct ResidualScaling {
    pub c_scale: f64,
    pub phi_scale: f64,
    pub n_c: usize,
}

impl ResidualScaling {
    pub fn new(d: &OperatorDecomposition, mu: f64, c_ref: f64, dt: f64) -> Self {
        let mut phi_scale: f64 = 0.0;
        for i in 0..d.n_total() {
            phi_scale = phi_scale.max((d.a_const[i] + mu * d.a_bnd[i]).abs());
        }
        ResidualScaling {
            c_scale: (d.cell_volume * c_ref / dt).max(f64::MIN_POSITIVE),
            phi_scale: phi_scale.max(f64::MIN_POSITIVE),
            n_c: d.layout.n_c,
        }
    }

    pub fn scaled_norm(&self, r: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, &v) in r.iter().enumerate() {
            let w = if i < self.n_c {
                v / self.c_scale
            } else {
                v / self.phi_scale
            };
            s += w * w;
        }
        s.sqrt()
    }
}

/// A full-order solution trajectory with optional operator evaluations
/// recorded at accepted Newton iterates (used as EI training data).
pub struct Trajectory {
    pub mu: f64,
    pub dt: f64,
    pub states: Vec<State>,
    /// A_1c evaluations restricted to `outputs_1c` rows.
    pub stage_evals_1c: Vec<Vec<f64>>,
    /// A_bv evaluations restricted to `outputs_bv` rows.
    pub stage_evals_bv: Vec<Vec<f64>>,
    /// Total Newton solves taken, including sub-steps (diagnostics only,
    /// not serialized).
    pub substeps: usize,
}

fn restrict(v: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| v[r]).collect()
}

struct NewtonWorkspace {
    rcm: Option<Vec<usize>>,
    /// Retained factorization for chord (modified Newton) iterations; reused
    /// across iterations and time steps while the contraction rate stays
    /// good, refreshed from the current Jacobian otherwise.
    flu: Option<EquilibratedLu>,
}

/// Row/column-equilibrated banded LU factorization that can be reused for
/// several right-hand sides. Concentration and potential rows differ by
/// ~12 orders of magnitude; without equilibration partial pivoting inside
/// the band produces unusable Newton directions. Keeping the factorization
/// around lets the damped Newton line search evaluate the affine-invariant
/// level function `|J^-1 r(trial)|` at the cost of one back-substitution
/// per trial.
struct EquilibratedLu {
    lu: BandedLu,
    scaled: SparseMatrix,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
}

impl EquilibratedLu {
    fn factor(a: &SparseMatrix, rcm: &mut Option<Vec<usize>>) -> Result<Self> {
        let n = a.rows;
        let mut row_scale = vec![1.0f64; n];
        for i in 0..n {
            let (_, vals) = a.row(i);
            let m = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if m > 0.0 {
                row_scale[i] = 1.0 / m;
            }
        }
        let mut col_scale = vec![0.0f64; n];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                col_scale[j] = col_scale[j].max((v * row_scale[i]).abs());
            }
        }
        for s in col_scale.iter_mut() {
            *s = if *s > 0.0 { 1.0 / *s } else { 1.0 };
        }
        let mut tb = TripletBuilder::new(n, n);
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                tb.add(i, j, v * row_scale[i] * col_scale[j]);
            }
        }
        let scaled = tb.build();
        if rcm.is_none() {
            *rcm = Some(linalg::rcm_ordering(&scaled));
        }
        let lu = BandedLu::factor_permuted(&scaled, rcm.clone().unwrap())?;
        Ok(Self {
            lu,
            scaled,
            row_scale,
            col_scale,
        })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let bs: Vec<f64> = b.iter().zip(&self.row_scale).map(|(v, s)| v * s).collect();
        let mut x = self.lu.solve(&bs);
        // iterative refinement: the factorization alone loses most digits
        // on severely graded rows; a few refinement sweeps restore them
        // whenever the LU error map is contractive
        let bn = linalg::norm2(&bs).max(f64::MIN_POSITIVE);
        let mut best = x.clone();
        let mut best_rel = f64::INFINITY;
        for _ in 0..8 {
            let ax = self.scaled.matvec(&x);
            let res: Vec<f64> = bs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let rel = linalg::norm2(&res) / bn;
            if rel < best_rel {
                best_rel = rel;
                best.copy_from_slice(&x);
            }
            if rel < 1e-13 || rel > best_rel * 10.0 {
                break;
            }
            let dx = self.lu.solve(&res);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        let mut x = best;
        for (xi, s) in x.iter_mut().zip(&self.col_scale) {
            *xi *= s;
        }
        x
    }
}

fn solve_equilibrated(
    a: &SparseMatrix,
    b: &[f64],
    rcm: &mut Option<Vec<usize>>,
) -> Result<Vec<f64>> {
    Ok(EquilibratedLu::factor(a, rcm)?.solve(b))
}

/// Left-preconditions the Newton system by the exact row operation
/// c_row -= phi_row / F for every concentration DOF. The Butler-Volmer
/// part of a cell's c-row is exactly 1/F times the BV part of the same
/// cell's phi-row, so this cancels the BV nonlinearity out of the c-rows
/// symbolically. Without it the huge open-circuit-potential slope makes
/// those row pairs numerically parallel and the factorization useless.
fn bv_eliminated_system(
    d: &OperatorDecomposition,
    jac: &SparseMatrix,
    rhs: &[f64],
) -> (SparseMatrix, Vec<f64>) {
    let n = d.n_total();
    let n_c = d.layout.n_c;
    let inv_f = 1.0 / d.consts.faraday;
    let mut tb = TripletBuilder::new(n, n);
    for i in 0..n {
        let (cols, vals) = jac.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            tb.add(i, j, v);
        }
        if i < n_c {
            let phi_row = n_c + d.layout.c_cells[i];
            let (pcols, pvals) = jac.row(phi_row);
            for (&j, &v) in pcols.iter().zip(pvals) {
                tb.add(i, j, -inv_f * v);
            }
        }
    }
    (tb.build(), transform_residual(d, rhs))
}

/// Apply the same row operation as [`bv_eliminated_system`] to a residual
/// vector: `r_c <- r_c - r_phi / F` for the cell carrying each c-dof. The
/// transformed c-rows are free of the Butler-Volmer flux, so their norm is
/// a smooth merit function for the Newton line search (the raw c-rows carry
/// the exchange current directly and spike along the Newton direction).
pub(crate) fn transform_residual(d: &OperatorDecomposition, r: &[f64]) -> Vec<f64> {
    let n_c = d.layout.n_c;
    let inv_f = 1.0 / d.consts.faraday;
    let mut out = r.to_vec();
    for i in 0..n_c {
        out[i] -= inv_f * r[n_c + d.layout.c_cells[i]];
    }
    out
}

/// Largest step fraction (capped at 1) that keeps every concentration
/// strictly inside its admissible interval, with a 1% safety margin.
fn max_admissible_fraction(d: &OperatorDecomposition, s: &State, delta: &[f64]) -> f64 {
    let mut lambda = 1.0f64;
    for (i, (&c, &dc)) in s.c.iter().zip(delta).enumerate() {
        if dc < 0.0 {
            let room = c - C_FLOOR;
            if room > 0.0 {
                lambda = lambda.min(0.99 * room / -dc);
            }
        } else if dc > 0.0 {
            if let Some(side) = d.c_side[i] {
                let room = d.consts.c_max(side) - C_FLOOR - c;
                if room > 0.0 {
                    lambda = lambda.min(0.99 * room / dc);
                }
            }
        }
    }
    lambda.max(f64::MIN_POSITIVE)
}

/// Damped Newton for one backward Euler step. Returns the converged state
/// and records accepted-iterate operator evaluations into `traj` when
/// requested.
#[allow(clippy::too_many_arguments)]
fn newton_step(
    d: &OperatorDecomposition,
    mu: f64,
    s_old: &State,
    dt: f64,
    opts: &NewtonOpts,
    c_ref: f64,
    ws: &mut NewtonWorkspace,
    step: usize,
    record: Option<&mut Trajectory>,
) -> Result<State> {
    // scaling must follow the actual (possibly sub-)step size or the c-row
    // noise floor outgrows the tolerance at small dt
    let scaling = ResidualScaling::new(d, mu, c_ref, dt);
    let mut s = State {
        c: s_old.c.clone(),
        phi: s_old.phi.clone(),
        time: s_old.time + if dt.is_finite() { dt } else { 0.0 },
    };
    let mut record = record;
    let rhs_scaled = {
        let v: Vec<f64> = d
            .a_const
            .iter()
            .zip(&d.a_bnd)
            .map(|(c, b)| c + mu * b)
            .collect();
        scaling.scaled_norm(&v)
    };
    let target = opts.tol * rhs_scaled.max(1.0);
    // component weights for the affine-invariant step norm used by the
    // damped line search; concentrations and potentials live on wildly
    // different scales
    let phi_ref = s_old
        .phi
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let step_norm = |v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (i, x) in v.iter().enumerate() {
            let w = if i < d.layout.n_c { c_ref } else { phi_ref };
            acc += (x / w) * (x / w);
        }
        acc.sqrt()
    };
    // convergence is tested on the row-equivalent transformed system (see
    // `bv_eliminated_system`): the raw c-rows carry the Butler-Volmer flux,
    // whose evaluation noise (the open-circuit potential enters through a
    // catastrophic cancellation) sits far above any useful tolerance, while
    // in the transformed c-rows that noise cancels exactly
    let merit_scaling = ResidualScaling {
        c_scale: scaling.c_scale.max(scaling.phi_scale / d.consts.faraday),
        ..scaling
    };
    let mut r = d.apply_residual(mu, &s, s_old, dt)?;
    let mut tn = merit_scaling.scaled_norm(&transform_residual(d, &r));
    // best iterate seen so far: the line search follows the affine-invariant
    // level downhill, along which the physical residual is allowed to make
    // large transient excursions; near the hyper-stiff open-circuit cliff it
    // sometimes never comes back below an earlier iterate, and that earlier
    // iterate is then the one to return on a stall
    let mut s_best = s.clone();
    let mut tn_best = tn;
    for iter in 0..opts.max_iter {
        if tn < target {
            return Ok(s);
        }
        let jac = d.assemble_jacobian(mu, &s, dt)?;
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let (jac_t, neg_r_t) = bv_eliminated_system(d, &jac, &neg_r);
        // roundoff floor of the residual evaluation: every row is a sum of
        // terms of size |J_ij|·|x_j|, so no evaluation can be trusted below
        // eps times that. The potential block sits on a multi-kilovolt
        // open-circuit offset, which makes this floor far from zero.
        let tn_floor = {
            let mut fl = vec![0.0f64; d.n_total()];
            for (i, f) in fl.iter_mut().enumerate() {
                let (cols, vals) = jac_t.row(i);
                let mut acc = 0.0;
                for (&j, &v) in cols.iter().zip(vals) {
                    let refj = if j < d.layout.n_c { c_ref } else { phi_ref };
                    acc += v.abs() * refj;
                }
                *f = f64::EPSILON * acc;
            }
            merit_scaling.scaled_norm(&fl)
        };
        if tn <= 4.0 * tn_floor {
            return Ok(s);
        }
        let mut accepted = false;
        if std::env::var("BM_NOCHORD").is_ok() {
            ws.flu = None;
        }
        // Chord iteration: reuse the retained factorization first; if the
        // resulting direction cannot make progress, refactor from the
        // current Jacobian and retry once before declaring a stall.
        for _attempt in 0..2 {
            let fresh = ws.flu.is_none();
            if fresh {
                ws.flu = Some(EquilibratedLu::factor(&jac_t, &mut ws.rcm)?);
            }
            let flu = ws.flu.as_ref().unwrap();
            let delta = flu.solve(&neg_r_t);
            // natural (affine-invariant) level function: the Newton step for
            // the residual at the trial point, computed with the factorization
            // already at hand; unlike the raw residual norm it is insensitive
            // to the enormous curvature of the exchange-current rows
            let h0 = step_norm(&delta);
            // fraction-to-boundary rule: start the line search from the largest
            // step that keeps all concentrations strictly admissible, instead
            // of blindly halving against the admissibility wall
            let mut lambda = max_admissible_fraction(d, &s, &delta);
            let mut h_acc = f64::INFINITY;
            for _ in 0..=opts.max_halvings {
                let trial = State {
                    c: s.c.iter().zip(&delta).map(|(x, dx)| x + lambda * dx).collect(),
                    phi: s
                        .phi
                        .iter()
                        .zip(&delta[d.layout.n_c..])
                        .map(|(x, dx)| x + lambda * dx)
                        .collect(),
                    time: s.time,
                };
                if d.is_admissible(&trial) {
                    let r_trial = d.apply_residual(mu, &trial, s_old, dt)?;
                    let rt_trial = transform_residual(d, &r_trial);
                    let tn_trial = merit_scaling.scaled_norm(&rt_trial);
                    let neg_rt_trial: Vec<f64> = rt_trial.iter().map(|v| -v).collect();
                    let h_trial = step_norm(&flu.solve(&neg_rt_trial));
                    // a stale direction must contract decisively; otherwise
                    // fall through to a fresh factorization instead of
                    // creeping along at a chord rate near 1
                    let required = if fresh { 1.0 - 0.25 * lambda } else { 1.0 - 0.5 * lambda };
                    let ok = if std::env::var("BM_TN_MERIT").is_ok() {
                        tn_trial < required * tn
                    } else {
                        h_trial < required * h0
                    };
                    if ok || tn_trial < target {
                        s = trial;
                        r = r_trial;
                        tn = tn_trial;
                        accepted = true;
                        h_acc = h_trial;
                        if tn < tn_best {
                            s_best = s.clone();
                            tn_best = tn;
                        }
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if std::env::var("BM_NT").is_ok() {
                eprintln!(
                    "step {step} iter {iter} dt {dt:.2} fresh {fresh} acc {accepted} h0 {h0:.3e} h_acc {h_acc:.3e} lam {lambda:.3e} tn {tn:.3e} target {target:.3e} floor {tn_floor:.3e}"
                );
            }
            if accepted {
                // a stale factorization that contracts slowly is not worth
                // keeping for the next iteration
                if !fresh && h_acc > 0.25 * h0 {
                    ws.flu = None;
                }
                break;
            }
            if fresh {
                break;
            }
            ws.flu = None;
        }
        if !accepted {
            // the line search cannot make progress once the residual sits
            // at its evaluation floor, or once the near-singular exchange
            // current rows put the remaining correction below the state
            // granularity (h0 is then itself noise); both are convergence,
            // not failure
            let (tn_stall, s_stall) = if std::env::var("BM_STALL_CUR").is_ok() {
                (tn, &s)
            } else {
                (tn_best, &s_best)
            };
            if tn_stall <= 16.0 * tn_floor || tn_stall < opts.stall_tol * rhs_scaled.max(1.0) {
                return Ok(s_stall.clone());
            }
            return Err(BatteryError::NewtonFailure {
                step,
                iter,
                residual: tn_best,
            });
        }
        if let Some(traj) = record.as_deref_mut() {
            // skip iterates that tripped the sinh clamp; they are transients
            // far outside the admissible operating regime
            let (bv, clamped) = d.eval_bv(&s)?;
            if !clamped {
                let oc = d.eval_1c(&s)?;
                traj.stage_evals_1c.push(restrict(&oc, &d.outputs_1c));
                traj.stage_evals_bv.push(restrict(&bv, &d.outputs_bv));
            }
        }
    }
    if tn < target {
        Ok(s)
    } else if tn_best < opts.stall_tol * rhs_scaled.max(1.0) {
        Ok(s_best)
    } else {
        Err(BatteryError::NewtonFailure {
            step,
            iter: opts.max_iter,
            residual: tn_best,
        })
    }
}

/// Equilibrium-aware initial potential guess: Dirichlet value on the
/// negative side, OCP offsets on the positive side, zero in the
/// electrolyte.
pub fn equilibrium_phi_guess(d: &OperatorDecomposition, g: &MaterialGrid, c0: &[f64]) -> Vec<f64> {
    let mut phi = vec![0.0; d.layout.n_phi];
    // representative positive-electrode stoichiometry
    let s_pos = d
        .c_side
        .iter()
        .zip(c0)
        .find_map(|(side, &c)| match side {
            Some(ElectrodeSide::Pos) => Some(c / d.consts.c_max_pos),
            _ => None,
        })
        .unwrap_or(0.5);
    let u0_pos = open_circuit_potential(s_pos, ElectrodeSide::Pos).unwrap_or(0.0);
    for (cell, m) in g.material.iter().enumerate() {
        phi[cell] = match m {
            Material::NegCollector | Material::NegElectrode => d.phi_dirichlet,
            Material::PosCollector | Material::PosElectrode => u0_pos,
            Material::Electrolyte => 0.0,
        };
    }
    phi
}

/// Solves the potential rows of the system at fixed concentration
/// (consistent initialization of the DAE).
pub fn consistent_initial_potential(
    d: &OperatorDecomposition,
    mu: f64,
    c0: &[f64],
    phi_guess: &[f64],
    opts: &NewtonOpts,
) -> Result<Vec<f64>> {
    let n_c = d.layout.n_c;
    let n_phi = d.layout.n_phi;
    let mut phi = phi_guess.to_vec();
    let c_ref = c0.iter().sum::<f64>() / c0.len().max(1) as f64;
    let scaling = ResidualScaling::new(d, mu, c_ref, 1.0);
    let rhs_scaled = {
        let v: Vec<f64> = d
            .a_const
            .iter()
            .zip(&d.a_bnd)
            .map(|(c, b)| c + mu * b)
            .collect();
        scaling.scaled_norm(&v)
    };
    let target = opts.tol * rhs_scaled.max(1.0);
    let phi_res = |phi: &[f64]| -> Result<Vec<f64>> {
        let s = State {
            c: c0.to_vec(),
            phi: phi.to_vec(),
            time: 0.0,
        };
        Ok(d.apply_spatial(mu, &s)?[n_c..].to_vec())
    };
    let phi_norm = |r: &[f64]| -> f64 {
        (r.iter().map(|v| (v / scaling.phi_scale).powi(2)).sum::<f64>()).sqrt()
    };
    let mut rcm: Option<Vec<usize>> = None;
    let mut r = phi_res(&phi)?;
    let mut rn = phi_norm(&r);
    for iter in 0..opts.max_iter {
        if rn < target {
            let s = State {
                c: c0.to_vec(),
                phi,
                time: 0.0,
            };
            d.check_admissible(&s)?;
            return Ok(s.phi);
        }
        let s = State {
            c: c0.to_vec(),
            phi: phi.clone(),
            time: 0.0,
        };
        let full = d.assemble_jacobian(mu, &s, f64::INFINITY)?;
        // phi-phi block
        let mut jb = TripletBuilder::new(n_phi, n_phi);
        for i in 0..n_phi {
            let (cols, vals) = full.row(n_c + i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j >= n_c {
                    jb.add(i, j - n_c, v);
                }
            }
        }
        let jac = jb.build();
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = solve_equilibrated(&jac, &neg_r, &mut rcm)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = phi
                .iter()
                .zip(&delta)
                .map(|(x, dx)| x + lambda * dx)
                .collect();
            let r_trial = phi_res(&trial)?;
            let rn_trial = phi_norm(&r_trial);
            if rn_trial < rn || rn_trial < target {
                phi = trial;
                r = r_trial;
                rn = rn_trial;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(BatteryError::NewtonFailure {
                step: 0,
                iter,
                residual: rn,
            });
        }
    }
    if rn < target {
        Ok(phi)
    } else {
        Err(BatteryError::NewtonFailure {
            step: 0,
            iter: opts.max_iter,
            residual: rn,
        })
    }
}

/// Backward Euler time integration with damped Newton per step.
pub fn simulate(
    d: &OperatorDecomposition,
    g: &MaterialGrid,
    mu: f64,
    c0: &[f64],
    dt: f64,
    t_end: f64,
    opts: &NewtonOpts,
    record_stages: bool,
) -> Result<Trajectory> {
    if dt <= 0.0 || t_end <= 0.0 {
        return Err(BatteryError::Domain("dt and t_end must be positive".into()));
    }
    let n_steps = (t_end / dt).round() as usize;
    let phi_guess = equilibrium_phi_guess(d, g, c0);
    let phi0 = consistent_initial_potential(d, mu, c0, &phi_guess, opts)?;
    let s0 = State {
        c: c0.to_vec(),
        phi: phi0,
        time: 0.0,
    };
    d.check_admissible(&s0)?;
    let mut traj = Trajectory {
        mu,
        dt,
        states: Vec::with_capacity(n_steps + 1),
        stage_evals_1c: Vec::new(),
        stage_evals_bv: Vec::new(),
        substeps: 0,
    };
    if record_stages {
        let (bv, clamped) = d.eval_bv(&s0)?;
        if !clamped {
            let oc = d.eval_1c(&s0)?;
            traj.stage_evals_1c.push(restrict(&oc, &d.outputs_1c));
            traj.stage_evals_bv.push(restrict(&bv, &d.outputs_bv));
        }
    }
    let c_ref = c0.iter().sum::<f64>() / c0.len().max(1) as f64;
    let mut ws = NewtonWorkspace { rcm: None, flu: None };
    let mut current = s0.clone();
    traj.states.push(s0);
    // The first discharge steps are extremely stiff (the positive OCP
    // drops by tens of kV while its exponential term decays), so each
    // output interval is integrated with adaptive sub-stepping: halve the
    // internal step on Newton failure, re-double after successes. Output
    // states stay on the requested dt grid.
    const MAX_REFINE: u32 = 24;
    let mut refine: u32 = 0;
    for step in 0..n_steps {
        let t_target = (step + 1) as f64 * dt;
        loop {
            let remaining = t_target - current.time;
            if remaining <= 1e-9 * dt {
                break;
            }
            let dt_sub = (dt / f64::from(2u32.pow(refine))).min(remaining);
            let record = if record_stages { Some(&mut traj) } else { None };
            match newton_step(d, mu, &current, dt_sub, opts, c_ref, &mut ws, step, record) {
                Ok(next) => {
                    current = next;
                    traj.substeps += 1;
                    if refine > 0 {
                        refine -= 1;
                    }
                }
                Err(BatteryError::NewtonFailure { .. }) if refine < MAX_REFINE => {
                    refine = (refine + 2).min(MAX_REFINE);
                }
                Err(e) => return Err(e),
            }
        }
        current.time = t_target;
        traj.states.push(current.clone());
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Trajectory I/O
// ---------------------------------------------------------------------------

impl Trajectory {
    /// Binary dump: header + little-endian f64 DOF vectors per step.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"BMTRAJ01")?;
        let n_c = self.states.first().map_or(0, |s| s.c.len());
        let n_phi = self.states.first().map_or(0, |s| s.phi.len());
        for v in [n_c as u64, n_phi as u64, self.states.len() as u64] {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&self.mu.to_le_bytes())?;
        f.write_all(&self.dt.to_le_bytes())?;
        for s in &self.states {
            f.write_all(&s.time.to_le_bytes())?;
            for &v in s.c.iter().chain(&s.phi) {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Trajectory> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"BMTRAJ01" {
            return Err(BatteryError::Format("bad magic".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |f: &mut std::fs::File| -> Result<u64> {
            f.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n_c = read_u64(&mut f)? as usize;
        let n_phi = read_u64(&mut f)? as usize;
        let n_states = read_u64(&mut f)? as usize;
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |f: &mut std::fs::File| -> Result<f64> {
            f.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let mu = read_f64(&mut f)?;
        let dt = read_f64(&mut f)?;
        let mut states = Vec::with_capacity(n_states);
        for _ in 0..n_states {
            let time = read_f64(&mut f)?;
            let mut c = Vec::with_capacity(n_c);
            for _ in 0..n_c {
                c.push(read_f64(&mut f)?);
            }
            let mut phi = Vec::with_capacity(n_phi);
            for _ in 0..n_phi {
                phi.push(read_f64(&mut f)?);
            }
            states.push(State { c, phi, time });
        }
        Ok(Trajectory {
            mu,
            dt,
            states,
            stage_evals_1c: Vec::new(),
            stage_evals_bv: Vec::new(),
            substeps: 0,
        })
    }

    /// CSV summary: time, cell-averaged c per material, boundary voltage.
    pub fn write_summary_csv(&self, d: &OperatorDecomposition, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "time_s,avg_c_electrolyte,avg_c_neg_electrode,avg_c_pos_electrode,boundary_voltage_v"
        )?;
        for s in &self.states {
            let mut sums = [0.0f64; 3];
            let mut counts = [0usize; 3];
            for (i, m) in d.c_material.iter().enumerate() {
                let k = match m {
                    Material::Electrolyte => 0,
                    Material::NegElectrode => 1,
                    Material::PosElectrode => 2,
                    _ => continue,
                };
                sums[k] += s.c[i];
                counts[k] += 1;
            }
            let avg = |k: usize| {
                if counts[k] > 0 {
                    sums[k] / counts[k] as f64
                } else {
                    0.0
                }
            };
            let vb = if d.pos_boundary_cells.is_empty() {
                0.0
            } else {
                d.pos_boundary_cells.iter().map(|&c| s.phi[c]).sum::<f64>()
                    / d.pos_boundary_cells.len() as f64
            };
            writeln!(
                f,
                "{},{:.12e},{:.12e},{:.12e},{:.12e}",
                s.time,
                avg(0),
                avg(1),
                avg(2),
                vb
            )?;
        }
        Ok(())
    }
}
