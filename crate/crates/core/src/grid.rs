//! Voxel geometry: material-labeled grids, synthetic porous-electrode
//! generation, interface extraction and subdomain partitioning.
//!
//! Cells are indexed x-fastest: `idx = (z * ny + y) * nx + x`. The layered
//! cell layout along x is: negative collector | negative electrode |
//! separator (electrolyte) | positive electrode | positive collector, with
//! seeded random electrolyte pores inside the electrode layers. A
//! deterministic repair pass restores phase connectivity when random pore
//! placement breaks it.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid geometry spec: {0}")]
    InvalidSpec(String),
    #[error("connectivity repair impossible: {0}")]
    ConnectivityFailure(String),
    #[error("invalid partition blocks: {0}")]
    InvalidBlocks(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad geometry file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Material {
    Electrolyte = 0,
    NegElectrode = 1,
    PosElectrode = 2,
    NegCollector = 3,
    PosCollector = 4,
}

impl Material {
    pub fn from_u8(v: u8) -> Option<Material> {
        match v {
            0 => Some(Material::Electrolyte),
            1 => Some(Material::NegElectrode),
            2 => Some(Material::PosElectrode),
            3 => Some(Material::NegCollector),
            4 => Some(Material::PosCollector),
            _ => None,
        }
    }

    pub fn is_electrode(self) -> bool {
        matches!(self, Material::NegElectrode | Material::PosElectrode)
    }

    pub fn is_collector(self) -> bool {
        matches!(self, Material::NegCollector | Material::PosCollector)
    }

    pub const ALL: [Material; 5] = [
        Material::Electrolyte,
        Material::NegElectrode,
        Material::PosElectrode,
        Material::NegCollector,
        Material::PosCollector,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElectrodeSide {
    Neg,
    Pos,
}

/// Voxel grid with one material label per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialGrid {
    pub dims: [usize; 3],
    /// Edge length per axis [cm].
    pub voxel_size: [f64; 3],
    pub material: Vec<Material>,
}

impl MaterialGrid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], material: Vec<Material>) -> Result<Self> {
        if dims[0] == 0 || dims[1] == 0 || dims[2] == 0 {
            return Err(GridError::InvalidSpec("zero dimension".into()));
        }
        if material.len() != dims[0] * dims[1] * dims[2] {
            return Err(GridError::InvalidSpec(format!(
                "label count {} does not match dims {:?}",
                material.len(),
                dims
            )));
        }
        Ok(MaterialGrid {
            dims,
            voxel_size,
            material,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let nx = self.dims[0];
        let ny = self.dims[1];
        (idx % nx, (idx / nx) % ny, idx / (nx * ny))
    }

    pub fn cell_volume(&self) -> f64 {
        self.voxel_size[0] * self.voxel_size[1] * self.voxel_size[2]
    }

    /// Area of a face normal to `axis` [cm^2].
    pub fn face_area(&self, axis: usize) -> f64 {
        match axis {
            0 => self.voxel_size[1] * self.voxel_size[2],
            1 => self.voxel_size[0] * self.voxel_size[2],
            _ => self.voxel_size[0] * self.voxel_size[1],
        }
    }

    /// Cell-center distance across a face normal to `axis` [cm].
    pub fn face_distance(&self, axis: usize) -> f64 {
        self.voxel_size[axis]
    }

    /// All internal faces as (cell, +axis neighbor, axis).
    pub fn internal_faces(&self) -> Vec<(usize, usize, usize)> {
        let [nx, ny, nz] = self.dims;
        let mut faces = Vec::with_capacity(3 * self.cell_count());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = self.index(x, y, z);
                    if x + 1 < nx {
                        faces.push((i, self.index(x + 1, y, z), 0));
                    }
                    if y + 1 < ny {
                        faces.push((i, self.index(x, y + 1, z), 1));
                    }
                    if z + 1 < nz {
                        faces.push((i, self.index(x, y, z + 1), 2));
                    }
                }
            }
        }
        faces
    }

    /// Face-adjacent neighbors of a cell.
    pub fn neighbors(&self, idx: usize) -> Vec<usize> {
        let (x, y, z) = self.coords(idx);
        let [nx, ny, nz] = self.dims;
        let mut nb = Vec::with_capacity(6);
        if x > 0 {
            nb.push(self.index(x - 1, y, z));
        }
        if x + 1 < nx {
            nb.push(self.index(x + 1, y, z));
        }
        if y > 0 {
            nb.push(self.index(x, y - 1, z));
        }
        if y + 1 < ny {
            nb.push(self.index(x, y + 1, z));
        }
        if z > 0 {
            nb.push(self.index(x, y, z - 1));
        }
        if z + 1 < nz {
            nb.push(self.index(x, y, z + 1));
        }
        nb
    }

    /// Cells carrying a given label.
    pub fn cells_with(&self, m: Material) -> Vec<usize> {
        (0..self.cell_count())
            .filter(|&i| self.material[i] == m)
            .collect()
    }

    /// Face-connected components within the set of cells labeled `m`.
    pub fn components(&self, m: Material) -> Vec<Vec<usize>> {
        let n = self.cell_count();
        let mut comp = vec![usize::MAX; n];
        let mut out = Vec::new();
        for start in 0..n {
            if self.material[start] != m || comp[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut cells = Vec::new();
            let mut queue = VecDeque::new();
            comp[start] = id;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                cells.push(u);
                for v in self.neighbors(u) {
                    if self.material[v] == m && comp[v] == usize::MAX {
                        comp[v] = id;
                        queue.push_back(v);
                    }
                }
            }
            out.push(cells);
        }
        out
    }

    /// Checks the MaterialGrid invariants; returns a description of the
    /// first violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let nx = self.dims[0];
        // collectors only at the min-x / max-x slabs
        for i in 0..self.cell_count() {
            let (x, _, _) = self.coords(i);
            match self.material[i] {
                Material::NegCollector if x >= nx / 2 => {
                    return Err(format!("NegCollector at x={x}"));
                }
                Material::PosCollector if x < nx / 2 => {
                    return Err(format!("PosCollector at x={x}"));
                }
                _ => {}
            }
        }
        // each electrode phase face-connected to its collector
        for (el, cc) in [
            (Material::NegElectrode, Material::NegCollector),
            (Material::PosElectrode, Material::PosCollector),
        ] {
            for comp in self.components(el) {
                let touches = comp.iter().any(|&c| {
                    self.neighbors(c).iter().any(|&v| self.material[v] == cc)
                });
                if !touches {
                    return Err(format!("{el:?} component of size {} detached from {cc:?}", comp.len()));
                }
            }
        }
        // electrolyte face-connected between the two electrode regions
        let comps = self.components(Material::Electrolyte);
        if comps.len() > 1 {
            return Err(format!("electrolyte split into {} components", comps.len()));
        }
        if let Some(comp) = comps.first() {
            for el in [Material::NegElectrode, Material::PosElectrode] {
                if !self.cells_with(el).is_empty() {
                    let touches = comp.iter().any(|&c| {
                        self.neighbors(c).iter().any(|&v| self.material[v] == el)
                    });
                    if !touches {
                        return Err(format!("electrolyte does not reach {el:?}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checksum over dims, voxel size and labels (used for trajectory cache
    /// keys and file identity checks).
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in self.dims {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.voxel_size {
            h.update(v.to_le_bytes());
        }
        h.update(self.material.iter().map(|&m| m as u8).collect::<Vec<u8>>());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"BMGEO001")?;
        for d in self.dims {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.voxel_size {
            f.write_all(&v.to_le_bytes())?;
        }
        let bytes: Vec<u8> = self.material.iter().map(|&m| m as u8).collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"BMGEO001" {
            return Err(GridError::Format("bad magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let mut voxel_size = [0f64; 3];
        for v in voxel_size.iter_mut() {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut bytes = vec![0u8; n];
        f.read_exact(&mut bytes)?;
        let material: Option<Vec<Material>> = bytes.iter().map(|&b| Material::from_u8(b)).collect();
        let material = material.ok_or_else(|| GridError::Format("bad material byte".into()))?;
        MaterialGrid::new(dims, voxel_size, material)
    }
}

// ---------------------------------------------------------------------------
// Synthetic geometry generation
// ---------------------------------------------------------------------------

/// Layered-geometry parameters for synthetic porous-electrode generation.
#[derive(Debug, Clone)]
pub struct GeometrySpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    /// Layer widths along x: [neg collector, neg electrode, separator,
    /// pos electrode, pos collector]. Must sum to dims[0].
    pub layers: [usize; 5],
    /// Fraction of electrode cells replaced by electrolyte pores, in [0, 0.6].
    pub porosity: f64,
    pub seed: u64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        // 26x10x10 cells of 4 um: 104um x 40um x 40um
        GeometrySpec {
            dims: [26, 10, 10],
            voxel_size: [4e-4, 4e-4, 4e-4],
            layers: [2, 9, 4, 9, 2],
            porosity: 0.3,
            seed: 7,
        }
    }
}

impl GeometrySpec {
    fn layer_material(&self, x: usize) -> Material {
        let mut acc = 0;
        for (w, m) in self.layers.iter().zip([
            Material::NegCollector,
            Material::NegElectrode,
            Material::Electrolyte,
            Material::PosElectrode,
            Material::PosCollector,
        ]) {
            acc += w;
            if x < acc {
                return m;
            }
        }
        unreachable!("x beyond layered extent")
    }

    /// x-range [lo, hi) of layer `k`.
    fn layer_range(&self, k: usize) -> (usize, usize) {
        let lo: usize = self.layers[..k].iter().sum();
        (lo, lo + self.layers[k])
    }
}

/// Generates a layered grid with seeded random electrolyte pores in the
/// electrodes. Deterministic for a fixed seed; a repair pass (straight pore
/// channels toward the separator, dead electrode cells flooded) restores
/// connectivity when needed.
pub fn generate_synthetic_geometry(spec: &GeometrySpec) -> Result<MaterialGrid> {
    let [nx, ny, nz] = spec.dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(GridError::InvalidSpec("zero dimension".into()));
    }
    if spec.layers.iter().sum::<usize>() != nx {
        return Err(GridError::InvalidSpec(format!(
            "layer widths {:?} do not sum to nx = {nx}",
            spec.layers
        )));
    }
    if !(0.0..=0.6).contains(&spec.porosity) {
        return Err(GridError::InvalidSpec(format!(
            "porosity {} outside [0, 0.6]",
            spec.porosity
        )));
    }
    if spec.layers[2] == 0 {
        return Err(GridError::InvalidSpec("separator layer must be nonempty".into()));
    }
    let n = nx * ny * nz;
    let mut material = Vec::with_capacity(n);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let _ = (y, z);
                material.push(spec.layer_material(x));
            }
        }
    }
    // seeded pore placement, deterministic cell order
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for m in material.iter_mut() {
        if m.is_electrode() && rng.gen::<f64>() < spec.porosity {
            *m = Material::Electrolyte;
        }
    }
    let mut grid = MaterialGrid::new(spec.dims, spec.voxel_size, material)?;
    repair_connectivity(&mut grid, spec)?;
    grid.check_invariants()
        .map_err(GridError::ConnectivityFailure)?;
    Ok(grid)
}

fn repair_connectivity(grid: &mut MaterialGrid, spec: &GeometrySpec) -> Result<()> {
    let (sep_lo, sep_hi) = spec.layer_range(2);
    for _pass in 0..16 {
        if grid.check_invariants().is_ok() {
            return Ok(());
        }
        // 1. carve straight x-channels from stranded electrolyte pores
        //    toward the separator
        let comps = grid.components(Material::Electrolyte);
        let main = comps.iter().position(|c| {
            c.iter().any(|&i| {
                let (x, _, _) = grid.coords(i);
                x >= sep_lo && x < sep_hi
            })
        });
        let main = match main {
            Some(m) => m,
            None => {
                return Err(GridError::ConnectivityFailure(
                    "no electrolyte in the separator layer".into(),
                ))
            }
        };
        for (ci, comp) in comps.iter().enumerate() {
            if ci == main {
                continue;
            }
            let &seed_cell = comp.iter().min().unwrap();
            let (x0, y, z) = grid.coords(seed_cell);
            let step: isize = if x0 < sep_lo { 1 } else { -1 };
            let mut x = x0 as isize;
            // walk all the way to the separator, passing through any
            // electrolyte already on the path (it joins the channel)
            loop {
                x += step;
                if x < 0 || x as usize >= grid.dims[0] {
                    break;
                }
                let xi = x as usize;
                if xi >= sep_lo && xi < sep_hi {
                    break;
                }
                let i = grid.index(xi, y, z);
                if grid.material[i].is_collector() {
                    break;
                }
                grid.material[i] = Material::Electrolyte;
            }
        }
        // 2. flood stranded electrode cells (no path to their collector)
        for (el, cc) in [
            (Material::NegElectrode, Material::NegCollector),
            (Material::PosElectrode, Material::PosCollector),
        ] {
            for comp in grid.components(el) {
                let touches = comp.iter().any(|&c| {
                    grid.neighbors(c).iter().any(|&v| grid.material[v] == cc)
                });
                if !touches {
                    for &c in &comp {
                        grid.material[c] = Material::Electrolyte;
                    }
                }
            }
        }
    }
    grid.check_invariants().map_err(GridError::ConnectivityFailure)
}

// ---------------------------------------------------------------------------
// Interfaces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvFace {
    pub electrode_cell: usize,
    pub electrolyte_cell: usize,
    pub area: f64,
    pub side: ElectrodeSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    NegCollectorBoundary,
    PosCollectorBoundary,
    OuterNeumann,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub axis: usize,
    /// true for the +axis side of the cell
    pub positive_side: bool,
    pub area: f64,
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone, Default)]
pub struct InterfaceSet {
    pub bv_faces: Vec<BvFace>,
    /// (collector cell, electrode cell, area) with matching polarity.
    pub collector_electrode_faces: Vec<(usize, usize, f64)>,
    pub boundary_faces: Vec<BoundaryFace>,
}

impl InterfaceSet {
    pub fn boundary_with(&self, tag: BoundaryTag) -> impl Iterator<Item = &BoundaryFace> {
        self.boundary_faces.iter().filter(move |f| f.tag == tag)
    }
}

/// Collects Butler-Volmer interfaces, collector/electrode contacts and
/// tagged external boundary faces. The negative (positive) collector
/// terminal is the x-min (x-max) face of the respective collector cells;
/// all other external faces are homogeneous Neumann.
pub fn extract_interfaces(g: &MaterialGrid) -> InterfaceSet {
    let mut set = InterfaceSet::default();
    for (a, b, axis) in g.internal_faces() {
        let area = g.face_area(axis);
        let (ma, mb) = (g.material[a], g.material[b]);
        let pair = |x: Material, y: Material| (ma == x && mb == y) || (ma == y && mb == x);
        if pair(Material::NegElectrode, Material::Electrolyte)
            || pair(Material::PosElectrode, Material::Electrolyte)
        {
            let (ec, lc) = if ma == Material::Electrolyte { (b, a) } else { (a, b) };
            let side = if g.material[ec] == Material::NegElectrode {
                ElectrodeSide::Neg
            } else {
                ElectrodeSide::Pos
            };
            set.bv_faces.push(BvFace {
                electrode_cell: ec,
                electrolyte_cell: lc,
                area,
                side,
            });
        } else if pair(Material::NegCollector, Material::NegElectrode)
            || pair(Material::PosCollector, Material::PosElectrode)
        {
            let (cc, ec) = if ma.is_collector() { (a, b) } else { (b, a) };
            set.collector_electrode_faces.push((cc, ec, area));
        }
    }
    let [nx, ny, nz] = g.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.index(x, y, z);
                let mut push = |axis: usize, positive_side: bool| {
                    let tag = if axis == 0
                        && !positive_side
                        && g.material[i] == Material::NegCollector
                    {
                        BoundaryTag::NegCollectorBoundary
                    } else if axis == 0
                        && positive_side
                        && g.material[i] == Material::PosCollector
                    {
                        BoundaryTag::PosCollectorBoundary
                    } else {
                        BoundaryTag::OuterNeumann
                    };
                    set.boundary_faces.push(BoundaryFace {
                        cell: i,
                        axis,
                        positive_side,
                        area: g.face_area(axis),
                        tag,
                    });
                };
                if x == 0 {
                    push(0, false);
                }
                if x == nx - 1 {
                    push(0, true);
                }
                if y == 0 {
                    push(1, false);
                }
                if y == ny - 1 {
                    push(1, true);
                }
                if z == 0 {
                    push(2, false);
                }
                if z == nz - 1 {
                    push(2, true);
                }
            }
        }
    }
    set
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Partition {
    pub blocks: [usize; 3],
    pub n_subdomains: usize,
    pub cell_to_subdomain: Vec<usize>,
    pub subdomain_cells: Vec<Vec<usize>>,
    /// Inter-subdomain faces keyed by (min sub, max sub).
    pub coupling_faces: Vec<((usize, usize), Vec<(usize, usize, usize)>)>,
}

/// Near-even axis split: the first `n % b` blocks get one extra cell.
fn axis_split(n: usize, b: usize) -> Vec<(usize, usize)> {
    let base = n / b;
    let rem = n % b;
    let mut out = Vec::with_capacity(b);
    let mut lo = 0;
    for k in 0..b {
        let w = base + usize::from(k < rem);
        out.push((lo, lo + w));
        lo += w;
    }
    out
}

pub fn partition_subdomains(g: &MaterialGrid, blocks: [usize; 3]) -> Result<Partition> {
    for ax in 0..3 {
        if blocks[ax] == 0 || blocks[ax] > g.dims[ax] {
            return Err(GridError::InvalidBlocks(format!(
                "axis {ax}: {} blocks for dimension {}",
                blocks[ax], g.dims[ax]
            )));
        }
    }
    let splits: Vec<Vec<(usize, usize)>> =
        (0..3).map(|ax| axis_split(g.dims[ax], blocks[ax])).collect();
    let block_of = |coord: usize, ax: usize| -> usize {
        splits[ax]
            .iter()
            .position(|&(lo, hi)| coord >= lo && coord < hi)
            .unwrap()
    };
    let n_subdomains = blocks[0] * blocks[1] * blocks[2];
    let mut cell_to_subdomain = vec![0usize; g.cell_count()];
    let mut subdomain_cells = vec![Vec::new(); n_subdomains];
    for i in 0..g.cell_count() {
        let (x, y, z) = g.coords(i);
        let s = (block_of(z, 2) * blocks[1] + block_of(y, 1)) * blocks[0] + block_of(x, 0);
        cell_to_subdomain[i] = s;
        subdomain_cells[s].push(i);
    }
    let mut coupling: std::collections::BTreeMap<(usize, usize), Vec<(usize, usize, usize)>> =
        Default::default();
    for (a, b, axis) in g.internal_faces() {
        let (sa, sb) = (cell_to_subdomain[a], cell_to_subdomain[b]);
        if sa != sb {
            coupling
                .entry((sa.min(sb), sa.max(sb)))
                .or_default()
                .push((a, b, axis));
        }
    }
    Ok(Partition {
        blocks,
        n_subdomains,
        cell_to_subdomain,
        subdomain_cells,
        coupling_faces: coupling.into_iter().collect(),
    })
}

impl Partition {
    /// Pairs of adjacent subdomains (those sharing at least one face).
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        self.coupling_faces.iter().map(|&(p, _)| p).collect()
    }
}
