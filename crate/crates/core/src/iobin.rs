//! Minimal binary container for offline artifacts (reduced bases and
//! empirical interpolation data): a fixed magic header followed by
//! length-prefixed little-endian f64/u64 blocks. Same style as the
//! trajectory format in the battery module.

use crate::linalg::DenseMatrix;
use crate::reduction::{EIData, ReducedBasis};
use std::io::{self, Read, Write};
use std::path::Path;

const BASIS_MAGIC: &[u8; 8] = b"BMBASIS1";
const EI_MAGIC: &[u8; 8] = b"BMEIDAT1";

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64_slice(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_u64_slice(w: &mut impl Write, v: &[u64]) -> io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64_slice(r: &mut impl Read) -> io::Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn read_u64_slice(r: &mut impl Read) -> io::Result<Vec<u64>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(u64::from_le_bytes(b));
    }
    Ok(out)
}

fn write_dense(w: &mut impl Write, m: &DenseMatrix) -> io::Result<()> {
    write_u64(w, m.rows as u64)?;
    write_u64(w, m.cols as u64)?;
    for j in 0..m.cols {
        for i in 0..m.rows {
            w.write_all(&m.get(i, j).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_dense(r: &mut impl Read) -> io::Result<DenseMatrix> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut m = DenseMatrix::zeros(rows, cols);
    let mut b = [0u8; 8];
    for j in 0..cols {
        for i in 0..rows {
            r.read_exact(&mut b)?;
            m.set(i, j, f64::from_le_bytes(b));
        }
    }
    Ok(m)
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn write_basis(path: &Path, b: &ReducedBasis) -> io::Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(BASIS_MAGIC)?;
    write_dense(&mut w, &b.modes)?;
    write_f64_slice(&mut w, &b.singular_values)?;
    w.flush()
}

pub fn read_basis(path: &Path) -> io::Result<ReducedBasis> {
    let mut r = io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BASIS_MAGIC {
        return Err(bad("not a basis file"));
    }
    Ok(ReducedBasis {
        modes: read_dense(&mut r)?,
        singular_values: read_f64_slice(&mut r)?,
    })
}

pub fn write_ei(path: &Path, ei: &EIData) -> io::Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(EI_MAGIC)?;
    write_u64(&mut w, ei.dim as u64)?;
    let dofs: Vec<u64> = ei.interp_dofs.iter().map(|&v| v as u64).collect();
    write_u64_slice(&mut w, &dofs)?;
    write_dense(&mut w, &ei.collateral)?;
    write_dense(&mut w, &ei.interp_matrix)?;
    write_u64(&mut w, ei.deps_per_point.len() as u64)?;
    for deps in &ei.deps_per_point {
        let d: Vec<u64> = deps.iter().map(|&v| v as u64).collect();
        write_u64_slice(&mut w, &d)?;
    }
    write_f64_slice(&mut w, &ei.greedy_errors)?;
    write_u64(&mut w, u64::from(ei.degenerate))?;
    w.flush()
}

pub fn read_ei(path: &Path) -> io::Result<EIData> {
    let mut r = io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != EI_MAGIC {
        return Err(bad("not an EI data file"));
    }
    let dim = read_u64(&mut r)? as usize;
    let interp_dofs: Vec<usize> = read_u64_slice(&mut r)?.into_iter().map(|v| v as usize).collect();
    let collateral = read_dense(&mut r)?;
    let interp_matrix = read_dense(&mut r)?;
    let n_deps = read_u64(&mut r)? as usize;
    let mut deps_per_point = Vec::with_capacity(n_deps);
    for _ in 0..n_deps {
        deps_per_point.push(
            read_u64_slice(&mut r)?
                .into_iter()
                .map(|v| v as usize)
                .collect::<Vec<usize>>(),
        );
    }
    let mut source_dofs: Vec<usize> = deps_per_point.iter().flatten().copied().collect();
    source_dofs.sort_unstable();
    source_dofs.dedup();
    let greedy_errors = read_f64_slice(&mut r)?;
    let degenerate = read_u64(&mut r)? != 0;
    Ok(EIData {
        dim,
        interp_dofs,
        collateral,
        interp_matrix,
        deps_per_point,
        source_dofs,
        greedy_errors,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|j| (0..5).map(|i| (i * 3 + j) as f64 * 0.25 - 1.0).collect())
            .collect();
        let b = ReducedBasis {
            modes: DenseMatrix::from_columns(5, &cols),
            singular_values: vec![3.0, 1.5, 0.25],
        };
        write_basis(&path, &b).unwrap();
        let back = read_basis(&path).unwrap();
        assert_eq!(back.singular_values, b.singular_values);
        for j in 0..3 {
            assert_eq!(back.modes.col(j), b.modes.col(j));
        }
    }

    #[test]
    fn ei_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ei.bin");
        let mut collateral = DenseMatrix::zeros(4, 2);
        let mut interp = DenseMatrix::zeros(2, 2);
        for i in 0..4 {
            collateral.set(i, 0, i as f64);
            collateral.set(i, 1, (i as f64).powi(2));
        }
        interp.set(0, 0, 1.0);
        interp.set(1, 0, 0.5);
        interp.set(1, 1, 1.0);
        let ei = EIData {
            dim: 4,
            interp_dofs: vec![2, 0],
            collateral,
            interp_matrix: interp,
            deps_per_point: vec![vec![7, 9], vec![1]],
            source_dofs: vec![1, 7, 9],
            greedy_errors: vec![1.0, 0.1],
            degenerate: true,
        };
        write_ei(&path, &ei).unwrap();
        let back = read_ei(&path).unwrap();
        assert_eq!(back.dim, 4);
        assert_eq!(back.interp_dofs, ei.interp_dofs);
        assert_eq!(back.deps_per_point, ei.deps_per_point);
        assert_eq!(back.source_dofs, ei.source_dofs);
        assert_eq!(back.greedy_errors, ei.greedy_errors);
        assert!(back.degenerate);
        assert_eq!(back.collateral.col(1), ei.collateral.col(1));
        assert_eq!(back.interp_matrix.get(1, 0), 0.5);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC00000000").unwrap();
        assert!(read_basis(&path).is_err());
        assert!(read_ei(&path).is_err());
    }
}
