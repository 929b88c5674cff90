//! Finite-volume lithium-ion battery microstructure simulation with
//! reduced-basis / empirical-interpolation model order reduction.
//!
//! The crate is organized around three model layers:
//!
//! * [`grid`] — voxel geometry with per-cell material labels, interface
//!   extraction and subdomain partitioning.
//! * [`battery`] — the nonlinear full-order battery model (Butler-Volmer
//!   kinetics, backward Euler / Newton time stepping) assembled as a
//!   decomposed operator suitable for empirical interpolation.
//! * [`heat`] — a parametric heat-conduction model on the same geometry,
//!   reduced either by a single global reduced basis or by localized
//!   per-subdomain bases coupled across subdomain interfaces.
//!
//! Generic reduction machinery (POD, EI-Greedy, Galerkin projection) lives
//! in [`reduction`]; the reduced battery model in [`rom`]. The `battmor`
//! binary drives the experiment studies from TOML config files.

pub mod battery;
pub mod config;
pub mod grid;
pub mod heat;
pub mod iobin;
pub mod linalg;
pub mod parallel;
pub mod reduction;
pub mod rom;
