//! Transient adjoint sensitivity analysis of circuits, with parareal
//! parallel-in-time acceleration of the forward and adjoint solves.
//!
//! The pipeline is: [`netlist`] → [`mna`] assembly → [`transient`] forward
//! solve → [`adjoint`] backward solves per analyzed instant (optionally
//! through [`parareal`]) → [`spectral`] post-processing. [`bench`] holds the
//! speedup/efficiency arithmetic and the benchmark driver.

// NaN-rejecting guards are written as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod bench;
pub mod mna;
pub mod netlist;
pub mod parareal;
pub mod sparse;
pub mod spectral;
pub mod transient;
pub mod waveform;

pub(crate) mod csv;
