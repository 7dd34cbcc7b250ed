//! Joint rigid restacking of serial 2D sections and diffeomorphic mapping of
//! a 3D atlas onto the reconstructed volume.
//!
//! The observed data are 2D sections cut from a 3D object, each perturbed by
//! an unknown in-plane rigid motion. The estimator minimizes one energy over
//! the per-section motions and a time-varying velocity field:
//!
//! ```text
//! E(R, v) = 1/2 int ||v_t||_V^2 dt                       (flow prior)
//!         + 1/(2 s_JJ^2) sum_i ||D_z I^R(., z_i)||^2     (stack smoothness)
//!         + sum_i (th_i^2/(2 s_th^2) + |t_i|^2/(2 s_t^2)) (rigid prior)
//!         + sum_i alpha_i ||I^R(., z_i) - I0 o phi^-1(., z_i)||^2  (data)
//! ```
//!
//! where `I^R` is the restacked target and `I0 o phi^-1` the deformed atlas.
//! Minimization alternates dense diffeomorphic matching (`lddmm`) with joint
//! rigid-motion updates (`restack`); `joint` drives the alternation, and
//! `simulate` provides phantoms and the Monte-Carlo estimator-statistics
//! harness. File formats and the CLI live in `io` and `cli`.

pub mod cli;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod joint;
pub mod lddmm;
pub mod preprocess;
pub mod restack;
pub mod simulate;

pub use error::{Error, Result};
