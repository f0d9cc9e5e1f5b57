//! Numerical kernel for quasi-periodic solutions of forced NLW/NLS equations.
//!
//! The library is organised around a scale of weighted sequence spaces indexed
//! by time-Fourier/space-lattice sites, block matrices with off-diagonal decay
//! norms, a constructive multiscale inversion for truncated linearized
//! operators, and a Nash-Moser iteration on top of it.  Parameter diagnostics
//! (Diophantine checks, interval covers, Cantor-set scans) live in
//! `cantor_measure`.

pub mod index_space;
pub mod spectral_model;
pub mod decay_matrix;
pub mod linearized_operator;
pub mod multiscale;
pub mod pde_instances;
pub mod nash_moser;
pub mod cantor_measure;

pub use num_complex::Complex64;
