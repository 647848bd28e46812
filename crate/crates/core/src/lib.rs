//! Construction and numerical verification of non-canonical Hamiltonian
//! structures for small explicit dynamical systems, plus the machinery the
//! structures feed: critical-point stability audits, reference integration,
//! and Hamilton-Jacobi reduction to quadratures and closed forms.
//!
//! The crate is organized around a registry of concrete systems (an
//! O(2)-symmetric normal form in cartesian and polar variables, a
//! polynomial-coupling system, and the free rigid-body top), each packaged
//! with closed-form flows, invariants, and symmetry vectors.

pub mod elliptic;
pub mod error;
pub mod fields;
pub mod hj;
pub mod ode;
pub mod poisson;
pub mod quadrature;
pub mod report;
pub mod stability;
pub mod systems;

pub use error::{Error, Result};
pub use fields::{ScalarField, StatePoint, TimeDependentVectorField, VectorField};
pub use systems::{ParameterSet, SystemDef, SystemId};
