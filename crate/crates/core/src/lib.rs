//! Solvers for the deterministic recombination equation on finite type spaces.
//!
//! The dynamics live on the lattice of set partitions of the site set. Three
//! independent routes compute the coefficient vector `a_t`: the recursive
//! closed form ([`closed_form`]), fixed-step integration of the coefficient
//! ODE ([`coefficient_dynamics`]), and Monte Carlo sampling of the
//! partitioning process ([`partitioning_process`]).

pub mod closed_form;
pub mod coefficient_dynamics;
pub mod error;
pub mod measures;
pub mod partition_lattice;
pub mod partitioning_process;

pub use closed_form::{ClosedFormSolution, DegeneracyReport};
pub use coefficient_dynamics::{CoefficientVector, RateSystem, Trajectory};
pub use error::{Error, Result};
pub use measures::{Measure, TypeSpace};
pub use partition_lattice::{GroundSet, IncidenceElement, Lattice, Partition};
