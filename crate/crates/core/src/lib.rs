//! Finite integration discretisation of low-frequency Maxwell models on
//! tensor-product hexahedral grids, with the potential formulations, solvers
//! and diagnostics built on top of it.

// NaN must fail the validity checks, and index loops read better for the
// coupled sparse kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fields;
pub mod formulations;
pub mod grid;
pub mod materials;
pub mod operators;
pub mod oracle;
pub mod scenario;
pub mod solvers;
pub mod sparse;

pub use num_complex::Complex64 as C64;

pub use error::{Error, Result};
pub use formulations::{
    assemble, AssembledSystem, AssemblyOptions, Block, DofPartition, Drive, Excitation,
    FormulationId, NodeUnknown, NodeWeights, Potentials, StructureFlags, TdState, TdSymmetricStep,
};
pub use grid::{Axis, Grid, GridSpec};
pub use materials::{
    KappaHat, KappaHatPlacement, Material, MaterialBox, MaterialField, MaterialOptions,
};
pub use operators::{FitModel, Hodges, Incidence};
pub use solvers::{
    block_back_substitute, solve, solve_monolithic, Preconditioner, Solution, SolveReport,
    SolverMethod, SolverOptions,
};
pub use sparse::{CsrMatrix, TripletBuilder};
