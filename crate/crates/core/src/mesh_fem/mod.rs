//! Discretized unit-square domain, P1 finite element assembly, and the
//! parameter-to-observable map of the steady heat-conduction problem.

mod assembly;
mod mesh;
mod pto;

pub use assembly::{
    assemble_system, boundary_mass, local_mass, local_stiffness, lumped_mass, mass_matrix,
    solve_state, stiffness_matrix, AssembledSystem,
};
pub use mesh::{build_unit_square_mesh, BoundaryEdge, BoundaryTag, Mesh};
pub use pto::{PtoOperator, DEFAULT_BIOT, DEFAULT_SENSOR_COUNT};
