pub mod block_system;
pub mod galerkin_assembly;
pub mod kernel_weights;
pub mod mesh;
pub mod potential_eval;
pub mod quadrature;
pub mod reference;
pub mod solvers;
pub mod temporal_basis;
