//! Energy-conserving HBVM(k,s) integrators whose stage equations are solved
//! as low-rank Sylvester matrix equations.

pub mod matrix_equations;
pub mod newton_krylov;
pub mod problems;
pub mod integrator;
pub mod tableau;

pub use matrix_equations::{
    krylov_sylvester_extended, krylov_sylvester_poly, lowrank_factor, solve_sylvester_dense, KrylovSolution,
    KrylovStats, LowRankFactors, SylvesterError, SylvesterProblem,
};
pub use tableau::{HbvmTableau, TableauError};
