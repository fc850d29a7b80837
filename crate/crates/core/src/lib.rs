//! Principal components of functions and covariance operators that are only
//! observed through noisy linear forward operators, discretized with P1
//! surface finite elements on closed triangulated surfaces.

pub mod covpca;
pub mod error;
pub mod fem;
pub mod funcpca;
pub mod io;
pub mod mesh;
pub mod operator;
pub mod regsel;
pub mod solve;
pub mod sparse;
pub mod synth;

pub use covpca::{
    energy_map, fit_population_cov, fit_subject_cov, reconstruct_cov, sqrt_decompose, CovPcResult, CovSample,
};
pub use error::{Error, Result};
pub use fem::{assemble, gradient_energy, l2_inner, penalty_apply, Coefficients, FemSystem};
pub use mesh::{load_mesh, make_icosphere, mesh_stats, write_mesh, MeshFormat, MeshStats, TriMesh};
pub use funcpca::{
    deflate, fit_from_sensor_cov, fit_pc, fit_pca, update_component, update_scores, FitConfig,
    FunctionalDataset, Operators, PcBasis, PcComponent,
};
pub use operator::ForwardOperator;
pub use solve::{SolveMethod, SolveReport, SolverOptions};
pub use synth::{
    fidelity_gradient_error, gen_cov_dataset, gen_functional_dataset, kendall_tau, make_orthonormal_basis,
    naive_two_step, OperatorSpec, SynthSpec,
};
pub use regsel::{kfold_cv, lcurve, LambdaReport};
