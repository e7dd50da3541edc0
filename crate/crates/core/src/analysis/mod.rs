//! Energy, velocity and ablation analyses over trained or synthetic runs.

mod ablation;
mod energy;
mod velocity;

pub use ablation::{ablation_run, mean_std, AblationArm, AblationCell, AblationRow, AblationTable, RunPlan};
pub use energy::{
    decomposition_weights, dirichlet_energy, energy_derivative_decomposition, energy_trace, laplacian_energy,
    model_energy_trace, EnergyDerivative, EnergyTrace,
};
pub use velocity::{average_ranks, embedding_csv, spearman, velocity_stats, VelocityReport};
