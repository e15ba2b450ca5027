//! Synthetic datasets and analytic oracles, with the MMD metric used to
//! score samples.

mod datasets;
mod mmd;
mod oracle;
mod residuals;

pub use datasets::{helix_point, make_helix, make_s2_mixture, uniform_samples, HelixDataset, HELIX_JITTER};
pub use mmd::{geodesic_rbf, median, mmd, noise_floor, to_array, MmdValue, NoiseFloor};
pub use oracle::{ode_reference_flow, ConstantField, CorruptedField, OdeScheme, RotationFlowOracle};
pub use residuals::{
    identity_residuals, target_variance_probe, ResidualReport, ResidualSample, VarianceBucket, VarianceProbe,
};

#[cfg(test)]
mod tests;
