//! Synthetic generators, metrics and the experiment protocols.

pub mod metrics;
pub mod protocol;
pub mod synth;

pub use metrics::{dataset_rmse, dataset_rmse_over, matrix_rmse, predictions, relative_error, rmse};
pub use protocol::{run_protocol, ProtocolId, ProtocolOptions, Report, ReportRow};
pub use synth::{
    gen_augmented, gen_augmented_multiview, gen_bias_only, gen_circular, AugmentedData, AugmentedSpec,
    BiasSynthData, BiasSynthSpec, CircularSynthSpec, GroundTruth, Kernel, ProximitySpec, SynthData,
};
