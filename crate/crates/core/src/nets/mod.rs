//! The trainable networks: feature extractor, feature adaptor, and cost
//! aggregator, with reverse-mode gradients and a finite-difference checker.

mod descriptor;
mod gradcheck;
mod model;
mod params;
mod program;

pub use descriptor::{
    AdaptorArch, AdaptorDesc, AggregatorDesc, ConvDims, FeatureDesc, LayerSpec, NetDescriptor,
};
pub use gradcheck::{
    generic_point, grad_check, relative_error, GradCheckOptions, GradCheckReport, ModelObjective, Objective,
};
pub use model::{Forward, HeadConfig, HeadOutput, ModelGrads, ModelInput, StereoModel};
pub use params::{init_params, Grads, Layer, NetParams};
pub use program::{upsample2, upsample2_backward, Program, Trace, LEAKY_SLOPE};
