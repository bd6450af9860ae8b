//! Signal preprocessing for every modality.

pub mod features;
pub mod filter;
pub mod mfcc;
pub mod resample;
pub mod segment;

pub use features::{
    featurize, preprocess_ammg, preprocess_hybrid_audio, preprocess_mmg, FeatureTensor,
    InstanceFeatures, MFCC_INPUT_SAMPLES, MODEL_STEPS,
};
pub use filter::{butterworth_lowpass, filter_forward, FirstOrderIIR};
pub use mfcc::{mfcc_features, MfccConfig, MfccExtractor};
pub use resample::{endpoint_normalize, resample_antialiased, resample_to};
pub use segment::{detect_activity, ActivitySegment};
