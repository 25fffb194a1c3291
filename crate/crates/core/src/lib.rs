//! Two-stage cascade residual stereo matching on a self-contained CPU
//! autodiff engine, with the stereo operators, data formats, evaluation
//! metrics and a semi-global matching baseline around it.

pub mod certify;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod nn;
pub mod sgm;
pub mod stereo;
pub mod synth;
pub mod tensor;
pub mod training;

pub use dataset::StereoSample;
pub use error::{Error, Result};
pub use stereo::{CostVolume, DisparityMap};
pub use tensor::{ConvSpec, Precision, Shape, Tensor};
