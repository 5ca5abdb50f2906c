//! Joint speech and gesture synthesis at desk scale.

pub mod artifact;
pub mod backbone;
pub mod corpus;
pub mod error;
pub mod flow;
pub mod interleave;
pub mod metrics;
pub mod motion;
pub mod rotation;
pub mod rvq;
pub mod speech;
pub mod text;

pub use error::{Error, Result};
pub use gelina_tensor::Scalar;

pub type Motion32 = motion::MotionSequence<f32>;
pub type Motion64 = motion::MotionSequence<f64>;
pub type GestureTokenizer32 = rvq::GestureTokenizer<f32>;
pub type GestureTokenizer64 = rvq::GestureTokenizer<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type FlowNet32 = flow::FlowNet<f32>;
pub type FlowNet64 = flow::FlowNet<f64>;
pub type Rotation32 = rotation::RotationMatrix<f32>;
pub type Rotation64 = rotation::RotationMatrix<f64>;
