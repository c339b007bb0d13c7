//! Camera-guided drone pursuit with a DDPG learner.
//!
//! The numeric building blocks (`geom`, `perception`, `nn`) are generic over the scalar;
//! everything from the environment upward runs in `f64`.

pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod ddpg;
pub mod env;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod perception;
pub mod scalar;
pub mod sim;
pub mod trainer;

pub use scalar::Scalar;

pub type Vec3 = geom::Vec3<f64>;
pub type BoundingBox = perception::BoundingBox<f64>;
pub type CameraModel = perception::CameraModel<f64>;
pub type Tensor = nn::Tensor2<f64>;
pub type Network = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;
