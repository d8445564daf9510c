pub mod colorspace;
pub mod error;
pub mod fpenv;
pub mod gradcheck;
pub mod io;
pub mod gradsuite;
pub mod graph;
pub mod icrr;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rcm;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Image32 = colorspace::ImageRgb<f32>;
pub type Image64 = colorspace::ImageRgb<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
