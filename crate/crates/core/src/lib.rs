//! Amortized Gaussian posterior estimation for elliptic Bayesian inverse
//! problems trained with the skew Jensen-Shannon objective.

// `!(x > 0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod encoder_net;
pub mod forward;
pub mod gauss_div;
pub mod gaussian;
pub mod laplace_baseline;
pub mod linalg;
pub mod linear_oracle;
pub mod mesh_fem;
pub mod prior;
pub mod scalar;
pub mod training;
pub mod uqvae_loss;

pub use error::{Error, Result};
pub use gaussian::{Covariance, GaussianDensity};
pub use forward::{ForwardMap, LinearMap};
pub use mesh_fem::{build_unit_square_mesh, Mesh, PtoOperator};
pub use scalar::Real;
pub use dataset::Dataset;
pub use encoder_net::{EncoderParams, Mlp};
pub use linear_oracle::{LinearGaussianProblem, LinearNetworks};
pub use experiment::ExperimentConfig;

pub type Mesh64 = Mesh<f64>;
pub type Mesh32 = Mesh<f32>;
pub type PtoOperator64 = PtoOperator<f64>;
pub type PtoOperator32 = PtoOperator<f32>;
pub type GaussianDensity64 = GaussianDensity<f64>;
pub type GaussianDensity32 = GaussianDensity<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type EncoderParams64 = EncoderParams<f64>;
pub type EncoderParams32 = EncoderParams<f32>;
pub type Mlp64 = Mlp<f64>;
pub type Mlp32 = Mlp<f32>;
pub type LinearGaussianProblem64 = LinearGaussianProblem<f64>;
pub type LinearGaussianProblem32 = LinearGaussianProblem<f32>;
