//! Single-view partial body mesh generation and masked-autoencoder completion.
//!
//! The pipeline runs in two directions:
//!
//! * **Training**: a ground-truth body mesh is rendered by a virtual depth
//!   camera ([`camera`]), per-vertex visibility is ray cast, a random share of
//!   visible vertices is dropped and Gaussian noise is added ([`train`]).
//! * **Inference**: a depth map plus a dense UV map is lifted to a point cloud
//!   and matched to template vertices by UV nearest neighbour ([`matching`]),
//!   then the masked autoencoder ([`mae`]) completes the partial mesh.
//!
//! [`mesh`] holds the template with its coarsening, upsampling and joint
//! regressor; [`eval`] has the metrics and experiment harnesses.

pub mod camera;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod mae;
pub mod matching;
pub mod mesh;
pub mod nn;
pub mod obj;
pub mod tensor_file;
pub mod toy;
pub mod train;

pub use error::{Error, Result, TemplateError};
pub use mesh::{load_template, CoarseMesh, Point3, TemplateMesh};
