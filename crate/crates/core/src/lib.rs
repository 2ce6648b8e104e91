//! Fully sparse 3D object detection on synthetic desk-scale LiDAR scenes.
//!
//! The crate implements two detectors over raw point clouds:
//!
//! * a clustering baseline that connects voted object centers into
//!   instances and extracts one box per cluster, and
//! * a virtual-voxel pipeline that voxelizes the union of raw points and
//!   voted centers, so empty object interiors still receive features and
//!   instance-level clustering disappears entirely.
//!
//! Everything runs on CPU on top of a small reverse-mode autodiff engine
//! ([`autodiff`]) and hash-based sparse convolutions ([`sparse`]). The
//! numeric core is generic over the scalar type via [`Scalar`]; the
//! pipeline itself is pinned to [`Real`] (`f64`) through the aliases
//! below.

pub mod assign;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod fsd1;
pub mod geom;
pub mod head;
pub mod mixer;
pub mod model;
pub mod scalar;
pub mod scene;
pub mod segvote;
pub mod sir;
pub mod sparse;
pub mod vvoxel;

pub use scalar::Scalar;

/// Scalar type used by the end-to-end pipeline.
pub type Real = f64;
/// Dynamic-rank tensor over [`Real`].
pub type Tensor = ndarray::ArrayD<Real>;
/// Autodiff graph over [`Real`].
pub type RealGraph = autodiff::Graph<Real>;
/// Parameter store over [`Real`].
pub type RealParams = autodiff::ParamStore<Real>;
