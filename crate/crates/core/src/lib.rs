//! Compression toolkit for sets of 3D triangle meshes.
//!
//! The pipeline converts each mesh into a regular `K x K x K x 4` TSDF-Def
//! tensor (truncated signed distance plus a per-grid-point deformation),
//! regresses all tensors with a shared quantization-aware auto-decoder, and
//! entropy-codes the embedded features and decoder parameters into a single
//! bitstream. Decompression reverses the path and emits meshes plus
//! rate-distortion metrics.

pub mod bvh;
pub mod config;
pub mod container;
pub mod decoder;
pub mod error;
pub mod fit;
pub mod geom;
pub mod grid;
pub mod huffman;
pub mod kdtree;
pub mod mc;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod qdeepsdf;
pub mod quant;
pub mod render;
pub mod shapes;
pub mod train;

pub use error::Error;
pub use grid::{GridSpec, TsdfDefTensor};
pub use mesh::{SurfaceSamples, TriangleMesh};
pub use quant::QuantSpec;

pub type Result<T> = std::result::Result<T, Error>;
