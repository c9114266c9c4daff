//! Tensors, seeded random streams, the block low-pass projection and point-set geometry.

mod filter;
mod geometry;
mod rng;
mod tensor;

pub use filter::low_pass;
pub(crate) use geometry::sq_dist;
pub use geometry::{orthogonal_procrustes, pairwise_distances, upper_distances, PointSet, ProcrustesFit};
pub use rng::{gaussian_draw, gaussian_draw_scaled, RngStream};
pub use tensor::Tensor;
