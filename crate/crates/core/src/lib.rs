//! Image-based finite cell analysis of phase-field fracture in voxel models.
//!
//! The pipeline runs from a [`image::VoxelImage`] through an
//! [`grid::EmbeddedGrid`] and [`assembly::Discretization`] to the staggered
//! solver in [`solver`]. [`pipeline`] ties these together for a
//! configuration file; post-processing lives in [`postproc`].

pub mod assembly;
pub mod basis;
pub mod calibrate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod image;
pub mod material;
pub mod phantom;
pub mod pipeline;
pub mod postproc;
pub mod quadrature;
pub mod solver;
pub mod sparse;
pub mod surface;
pub mod vtk;

pub use error::{Error, Result};

/// Size the global rayon pool and the dense-kernel parallelism of the
/// sparse factorization. `None` keeps the rayon default. Returns the number
/// of threads in use. Fails if the global pool was already initialized with
/// a different size.
pub fn configure_threads(threads: Option<usize>) -> Result<usize> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            if rayon::current_num_threads() != n {
                return Err(Error::Config(format!("cannot resize the thread pool: {e}")));
            }
        }
    }
    let n = rayon::current_num_threads();
    faer::set_global_parallelism(if n > 1 { faer::Par::rayon(n) } else { faer::Par::Seq });
    Ok(n)
}
