//! Automated cardiac-MRI oblique-plane prescription at desk scale.
//!
//! The crate covers the full offline pipeline: volume I/O, Rician noise
//! injection to controlled SNR, graph-based segmentation, anatomy feature
//! extraction, plane geometry, epsilon-SVR models, NSGA-II feature/complexity
//! search, patient-grouped cross-validation and a synthetic phantom
//! population that stands in for clinical data.

pub mod error;
pub mod features;
pub mod geometry;
pub mod noise;
pub mod phantom;
pub mod pipeline;
pub mod search;
pub mod segmentation;
pub mod svr;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{PlaneAngles, UnitVector3};
pub use volume::{BoxRoi, PhysicalPoint, Volume, VolumeMeta};
