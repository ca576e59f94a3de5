//! Part-aware image recognition pipeline at desk scale: a fully
//! convolutional part localizer, a two-stream (object + parts)
//! classifier with a shared-computation part-crop layer, keypoint
//! metrics, an incremental part-insertion training harness, and a
//! part-based report generator — all exercised on procedurally
//! generated data.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod localization;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
pub(crate) mod tests_support {
    pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }
}
