//! Speckle-robust style-transfer augmentation for ultrasound classification.
//!
//! The crate is organised as a stack: [`tensor`] kernels, the seeded
//! feature network in [`featnet`], style and content losses in
//! [`styleloss`], the transfer optimiser in [`nst`], relevance propagation
//! in [`lrp`], speckle-reducing diffusion in [`srad`], ring all-reduce
//! training in [`dist`], the benign/malignant classifier in [`classify`],
//! and the end-to-end [`pipeline`].

pub mod checksum;
pub mod classify;
pub mod dist;
pub mod error;
pub mod featnet;
pub mod image;
pub mod lrp;
pub mod nst;
pub mod pipeline;
pub mod srad;
pub mod styleloss;
pub mod tensor;

pub use error::{Error, Result};
