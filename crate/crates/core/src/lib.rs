//! Multi-domain software fault isolation over an x86-64 subset.
//!
//! The pipeline is: [`instrumenter`] turns SASM assembly into a SIPB
//! [`image`], [`verifier`] statically checks the image, and [`runtime`]
//! executes verified images as isolated processes under a small LibOS.

pub mod analysis;
pub mod corpus;
pub mod image;
pub mod instrumenter;
pub mod isa;
pub mod runtime;
pub mod verifier;
