//! Detector-free local feature matching at desk scale.
//!
//! The pipeline runs a small CNN+FPN backbone ([`backbone`]), a multi-scale
//! depthwise transition block ([`ftm`]), interleaved self/cross
//! vector-attention layers with rotary position encoding ([`slimformer`]),
//! dual-softmax coarse matching and window-level fine refinement
//! ([`matching`]). [`losses`] supplies the training objective, [`geometry`]
//! the homography algebra and evaluation metrics, [`synthetic`] a seeded
//! planar-scene generator, and [`model`]/[`train`] tie everything together.
//! All numerics run on the small reverse-mode engine in [`tensor`].

pub mod backbone;
pub mod bench;
pub mod error;
pub mod formats;
pub mod ftm;
pub mod geometry;
pub mod losses;
pub mod layers;
pub mod matching;
pub mod model;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod slimformer;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
