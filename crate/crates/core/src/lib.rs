//! Policy-sensitivity-guided data augmentation for pixel-based reinforcement learning.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] – tensors, conv/dense networks, Adam, gradient checking, checkpoints
//! * [`envs`] – a pixel reach environment with visual variations and tabular MDP oracles
//! * [`augment`] – shift, random conv, overlay, cutout, blur and masks
//! * [`lipschitz`] – per-pixel policy sensitivity (K-matrix), binarization and blending
//! * [`agent`] – soft actor-critic with the augmentation-regularized critic loss
//! * [`verify`] – exact checks of the Q-gap bounds on tabular MDPs
//! * [`pnm`], [`texture`] – PGM/PPM images and value-noise textures
//! * [`exec`], [`rng`] – the sequential/parallel switch and named seeded streams

pub mod error;
pub mod exec;
pub mod lipschitz;
pub mod numerics;
pub mod agent;
pub mod augment;
pub mod envs;
pub mod pnm;
pub mod rng;
pub mod texture;
pub mod verify;

pub use error::{Error, Result};
