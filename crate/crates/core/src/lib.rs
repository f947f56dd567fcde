//! Speech-driven 3D facial animation with per-speaker style adaptation.
//!
//! The pipeline: audio features are resampled to the motion frame rate and
//! projected to 64-dim embeddings ([`audio`]); an autoregressive transformer
//! turns them into speaker-independent viseme features ([`viseme`]); a motion
//! decoder combines visemes with a 64-dim style embedding and maps them
//! through a linear deformation basis to per-vertex displacements
//! ([`motion`]). Training and two-stage style adaptation live in [`train`],
//! the losses and automatic lip-closure labels in [`supervision`], metrics in
//! [`metrics`], and a procedural multi-speaker corpus with known ground truth
//! in [`oracle`].

pub mod audio;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod numerics;
pub mod oracle;
pub mod supervision;
pub mod train;
pub mod viseme;

pub use error::{Error, Result};
pub use exec::Exec;
