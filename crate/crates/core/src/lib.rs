//! Goal-oriented 3D semantic communication at desk scale.
//!
//! The crate covers the whole link: a synthetic multi-view scene and
//! oracle renderer ([`scene_io`]), a small radiance field
//! ([`radiance_field`]), prompt-driven 3D object extraction
//! ([`object_lifter`]), a masked transformer semantic codec
//! ([`semantic_codec`]), fading channel simulation ([`channel`]),
//! classical and generative channel estimation ([`csi_estimation`]),
//! evaluation metrics ([`metrics`]) and end-to-end orchestration
//! ([`pipeline`]).
//!
//! Learned components are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pin the common choices.

pub mod channel;
pub mod checkpoint;
pub mod csi_estimation;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod object_lifter;
pub mod pipeline;
pub mod radiance_field;
pub mod raster;
pub mod scalar;
pub mod scene_io;
pub mod semantic_codec;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Field32 = radiance_field::RadianceField<f32>;
pub type Field64 = radiance_field::RadianceField<f64>;
pub type Codec32 = semantic_codec::SemanticCodec<f32>;
pub type Codec64 = semantic_codec::SemanticCodec<f64>;
pub type Dataset32 = scene_io::MultiViewDataset<f32>;
pub type Dataset64 = scene_io::MultiViewDataset<f64>;
pub type Gdce32 = csi_estimation::GdceModels<f32>;
pub type Gdce64 = csi_estimation::GdceModels<f64>;
pub type Link32 = pipeline::LinkContext<f32>;
pub type Link64 = pipeline::LinkContext<f64>;
