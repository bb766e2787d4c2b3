//! Multi-turn, multi-subject image generation: subject registry, prompt-driven
//! agents, layout rulebook, subject-aware attention and a toy latent drawer.

pub mod agents;
pub mod attention;
pub mod drawer;
pub mod engine;
mod fsutil;
pub mod layout;
pub mod lexicon;
pub mod registry;
pub mod seed;
pub mod tensor;

pub use layout::{BoundingBox, FrameSize, LayoutEntry, RawLayout};
pub use registry::{SubjectDatabase, SubjectId};
pub use tensor::{BinaryMask, LatentTensor, Matrix};
