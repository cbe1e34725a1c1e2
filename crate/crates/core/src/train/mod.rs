//! Synthetic data, augmentation and the teacher–student training loop.

pub mod augment;
pub mod synth;
pub mod trainer;

pub use augment::Dihedral;
pub use synth::{gen_dataset, gen_scene, SynthConfig};
pub use trainer::*;
