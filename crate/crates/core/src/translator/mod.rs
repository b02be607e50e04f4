//! Unpaired content/style translation between the two modalities and
//! synthesis of a labelled target-style training set.

pub mod kl;
pub mod model;
pub mod synth;
pub mod train;

pub use kl::kl_to_standard_normal;
pub use model::{Domain, TranslatorArch, TranslatorModel};
pub use synth::{synthesize_dataset, synthesize_volume};
pub use train::{reconstruction_l1, train_translator, TranslatorLog};
