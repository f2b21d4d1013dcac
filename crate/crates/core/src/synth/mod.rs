//! Synthetic deformed-glyph corpus standing in for real LR/HR text pairs.

pub mod corpus;
pub mod degrade;
pub mod font;
pub mod pnm;
pub mod render;
pub mod warp;

pub use corpus::{
    generate_corpus, generate_sample, load_corpus, Corpus, CorpusManifest, GlyphSample, Split,
};
pub use degrade::{bicubic_upsample, degrade_to_lr, DegradeConfig};
pub use render::{render_glyph_image, GlyphStyle, Rendered};
pub use warp::{apply_deformation, deform_image, DeformationSpec};
