//! Synthetic text rendering and construction of the five-raster training
//! tuples, plus their on-disk manifest.

pub mod font;
mod manifest;
mod record;
mod render;

pub use manifest::{load_record, read_manifest, read_manifest_entries, write_manifest, ManifestEntry, MANIFEST_FILE};
pub use record::{
    build_record, build_record_with_mask, generate_dataset, generate_record, lexicon, mix_seed, record_id, split_of,
    test_ids, DatasetConfig, DatasetRecord, Split, TextSource, TextStyle,
};
pub use render::{
    glyph_scale, render_text_image, threshold_segmentation, InkPolarity, RenderStyle, LEGIBILITY_FLOOR, MAX_TEXT_LEN,
};
