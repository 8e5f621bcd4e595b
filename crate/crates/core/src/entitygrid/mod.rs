//! Synthetic benchmark of entities placed on a 3x3 lattice of a `2R x 2R`
//! canvas, with multiple-choice questions and position-resolved scoring.

pub mod corpus;
pub mod entities;
pub mod eval;
pub mod font;
pub mod qa;
pub mod render;

pub use corpus::{
    generate_items, load_corpus, render_item, write_corpus, CorpusConfig, CorpusManifest,
};
pub use entities::{catalog, pool, EntityKind, EntitySpec, Primitive};
pub use eval::{evaluate, perfect_oracle, probe_positions, EvalReport};
pub use qa::{gen_qa, sample_entities, Draw, EntityRef, QAItem, Task};
pub use render::{position_centers, render_image, Placement, CENTER_POSITIONS, EDGE_POSITIONS};
