//! Text-guided cross-view geo-localization as parameter-efficient adaptation
//! of a small unified encoder: LoRA-adapted contrastive training, three
//! pooling strategies, exact retrieval and geo-aware evaluation.

pub mod datagen;
pub mod encoder;
pub mod geoeval;
pub mod gradsuite;
pub mod lora;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod pooling;
pub mod retrieval;
pub mod trainer;

mod embedding;

pub use embedding::{Embedding, EmbeddingError};
pub use geoeval::{EvalReport, GeoPoint};
pub use model::Model;
pub use numcore::Matrix;
