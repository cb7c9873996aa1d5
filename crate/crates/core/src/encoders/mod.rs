//! The three conditioning streams: lip motion, text and speaker identity.

pub mod speaker;
pub mod textual;
pub mod visual;

pub use speaker::{speaker_lookup, SpeakerEmbedding, SpeakerTable};
pub use textual::{text_encode, TextEncoder, TextualEmbedding};
pub use visual::{lip_encode, LipEncoder, VisualEmbedding};
