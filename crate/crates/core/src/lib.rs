//! Voice and accent joint conversion with adversarial speaker
//! disentanglement, exercised on a synthetic accented-speech world whose
//! content, speaker and accent factors are known.

pub mod codec;
pub mod corpus;
pub mod eval;
pub mod pipeline;
pub mod error;
pub mod recognizer;
pub mod rngs;
pub mod system;
pub mod train;
pub mod vc;
pub mod kernel;

pub use error::{Error, Result};
pub use system::SystemId;
