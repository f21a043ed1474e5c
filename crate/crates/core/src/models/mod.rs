//! Local party networks, the global head, and the bottleneck layer.

mod checkpoint;
mod head;
mod mlp;
mod vib;

pub use checkpoint::Checkpoint;
pub use head::GlobalHead;
pub use mlp::{BoundMlp, Linear, MlpModel, MlpTrace};
pub use vib::{BoundVib, VibLayer, VibMode, VibOutput, LOG_VAR_BOUND};
