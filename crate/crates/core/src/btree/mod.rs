//! Foster B-tree: node format, operations and offline verification.

pub mod node;
mod tree;
pub mod verify;

pub use verify::TreeReport;
