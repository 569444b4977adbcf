pub mod error;
pub mod keymap;
pub mod merge_core;
pub mod runner;
pub mod tensor_store;
pub mod toy;

pub use error::{Error, HeaderError, Result, Stage};
pub use tensor_store::{CheckpointView, Dtype, TensorData, TensorMeta};

/// The guide's chapters, compiled as doc-tests so the book stays in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/task-vectors.md")]
    mod task_vectors {}
    #[doc = include_str!("../../../book/src/trimming.md")]
    mod trimming {}
    #[doc = include_str!("../../../book/src/sign-election.md")]
    mod sign_election {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/keymaps.md")]
    mod keymaps {}
    #[doc = include_str!("../../../book/src/recipes.md")]
    mod recipes {}
    #[doc = include_str!("../../../book/src/toy-bench.md")]
    mod toy_bench {}
}
