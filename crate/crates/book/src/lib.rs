//! The guide's chapters, included so their code listings run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/prior.md")]
pub mod prior {}
#[doc = include_str!("../../../book/src/scores.md")]
pub mod scores {}
#[doc = include_str!("../../../book/src/stopping.md")]
pub mod stopping {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/warm_start.md")]
pub mod warm_start {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/checking.md")]
pub mod checking {}
