// mdbook cannot link against workspace crates when it tests snippets, so
// every chapter is pulled in here and `cargo test --doc` runs the code blocks.
// One module per chapter keeps failures traceable to a file.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/schedule.md")]
pub mod schedule {}
#[doc = include_str!("src/masks.md")]
pub mod masks {}
#[doc = include_str!("src/prompts.md")]
pub mod prompts {}
#[doc = include_str!("src/data.md")]
pub mod data {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/sampling.md")]
pub mod sampling {}
#[doc = include_str!("src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("src/service.md")]
pub mod service {}
