// mdbook cannot run snippets that depend on workspace crates, so every
// chapter is pulled in as a module doc and `cargo test --doc` runs the
// listings. One module per chapter keeps failures traceable.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("src/corpus.md")]
pub mod corpus {}
#[doc = include_str!("src/model.md")]
pub mod model {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("src/explanations.md")]
pub mod explanations {}
#[doc = include_str!("src/reproducibility.md")]
pub mod reproducibility {}
