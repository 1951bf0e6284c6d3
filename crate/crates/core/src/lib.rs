pub mod annotator;
pub mod dataset;
pub mod gateway;
pub mod io;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod sandbox;

// Compile and run the guide's snippets as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/annotation.md")]
    mod annotation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
