//! Co-design of a reconfigurable phase-change metasurface spectral encoder and
//! a neural hyperspectral decoder.

// `!(x > 0.0)` style checks are deliberate: NaN has to fail them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod nn;

pub mod checkpoint;
pub mod codesign;
pub mod config;
pub mod decoder;
pub mod geometry;
pub mod materials;
pub mod oracle;
pub mod pipeline;
pub mod plot;
pub mod scenes;
pub mod sensing;
pub mod surrogate;

pub use error::{Error, Result};
pub use nn::child_seed;

// the book's snippets run as doctests
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/materials.md")]
    struct Materials;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/oracle.md")]
    struct OracleChapter;
    #[doc = include_str!("../../../book/src/surrogate.md")]
    struct Surrogate;
    #[doc = include_str!("../../../book/src/sensing.md")]
    struct Sensing;
    #[doc = include_str!("../../../book/src/decoder.md")]
    struct Decoder;
    #[doc = include_str!("../../../book/src/codesign.md")]
    struct Codesign;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
