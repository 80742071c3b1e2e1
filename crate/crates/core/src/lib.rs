#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod dynamics;
pub mod energysim;
pub mod error;
pub mod fedsim;
pub mod graph;
pub mod linalg;
pub mod oracle;
pub mod reference;
pub mod saddle;
pub mod trace;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/saddle.md")]
    mod saddle {}
    #[doc = include_str!("../../../book/src/consensus.md")]
    mod consensus {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/fedsim.md")]
    mod fedsim {}
    #[doc = include_str!("../../../book/src/energysim.md")]
    mod energysim {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
