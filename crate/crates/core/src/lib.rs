#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cache;
pub mod error;
pub mod highlevel;
pub mod hull;
mod linalg;
pub mod lp;
pub mod mdp;
pub mod problems;
pub mod region;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mdps.md")]
    mod mdps {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/caches.md")]
    mod caches {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/hierarchy.md")]
    mod hierarchy {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
