//! Mixed-charge ion Coulomb crystals in a linear Paul trap.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constants;
pub mod crystal;
pub mod error;
pub mod fit;
pub mod imaging;
pub mod minimize;
pub mod modes;
pub mod potential;
pub mod response;
pub mod scan;
pub mod trap;

pub use error::{Error, ErrorCategory, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/trap.md")]
    mod trap {}
    #[doc = include_str!("../../../book/src/equilibrium.md")]
    mod equilibrium {}
    #[doc = include_str!("../../../book/src/modes.md")]
    mod modes {}
    #[doc = include_str!("../../../book/src/transitions.md")]
    mod transitions {}
    #[doc = include_str!("../../../book/src/response.md")]
    mod response {}
    #[doc = include_str!("../../../book/src/imaging.md")]
    mod imaging {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
