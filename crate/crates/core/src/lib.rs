#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod instance;
pub mod model;
pub mod nn;
pub mod random;
pub mod report;
pub mod rng;
pub mod solomon;
pub mod train;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/instances.md")]
    pub mod instances {}
    #[doc = include_str!("../../../book/src/environment.md")]
    pub mod environment {}
    #[doc = include_str!("../../../book/src/nn.md")]
    pub mod nn {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
