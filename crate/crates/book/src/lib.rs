//! The `ntklab` guide. Each module is one chapter of `book/`; its code
//! blocks run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/kernels.md")]
pub mod kernels {}

#[doc = include_str!("../../../book/src/taylor.md")]
pub mod taylor {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/scaling.md")]
pub mod scaling {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/sweeps.md")]
pub mod sweeps {}
