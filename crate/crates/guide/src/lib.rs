//! Compiles every Rust block in the book as a doctest.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub struct Introduction;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fusion.md")]
pub struct Fusion;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/banking.md")]
pub struct Banking;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/proxy.md")]
pub struct Proxy;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/allocation.md")]
pub struct Allocation;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/search.md")]
pub struct Search;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/harness.md")]
pub struct Harness;
