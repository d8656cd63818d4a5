// SPDX-License-Identifier: Apache-2.0

//! Service surface of the slicing testbed: HTTP API, command line and a
//! frame-level data-plane emulator.

pub mod cli;
pub mod config;
pub mod dataplane;
pub mod frame;
pub mod http;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
