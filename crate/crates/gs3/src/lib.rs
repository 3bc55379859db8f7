//! File formats, dataset loading, the `gs3` command-line tool and the
//! WebSocket render service built on `gs3-core`.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod dumps;
pub mod error;
pub mod image_io;
pub mod manifest;
pub mod protocol;
pub mod serve;

pub use error::{IoError, IoResult};
