//! High-resolution vision front end: dynamic slicing, slice-restoring
//! adapters, self-mining token sampling and sequence assembly, plus the
//! EntityGrid-QA fragmentation benchmark.

pub mod assembler;
pub mod entitygrid;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod slice_restore;
pub mod slicer;
pub mod sms;
pub mod vit;

pub use error::{Error, Result};
