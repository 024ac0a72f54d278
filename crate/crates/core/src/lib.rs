//! Joint channel estimation and localization for RIS-assisted wideband MIMO
//! links using multidimensional orthogonal matching pursuit.

pub mod arrays;
pub mod dictionary;
pub mod error;
pub mod experiment;
pub mod io;
pub mod localization;
pub mod momp;
pub mod scene;
pub mod sounding;

pub use error::{Error, Result};
