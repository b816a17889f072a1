//! Hypernetwork-generated adapters on a frozen transformer encoder, with a
//! synthetic multilingual benchmark and the training and evaluation
//! harness around it.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conll;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod hypernet;
pub mod model;
pub mod par;
pub mod synthdata;
pub mod trainer;

pub use error::{HxError, Result};
