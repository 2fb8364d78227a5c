pub mod datamodel;
pub mod error;
pub mod evalmetrics;
pub mod gradcheck;
pub mod igcl;
pub mod instance_branch;
pub mod numerics;
pub mod semantic_branch;
pub mod trainer;

pub use error::{Error, Result};
