//! Command-line runner: manifests, run orchestration, artifacts and the
//! self-test suite.

pub mod checkpoint;
pub mod manifest;
pub mod output;
pub mod run;
pub mod selftest;

use cfbeam_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad flags, manifest keys or values, or missing files.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("self-test failed: {0}")]
    Selftest(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            HarnessError::Runtime(_) => 3,
            HarnessError::Selftest(_) => 4,
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => HarnessError::Usage(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}
