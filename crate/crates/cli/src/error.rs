use std::io;

use thiserror::Error;

use crate::instance::InstanceError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("instance error: {0}")]
    Instance(#[from] InstanceError),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Instance(_) => 3,
            CliError::Runtime(_) | CliError::Io(_) => 4,
        }
    }
}
