//! Command-line front end for the `fedbench` engine: the TOML experiment
//! file format, partition-plan and metrics serialization, and the
//! implementations behind the `fedbench` binary's subcommands.

pub mod config;
pub mod metrics;
pub mod plan;
pub mod runner;

use std::fmt;

/// A command failure, classified by how the process should exit:
/// configuration problems (unparseable or inconsistent config, unreadable
/// inputs) exit with 2, execution problems exit with 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}
