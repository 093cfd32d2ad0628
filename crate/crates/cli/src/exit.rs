//! Process exit codes.

use std::fmt;

use denselora_core::Error;

pub const FAILURE: i32 = 1;
pub const USAGE: i32 = 2;
pub const CONFIG: i32 = 3;
pub const NUMERIC: i32 = 4;
pub const IO: i32 = 5;

/// A check ran to completion but its result is outside tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Flag values that parse but cannot be used together.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Dimension { .. } | Error::Config(_) | Error::Input(_) => CONFIG,
                Error::Numeric(_)
                | Error::NonDeterministic { .. }
                | Error::Diverged { .. }
                | Error::Degenerate(_)
                | Error::Consistency(_) => NUMERIC,
                Error::Format(_) | Error::Io(_) | Error::Json(_) => IO,
            };
        }
        if cause.is::<CheckFailed>() {
            return NUMERIC;
        }
        if cause.is::<Usage>() {
            return USAGE;
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return CONFIG;
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    FAILURE
}
