//! Pipeline commands behind the `dytx` binary, exposed as a library so
//! integration tests can drive full runs in-process.

pub mod commands;
pub mod manifest;
