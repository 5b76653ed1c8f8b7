//! The shipped cold-box surrogate benchmarks.

use crate::config::parse_system;
use crate::error::{Error, Result};
use crate::system::System;

pub const COLDBOX_4SS: &str = include_str!("../../benchmarks/plants/coldbox_4ss.toml");
pub const COLDBOX_2SS: &str = include_str!("../../benchmarks/plants/coldbox_2ss.toml");

fn builtin(name: &str) -> Result<(String, String)> {
    match name {
        "coldbox_4ss.toml" => Ok((COLDBOX_4SS.to_string(), name.to_string())),
        "coldbox_2ss.toml" => Ok((COLDBOX_2SS.to_string(), name.to_string())),
        other => Err(Error::Config(format!("no built-in system file `{other}`"))),
    }
}

/// J-T cycle, two heat exchangers and the turbine.
pub fn build_coldbox_4ss() -> Result<System> {
    parse_system(COLDBOX_4SS, "coldbox_4ss.toml", &builtin)
}

/// J-T cycle and Brayton cycle, composed from the four-subsystem models.
pub fn build_coldbox_2ss() -> Result<System> {
    parse_system(COLDBOX_2SS, "coldbox_2ss.toml", &builtin)
}
