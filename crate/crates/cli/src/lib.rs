//! File formats and command implementations behind the `splat4d` binary.

pub mod bundle;
pub mod checkpoint;
pub mod commands;
pub mod config;

use splat4d::error::Error;

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

/// Non-finite training values map to 3; every other failure is treated as bad input.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFiniteValue { .. }) => EXIT_NON_FINITE,
        _ => EXIT_INVALID,
    }
}
