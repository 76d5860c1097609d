//! Library surface of the experiment CLI. The binary parses arguments and
//! calls into [`commands`]; integration and acceptance tests call the same
//! functions directly.

pub mod commands;
pub mod config;
pub mod presets;

/// Process exit code for an error, per the documented taxonomy:
/// 2 for configuration/schema problems, 4 for I/O, 3 for contract
/// violations.
pub fn exit_code(err: &camnorm::Error) -> i32 {
    if err.is_config() {
        2
    } else if matches!(err, camnorm::Error::Io(_)) {
        4
    } else {
        3
    }
}
