//! Library side of the `segdec` command-line tool.

pub mod commands;
pub mod settings;

/// Exit status for a failed command: 2 for usage and configuration
/// problems, 1 for everything else.
pub fn exit_code(err: &segdec::Error) -> i32 {
    match err {
        segdec::Error::Config(_) | segdec::Error::BadSpec(_) | segdec::Error::IndivisibleChannels(_) => 2,
        _ => 1,
    }
}
