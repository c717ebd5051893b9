//! Command-line front end.

/// Entry point for the `dinoy` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    eprintln!("dinoy: command-line interface not wired up yet");
    2
}
