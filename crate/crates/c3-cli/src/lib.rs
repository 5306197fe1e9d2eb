//! Command-line front end for the c3 codec.

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    0
}
