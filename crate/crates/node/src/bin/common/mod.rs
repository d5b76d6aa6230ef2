// Shared by the binaries.

use std::process::ExitCode;

use clap::Parser;

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OCT_LOG_LEVEL", "info"))
        .format_timestamp_millis()
        .init();
}

/// Parse arguments, mapping usage errors to exit code 1.
pub fn parse_args<T: Parser>() -> Result<T, ExitCode> {
    T::try_parse().map_err(|e| {
        let code = if e.use_stderr() { 1 } else { 0 };
        let _ = e.print();
        ExitCode::from(code)
    })
}

pub fn fail(e: &oct_node::NodeError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
