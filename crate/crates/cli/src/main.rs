mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use mbtf_core::Error;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Usage = 1,
    Data = 2,
    Internal = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: Code::Usage, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: Code::Data, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => Code::Usage,
            Error::Validation(_)
            | Error::TooShort { .. }
            | Error::SampleRate { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Wav(_) => Code::Data,
            Error::Shape(_) | Error::State(_) => Code::Internal,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<clap::Error> for CliError {
    fn from(e: clap::Error) -> Self {
        Self::usage(e.render().to_string())
    }
}

fn main() -> ExitCode {
    let cli = match args::parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => return report(e),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("mbtf: {}", e.msg.trim_end());
    ExitCode::from(e.code as u8)
}
