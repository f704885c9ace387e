//! Shared plumbing for the command-line tools: exit codes, file loading,
//! report output.

use std::path::Path;
use std::process::ExitCode;

use stlstream::config::{ClientConfig, MachineSpec};
use stlstream::mesh::{parse_stl, Mesh};
use stlstream::protocol::client::ClientError;
use stlstream::protocol::manufacturer::ManufacturerError;
use stlstream::report::JobReport;

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    /// Bad flags, unreadable config or machine files, anything else.
    Other = 1,
    Incompatible = 2,
    Transport = 3,
    Geometry = 4,
    Validation = 5,
    Printer = 6,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
}

/// Parse flags, keeping exit status 2 free for incompatible machines.
pub fn parse_args<T: clap::Parser>() -> Result<T, ExitCode> {
    T::try_parse().map_err(|e| {
        let _ = e.print();
        if e.use_stderr() { Exit::Other.into() } else { Exit::Ok.into() }
    })
}

pub fn fail(code: Exit, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    code.into()
}

pub fn read_text(path: &Path, what: &str) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read {what} {}: {e}", path.display()))
}

pub fn load_client_config(path: &Path) -> Result<ClientConfig, String> {
    ClientConfig::parse(&read_text(path, "config")?).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn load_machine(path: &Path) -> Result<MachineSpec, String> {
    MachineSpec::parse(&read_text(path, "machine spec")?).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn load_mesh(path: &Path) -> Result<Mesh, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("cannot read STL {}: {e}", path.display()))?;
    let parsed = parse_stl(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
    if parsed.dropped_degenerate > 0 {
        log::warn!("dropped {} degenerate facets from {}", parsed.dropped_degenerate, path.display());
    }
    Ok(parsed.mesh)
}

pub fn parse_rotate(s: &str) -> Result<[f64; 3], String> {
    stlstream::config::parse_triple("rotate", s).map_err(|e| e.to_string())
}

/// Write the report to `path`, or to stdout without one.
pub fn emit_report(report: &JobReport, path: Option<&Path>) -> Result<(), String> {
    let text = report.to_kv();
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| format!("cannot write report {}: {e}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn client_exit(e: &ClientError) -> Exit {
    match e {
        ClientError::Incompatible(_) => Exit::Incompatible,
        ClientError::Geometry(_) => Exit::Geometry,
        ClientError::Transport { .. } | ClientError::Protocol(_) => Exit::Transport,
        ClientError::Aborted(reason) => match reason.split(':').next().unwrap_or("") {
            "incompatible" | "config" => Exit::Incompatible,
            "layer" => Exit::Geometry,
            "validation" => Exit::Validation,
            "printer" => Exit::Printer,
            _ => Exit::Transport,
        },
    }
}

pub fn manufacturer_exit(e: &ManufacturerError) -> Exit {
    match e {
        ManufacturerError::Incompatible(_) | ManufacturerError::Config(_) => Exit::Incompatible,
        ManufacturerError::Protocol(_) | ManufacturerError::Frame(_) | ManufacturerError::ClientAborted(_) => Exit::Transport,
        ManufacturerError::Layer { .. } => Exit::Geometry,
        ManufacturerError::Validation { .. } => Exit::Validation,
        ManufacturerError::Printer(_) => Exit::Printer,
        ManufacturerError::Storage(_) => Exit::Other,
    }
}
