use std::net::TcpStream;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use stlstream::protocol::client::run_client;
use stlstream_cli::*;

/// Stream a part to a manufacturer one layer at a time.
#[derive(Parser)]
#[command(name = "stream-client", version)]
struct Args {
    #[arg(long)]
    stl: PathBuf,
    /// Design settings (`key=value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Manufacturer address, host:port.
    #[arg(long)]
    connect: String,
    /// Euler angles in degrees applied X, then Y, then Z, e.g. `90,0,0`.
    #[arg(long, value_parser = parse_rotate, allow_hyphen_values = true)]
    rotate: Option<[f64; 3]>,
    #[arg(long)]
    no_supports: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    init_logging();
    let args: Args = match parse_args() {
        Ok(a) => a,
        Err(code) => return code,
    };
    let mut cfg = match load_client_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(Exit::Other, e),
    };
    if let Some(r) = args.rotate {
        cfg.rotate = r;
    }
    if args.no_supports {
        cfg.supports = false;
    }
    let mesh = match load_mesh(&args.stl) {
        Ok(m) => m,
        Err(e) => return fail(Exit::Geometry, e),
    };
    let stream = match TcpStream::connect(&args.connect) {
        Ok(s) => s,
        Err(e) => return fail(Exit::Transport, format!("cannot connect to {}: {e}", args.connect)),
    };
    // the manufacturer may take a while between requests while it prints
    let _ = stream.set_read_timeout(Some(Duration::from_secs(600)));
    let _ = stream.set_nodelay(true);
    let out = run_client(stream, &mesh, &cfg);
    if let Err(e) = emit_report(&out.report, args.report.as_deref()) {
        eprintln!("error: {e}");
    }
    match out.error {
        None => Exit::Ok.into(),
        Some(e) => fail(client_exit(&e), e),
    }
}
