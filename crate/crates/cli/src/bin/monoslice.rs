use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use stlstream::pipeline::{monoslice, PipelineError};
use stlstream_cli::*;

/// Slice a whole part in one pass: the reference a streamed job is compared to.
#[derive(Parser)]
#[command(name = "monoslice", version)]
struct Args {
    #[arg(long)]
    stl: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    machine: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    init_logging();
    let args: Args = match parse_args() {
        Ok(a) => a,
        Err(code) => return code,
    };
    let cfg = match load_client_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(Exit::Other, e),
    };
    let machine = match load_machine(&args.machine) {
        Ok(m) => m,
        Err(e) => return fail(Exit::Other, e),
    };
    let mesh = match load_mesh(&args.stl) {
        Ok(m) => m,
        Err(e) => return fail(Exit::Geometry, e),
    };
    let job = match monoslice(&mesh, &cfg, &machine) {
        Ok(j) => j,
        Err(e @ PipelineError::Validation(_)) => return fail(Exit::Validation, e),
        Err(e @ PipelineError::Section(stlstream::sectioner::SectionError::OutOfRange { .. })) => return fail(Exit::Incompatible, e),
        Err(e) => return fail(Exit::Geometry, e),
    };
    if let Err(e) = std::fs::write(&args.out, job.program.to_text()) {
        return fail(Exit::Other, format!("cannot write {}: {e}", args.out.display()));
    }
    let total: f64 = job.layers.iter().map(|l| l.extruded).sum();
    println!("layers={}", job.layers.len());
    println!("extruded_mm={total:.5}");
    Exit::Ok.into()
}
