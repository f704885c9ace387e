use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use stlstream::config::MachineSpec;
use stlstream::printer::{dwell_report, Pace, SimHandle, StreamLink, DWELL_THRESHOLD};
use stlstream::protocol::ledger::ArtifactStore;
use stlstream::protocol::manufacturer::{run_manufacturer, ManufacturerOptions};
use stlstream::report::JobReport;
use stlstream_cli::*;

/// Manufacturer daemon: pull layers from a client, slice, print.
#[derive(Parser)]
#[command(name = "stream-server", version)]
struct Args {
    /// Machine settings (`key=value` lines).
    #[arg(long)]
    machine: PathBuf,
    /// Address to listen on, host:port. Port 0 picks a free port; the bound
    /// address is printed on startup.
    #[arg(long)]
    listen: String,
    /// `sim` (built-in simulator), `sim:<speedup>` (paced simulator), or
    /// `pipe:<host:port>` (line-protocol printer on a socket).
    #[arg(long, default_value = "sim")]
    printer: String,
    /// Directory for layer artifacts while they are needed. In memory without one.
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pipeline_depth: u8,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Serve a single job, then exit with its status.
    #[arg(long)]
    once: bool,
}

enum PrinterChoice {
    Sim(Pace),
    Pipe(String),
}

fn printer_choice(s: &str) -> Result<PrinterChoice, String> {
    match s.split_once(':') {
        None if s == "sim" => Ok(PrinterChoice::Sim(Pace::Unpaced)),
        Some(("sim", k)) => match k.parse::<f64>() {
            Ok(k) if k > 0.0 && k.is_finite() => Ok(PrinterChoice::Sim(Pace::Speedup(k))),
            _ => Err(format!("bad simulator speedup {k:?}")),
        },
        Some(("pipe", addr)) if !addr.is_empty() => Ok(PrinterChoice::Pipe(addr.to_string())),
        _ => Err(format!("unknown printer {s:?}; expected sim, sim:<speedup> or pipe:<addr>")),
    }
}

fn serve_job(stream: TcpStream, machine: &MachineSpec, args: &Args, choice: &PrinterChoice) -> (JobReport, Exit) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(120)));
    let store = match &args.workdir {
        Some(d) => match ArtifactStore::dir(d) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: workdir {}: {e}", d.display());
                return (JobReport { outcome: format!("failed: workdir: {e}"), ..Default::default() }, Exit::Other);
            }
        },
        None => ArtifactStore::memory(),
    };
    let opts = ManufacturerOptions { pipeline_depth: args.pipeline_depth };
    let (out, dwell) = match choice {
        PrinterChoice::Sim(pace) => {
            let (sim, mut link) = match SimHandle::spawn(machine.clone(), *pace) {
                Ok(x) => x,
                Err(e) => return (JobReport { outcome: format!("failed: printer: {e}"), ..Default::default() }, Exit::Printer),
            };
            let out = run_manufacturer(stream, machine, &mut link, &opts, store);
            drop(link);
            let d = dwell_report(&sim.finish().record(), DWELL_THRESHOLD);
            (out, Some(format!("blobs={} max_idle={:.3}", d.blob_events.len(), d.max_idle())))
        }
        PrinterChoice::Pipe(addr) => {
            let link = TcpStream::connect(addr).and_then(|s| {
                s.set_nodelay(true)?;
                s.set_read_timeout(Some(Duration::from_secs(60)))?;
                Ok(s)
            });
            let mut link = match link {
                Ok(s) => StreamLink::new(s),
                Err(e) => {
                    eprintln!("error: printer {addr}: {e}");
                    return (JobReport { outcome: format!("failed: printer: {e}"), ..Default::default() }, Exit::Printer);
                }
            };
            (run_manufacturer(stream, machine, &mut link, &opts, store), None)
        }
    };
    let mut report = out.report;
    report.dwell = dwell;
    match out.error {
        None => (report, Exit::Ok),
        Some(e) => {
            eprintln!("error: {e}");
            (report, manufacturer_exit(&e))
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    let args: Args = match parse_args() {
        Ok(a) => a,
        Err(code) => return code,
    };
    let machine = match load_machine(&args.machine) {
        Ok(m) => m,
        Err(e) => return fail(Exit::Other, e),
    };
    let choice = match printer_choice(&args.printer) {
        Ok(c) => c,
        Err(e) => return fail(Exit::Other, e),
    };
    let listener = match TcpListener::bind(&args.listen) {
        Ok(l) => l,
        Err(e) => return fail(Exit::Transport, format!("cannot listen on {}: {e}", args.listen)),
    };
    match listener.local_addr() {
        Ok(a) => println!("listening on {a}"),
        Err(e) => return fail(Exit::Transport, e),
    }
    loop {
        let stream = match listener.accept() {
            Ok((s, peer)) => {
                log::info!("job from {peer}");
                let _ = s.set_nodelay(true);
                s
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let (report, exit) = serve_job(stream, &machine, &args, &choice);
        if let Err(e) = emit_report(&report, args.report.as_deref()) {
            eprintln!("error: {e}");
        }
        if args.once {
            return exit.into();
        }
    }
}
