#![allow(dead_code)]

pub mod scenarios;

use std::os::unix::net::UnixStream;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use stlstream::config::{ClientConfig, MachineSpec, PrintConfig};
use stlstream::gcode::{parse_line, GcodeCommand, GUIDE_TAG};
use stlstream::mesh::Mesh;
use stlstream::printer::{Pace, PrintRecord, Printer, PrinterError, PrinterLink, SimHandle};
use stlstream::protocol::client::{run_client, ClientOutcome};
use stlstream::protocol::ledger::ArtifactStore;
use stlstream::protocol::manufacturer::{run_manufacturer, ManufacturerOptions, SessionOutcome};
use stlstream::protocol::Latency;

/// Forwards to another link and keeps every line that reached the printer.
pub struct Tap<L> {
    pub inner: L,
    pub lines: Arc<Mutex<Vec<String>>>,
}

impl<L: PrinterLink> PrinterLink for Tap<L> {
    fn send_line(&mut self, line: &str) -> Result<(), PrinterError> {
        self.inner.send_line(line)?;
        self.lines.lock().unwrap().push(line.to_string());
        Ok(())
    }
}

pub struct Job {
    pub client: ClientOutcome,
    pub server: SessionOutcome,
    pub lines: Vec<String>,
    pub record: PrintRecord,
}

pub struct JobSpec {
    pub depth: u8,
    pub latency: Option<Duration>,
    pub pace: Option<f64>,
    pub store: Option<std::path::PathBuf>,
}

impl Default for JobSpec {
    fn default() -> Self {
        Self { depth: 2, latency: None, pace: None, store: None }
    }
}

pub fn client_config(h: f64, density: f64) -> ClientConfig {
    let mut c = ClientConfig::default();
    c.print = PrintConfig { layer_height: h, fill_density: density, ..Default::default() };
    c.support.clearance = h;
    c
}

/// Run a full job in-process: client thread, manufacturer, simulated printer.
pub fn stream_job(mesh: &Mesh, cfg: &ClientConfig, machine: &MachineSpec, spec: JobSpec) -> Job {
    let (a, b) = UnixStream::pair().unwrap();
    let (mesh2, cfg2) = (mesh.clone(), cfg.clone());
    let client = thread::spawn(move || run_client(a, &mesh2, &cfg2));
    let lines = Arc::new(Mutex::new(Vec::new()));
    let opts = ManufacturerOptions { pipeline_depth: spec.depth };
    let store = match &spec.store {
        Some(d) => ArtifactStore::dir(d).unwrap(),
        None => ArtifactStore::memory(),
    };
    let (server, record) = match spec.pace {
        None => {
            let mut tap = Tap { inner: Printer::new(machine.clone()), lines: lines.clone() };
            let out = match spec.latency {
                Some(d) => run_manufacturer(Latency::new(b, d), machine, &mut tap, &opts, store),
                None => run_manufacturer(b, machine, &mut tap, &opts, store),
            };
            (out, tap.inner.record())
        }
        Some(speedup) => {
            let (sim, link) = SimHandle::spawn(machine.clone(), Pace::Speedup(speedup)).unwrap();
            let mut tap = Tap { inner: link, lines: lines.clone() };
            let out = match spec.latency {
                Some(d) => run_manufacturer(Latency::new(b, d), machine, &mut tap, &opts, store),
                None => run_manufacturer(b, machine, &mut tap, &opts, store),
            };
            drop(tap);
            (out, sim.finish().record())
        }
    };
    let client = client.join().unwrap();
    let lines = Arc::try_unwrap(lines).unwrap().into_inner().unwrap();
    Job { client, server, lines, record }
}

pub fn commands(lines: &[String]) -> Vec<GcodeCommand> {
    lines.iter().enumerate().filter_map(|(i, l)| parse_line(l, i + 1).unwrap().map(|(c, _)| c)).collect()
}

/// Filament per print height for part moves, in order of height, from a
/// stream of absolute-E G-code. Guide moves are skipped but keep E continuous.
pub fn extrusion_by_z(cmds: &[GcodeCommand]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let (mut e, mut z) = (0.0, 0.0);
    for c in cmds {
        if c.is('G', 92) {
            if let Some(v) = c.get('E') {
                e = v;
            }
            continue;
        }
        if !c.is_motion() {
            continue;
        }
        if let Some(v) = c.get('Z') {
            z = v;
        }
        if let Some(v) = c.get('E') {
            let de = v - e;
            e = v;
            if de > 0.0 && !c.comment.as_deref().is_some_and(|s| s == GUIDE_TAG) {
                match out.last_mut() {
                    Some((lz, acc)) if *lz == z => *acc += de,
                    _ => out.push((z, de)),
                }
            }
        }
    }
    out
}

/// XY bounds of all extruding moves per print height.
pub fn extrusion_bounds_by_z(cmds: &[GcodeCommand]) -> Vec<(f64, [f64; 4])> {
    let mut out: Vec<(f64, [f64; 4])> = Vec::new();
    let (mut e, mut x, mut y, mut z) = (0.0, 0.0, 0.0, 0.0);
    for c in cmds {
        if c.is('G', 92) {
            e = c.get('E').unwrap_or(e);
            continue;
        }
        if !c.is_motion() {
            continue;
        }
        let (x0, y0) = (x, y);
        x = c.get('X').unwrap_or(x);
        y = c.get('Y').unwrap_or(y);
        z = c.get('Z').unwrap_or(z);
        if let Some(v) = c.get('E') {
            let de = v - e;
            e = v;
            if de > 0.0 {
                let b = match out.last_mut() {
                    Some((lz, b)) if *lz == z => b,
                    _ => {
                        out.push((z, [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]));
                        &mut out.last_mut().unwrap().1
                    }
                };
                for (px, py) in [(x0, y0), (x, y)] {
                    b[0] = b[0].min(px);
                    b[1] = b[1].min(py);
                    b[2] = b[2].max(px);
                    b[3] = b[3].max(py);
                }
            }
        }
    }
    out
}
