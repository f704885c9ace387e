//! Manufacturer side: fetch, slice and print one layer at a time while the
//! next one is fetched, holding at most two layers of the design.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use thiserror::Error;

use super::ledger::{replay, Artifact, ArtifactStore, Ledger, LedgerEvent};
use super::{Channel, FrameError, Kind, Message};
use crate::config::{write_kv, ConfigError, MachineSpec, PrintConfig};
use crate::gcode::{remove_redundant, validate, GcodeError, GcodeProgram, LayerPosition, MarkerKind, Violation};
use crate::mesh::parse_stl;
use crate::printer::{PrinterError, PrinterLink};
use crate::report::JobReport;
use crate::slicer::{received_regions, slice_regions, LayerRegions, SliceError};

#[derive(Debug, Error)]
pub enum ManufacturerError {
    #[error("protocol violation by client: {0}")]
    Protocol(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("bad client config: {0}")]
    Config(#[from] ConfigError),
    #[error("job is incompatible with this machine: {0}")]
    Incompatible(String),
    #[error("layer {index}: {detail}")]
    Layer { index: u32, detail: String },
    #[error("layer {index} failed validation: {summary}")]
    Validation { index: u32, summary: String, violations: Vec<Violation> },
    #[error(transparent)]
    Printer(#[from] PrinterError),
    #[error("artifact storage: {0}")]
    Storage(#[from] io::Error),
    #[error("client aborted: {0}")]
    ClientAborted(String),
}

impl ManufacturerError {
    /// Short class name. ABORT messages start with it so the client can
    /// tell causes apart.
    pub fn cause(&self) -> &'static str {
        match self {
            ManufacturerError::Protocol(_) => "protocol",
            ManufacturerError::Frame(_) => "frame",
            ManufacturerError::Config(_) => "config",
            ManufacturerError::Incompatible(_) => "incompatible",
            ManufacturerError::Layer { .. } => "layer",
            ManufacturerError::Validation { .. } => "validation",
            ManufacturerError::Printer(_) => "printer",
            ManufacturerError::Storage(_) => "storage",
            ManufacturerError::ClientAborted(_) => "client",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AwaitConfig,
    Printing(u32),
    Fetching(u32),
    Draining,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
pub struct ManufacturerOptions {
    /// 2: print layer n while fetching n+1. 1: fetch only after a layer is
    /// printed, which leaves the nozzle waiting at every layer boundary.
    pub pipeline_depth: u8,
}

impl Default for ManufacturerOptions {
    fn default() -> Self {
        Self { pipeline_depth: 2 }
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub report: JobReport,
    pub ledger: Vec<LedgerEvent>,
    pub phase: Phase,
    pub error: Option<ManufacturerError>,
}

struct Prepared {
    index: u32,
    program: GcodeProgram,
    body_e: f64,
    guide_e: f64,
}

enum Feed {
    Layer(u32, GcodeProgram),
    Footer(GcodeProgram),
}

type Done = Result<(Option<u32>, f64), PrinterError>;

struct Session<'a, S> {
    ch: Channel<S>,
    ledger: Ledger,
    machine: &'a MachineSpec,
    config: PrintConfig,
    /// Absolute E at the end of the last sliced layer.
    e: f64,
    phase: Phase,
}

impl<S: Read + Write> Session<'_, S> {
    fn set_phase(&mut self, p: Phase) {
        log::debug!("phase {:?} -> {p:?}", self.phase);
        self.phase = p;
    }

    fn handshake(&mut self) -> Result<(), ManufacturerError> {
        let m = self.ch.recv()?;
        expect(&m, Kind::SpecRequest)?;
        self.ch.send(&Message::text(Kind::SpecReply, &self.machine.public_kv()))?;
        let m = self.ch.recv()?;
        expect(&m, Kind::Config)?;
        let config = PrintConfig::from_design_kv(&m.payload_text())?;
        let h = config.layer_height;
        if !self.machine.layer_range().contains(&h) {
            return Err(ManufacturerError::Incompatible(format!("layer height {h}")));
        }
        self.config = config;
        Ok(())
    }

    /// Request layer `n` and turn it into a validated program. `None` when
    /// the client reports the job complete.
    fn fetch(&mut self, n: u32) -> Result<Option<Prepared>, ManufacturerError> {
        self.set_phase(Phase::Fetching(n));
        self.ledger.request(n);
        self.ch.send(&Message::layer_request(n))?;
        let mut retried = false;
        let data = loop {
            match self.ch.recv() {
                Ok(m) if m.kind == Kind::LayerData && m.layer == n => break m.payload,
                Ok(m) if m.kind == Kind::JobDone && n > 0 => return Ok(None),
                Ok(m) => {
                    expect(&m, Kind::LayerData)?;
                    return Err(ManufacturerError::Protocol(format!("LAYER_DATA({}) in reply to LAYER_REQUEST({n})", m.layer)));
                }
                Err(e) if e.is_recoverable() && !retried => {
                    log::warn!("layer {n}: {e}; requesting again");
                    retried = true;
                    self.ledger.request(n);
                    self.ch.send(&Message::layer_request(n))?;
                }
                Err(e) => return Err(e.into()),
            }
        };
        let layer_err = |detail: String| ManufacturerError::Layer { index: n, detail };
        let mesh = parse_stl(&data).map_err(|e| layer_err(e.to_string()))?.mesh;
        self.ledger.store(Artifact::Stl(n), &data)?;
        let h = self.config.layer_height;
        let regions: LayerRegions = received_regions(&mesh, n, h).map_err(|e: SliceError| layer_err(e.to_string()))?;
        let config = PrintConfig { z_offset: n as f64 * h, e_offset: self.e, ..self.config.clone() };
        let sliced = slice_regions(n, &regions, &config, self.machine).map_err(|e| layer_err(e.to_string()))?;
        let position = if n == 0 { LayerPosition::First } else { LayerPosition::Intermediate };
        let program = remove_redundant(&sliced.program, position).map_err(|e: GcodeError| layer_err(e.to_string()))?;
        let report = validate(&program, self.machine);
        if !report.accepted() {
            return Err(ManufacturerError::Validation { index: n, summary: report.summary(), violations: report.violations });
        }
        self.ledger.store(Artifact::Gcode(n), program.to_text().as_bytes())?;
        self.e = sliced.e_end;
        Ok(Some(Prepared { index: n, program, body_e: sliced.body_e, guide_e: sliced.guide_e }))
    }
}

fn expect(m: &Message, kind: Kind) -> Result<(), ManufacturerError> {
    match m.kind {
        k if k == kind => Ok(()),
        Kind::Abort | Kind::Error => Err(ManufacturerError::ClientAborted(m.payload_text())),
        k => Err(ManufacturerError::Protocol(format!("expected {kind:?}, got {k:?}({})", m.layer))),
    }
}

/// Shutdown block, sent once the client has confirmed the last layer.
pub fn footer_program(machine: &MachineSpec, config: &PrintConfig) -> GcodeProgram {
    let full = slice_regions(0, &LayerRegions::default(), config, machine).expect("empty layer always slices").program;
    let start = full.markers.iter().find(|m| m.kind == MarkerKind::FooterStart).map_or(0, |m| m.at);
    GcodeProgram { commands: full.commands[start..].to_vec(), markers: Vec::new() }
}

/// Serve one job on `stream`, printing through `printer`. Every layer artifact
/// is deleted from `store` by the time this returns, whatever the outcome.
pub fn run_manufacturer<S: Read + Write>(
    stream: S,
    machine: &MachineSpec,
    printer: &mut dyn PrinterLink,
    opts: &ManufacturerOptions,
    store: ArtifactStore,
) -> SessionOutcome {
    let mut s = Session {
        ch: Channel::new(stream),
        ledger: Ledger::new(store),
        machine,
        config: PrintConfig::default(),
        e: 0.0,
        phase: Phase::AwaitConfig,
    };
    let mut report = JobReport::default();
    let stop = AtomicBool::new(false);
    let result = s.handshake().and_then(|()| {
        thread::scope(|scope| {
            let (feed_tx, feed_rx) = mpsc::channel::<Feed>();
            let (done_tx, done_rx) = mpsc::channel::<Done>();
            let stop = &stop;
            let feeder = &mut *printer;
            scope.spawn(move || {
                for item in feed_rx {
                    let (index, program) = match item {
                        Feed::Layer(n, p) => (Some(n), p),
                        Feed::Footer(p) => (None, p),
                    };
                    let t = Instant::now();
                    for c in &program.commands {
                        if stop.load(Ordering::Relaxed) {
                            return;
                        }
                        if let Err(e) = feeder.send_line(&c.to_string()) {
                            let _ = done_tx.send(Err(e));
                            return;
                        }
                    }
                    if done_tx.send(Ok((index, t.elapsed().as_secs_f64()))).is_err() {
                        return;
                    }
                }
            });
            let r = pipeline(&mut s, opts, &feed_tx, &done_rx, &mut report);
            if r.is_err() {
                stop.store(true, Ordering::Relaxed);
            }
            drop(feed_tx);
            r
        })
    });
    if let Err(e) = s.ledger.delete_all() {
        log::error!("could not delete artifacts: {e}");
    }
    report.bytes_sent = s.ch.bytes_sent;
    report.bytes_received = s.ch.bytes_received;
    report.ledger_digest = Some(s.ledger.digest());
    report.max_resident_layers = Some(replay(s.ledger.events()).max_resident_layers);
    let error = match result {
        Ok(()) => {
            s.set_phase(Phase::Done);
            report.outcome = "done".into();
            let summary = write_kv([
                ("layers_printed", report.layers_printed.to_string()),
                ("extruded_mm", format!("{:.5}", report.extruded)),
                ("guide_extruded_mm", format!("{:.5}", report.guide_extruded)),
            ]);
            match s.ch.send(&Message::new(Kind::JobDone, report.layers_total, summary.into_bytes())) {
                Ok(()) => None,
                Err(e) => Some(e.into()),
            }
        }
        Err(e) => Some(e),
    };
    if let Some(e) = &error {
        s.set_phase(Phase::Failed);
        report.outcome = format!("failed: {e}");
        match e {
            // the stream is gone; nobody to tell
            ManufacturerError::Frame(FrameError::Io(_) | FrameError::Truncated) | ManufacturerError::ClientAborted(_) => {}
            ManufacturerError::Frame(_) => s.ch.send_abort(Kind::Error, &format!("{}: {e}", e.cause())),
            _ => s.ch.send_abort(Kind::Abort, &format!("{}: {e}", e.cause())),
        }
        if let ManufacturerError::Validation { summary, .. } = e {
            report.validation = summary.clone();
        }
        if report.layers_printed > 0 || matches!(e, ManufacturerError::Printer(_)) {
            // leave the machine cold
            for l in ["M104 S0", "M140 S0", "M107"] {
                let _ = printer.send_line(l);
            }
        }
    } else {
        report.validation = "accept".into();
    }
    SessionOutcome { report, ledger: s.ledger.events().to_vec(), phase: s.phase, error }
}

fn pipeline<S: Read + Write>(
    s: &mut Session<'_, S>,
    opts: &ManufacturerOptions,
    feed: &mpsc::Sender<Feed>,
    done: &mpsc::Receiver<Done>,
    report: &mut JobReport,
) -> Result<(), ManufacturerError> {
    let depth = opts.pipeline_depth.clamp(1, 2) as usize;
    let mut queue: VecDeque<Prepared> = VecDeque::new();
    let mut next = 0u32;
    let mut finished = false;
    // warm-up: with depth 2 both first layers are resident before printing
    while queue.len() < depth && !finished {
        match s.fetch(next)? {
            Some(p) => {
                queue.push_back(p);
                next += 1;
            }
            None => finished = true,
        }
    }
    let hand_off = |s: &mut Session<'_, S>, p: Prepared, report: &mut JobReport| {
        s.set_phase(Phase::Printing(p.index));
        report.extruded += p.body_e;
        report.guide_extruded += p.guide_e;
        feed.send(Feed::Layer(p.index, p.program)).is_ok()
    };
    let wait = |report: &mut JobReport| -> Result<Option<u32>, ManufacturerError> {
        let (index, secs) = done.recv().map_err(|_| PrinterError::Closed)??;
        report.layer_times.push(secs);
        Ok(index)
    };
    let first = queue.pop_front().expect("layer 0 fetched");
    hand_off(s, first, report);
    loop {
        let n = wait(report)?.expect("layer in flight");
        report.layers_printed += 1;
        s.ledger.delete_layer(n)?;
        if let Some(p) = queue.pop_front() {
            hand_off(s, p, report);
        } else if finished {
            break;
        } else {
            match s.fetch(next)? {
                Some(p) => {
                    next += 1;
                    hand_off(s, p, report);
                    continue;
                }
                None => break,
            }
        }
        if !finished {
            match s.fetch(next)? {
                Some(p) => {
                    queue.push_back(p);
                    next += 1;
                }
                None => finished = true,
            }
        }
    }
    report.layers_total = next;
    s.set_phase(Phase::Draining);
    let footer = footer_program(s.machine, &s.config);
    let v = validate(&footer, s.machine);
    if !v.accepted() {
        return Err(ManufacturerError::Validation { index: next, summary: v.summary(), violations: v.violations });
    }
    let _ = feed.send(Feed::Footer(footer));
    wait(report)?;
    report.layer_times.pop();
    Ok(())
}
