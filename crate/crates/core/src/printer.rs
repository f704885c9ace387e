//! Virtual fused-filament printer behind a line/acknowledgment protocol.
//!
//! Each newline-terminated command gets exactly one reply, `ok` or
//! `error:<detail>`. Motion runs at constant feed; temperatures follow a
//! first-order lag. The simulated clock is separate from the wall clock. When
//! served with a speedup, motion time is slept at `1/speedup` and idle gaps
//! between commands are scaled back up into simulated time.

use std::fmt::Write as _;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::os::unix::net::UnixStream;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::MachineSpec;
use crate::gcode::{is_always_forbidden, parse_line, GcodeCommand, Kinematics};
use crate::mesh::Vec3;

pub const MAX_LINE: usize = 256;
pub const AMBIENT: f64 = 25.0;
pub const THERMAL_TAU: f64 = 10.0;
/// Hotend temperature at or above which a stopped nozzle oozes.
pub const EXTRUSION_TEMP: f64 = 170.0;
pub const DWELL_THRESHOLD: f64 = 0.5;
/// A heat-and-wait command returns once within this many degrees of target.
const REACHED_BAND: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PrinterError {
    #[error("printer rejected {line:?}: {detail}")]
    Rejected { line: String, detail: String },
    #[error("printer link: {0}")]
    Io(#[from] io::Error),
    #[error("printer closed the link")]
    Closed,
    #[error("printer reply not understood: {0:?}")]
    BadReply(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub z: f64,
    pub e_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerRecord {
    pub z: f64,
    pub segments: Vec<Segment>,
    pub extruded: f64,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Idle {
    /// Simulated time at which the gap ended.
    pub at: f64,
    pub duration: f64,
    pub position: Vec3,
    /// Layer record in progress, if any.
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrintRecord {
    pub layers: Vec<LayerRecord>,
    /// Gaps between commands while the hotend was hot and set to print.
    pub idles: Vec<Idle>,
    /// Physical filament position at the end.
    pub e_accum: f64,
}

impl PrintRecord {
    pub fn total_extruded(&self) -> f64 {
        self.layers.iter().map(|l| l.extruded).sum()
    }

    /// Line-delimited text for diffing.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer={i} z={:.3} segments={} extruded={:.5} start={:.3} end={:.3}", l.z, l.segments.len(), l.extruded, l.start, l.end);
            for g in &l.segments {
                let _ = writeln!(s, "seg {:.3} {:.3} {:.3} {:.3} {:.3} {:.5}", g.from[0], g.from[1], g.to[0], g.to[1], g.z, g.e_delta);
            }
        }
        let _ = writeln!(s, "e_accum={:.5}", self.e_accum);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerDwell {
    pub max_idle: f64,
    pub over_threshold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwellStats {
    pub threshold: f64,
    pub per_layer: Vec<LayerDwell>,
    pub blob_events: Vec<Idle>,
}

impl DwellStats {
    pub fn max_idle(&self) -> f64 {
        self.per_layer.iter().map(|l| l.max_idle).fold(0.0, f64::max)
    }
}

pub fn dwell_report(record: &PrintRecord, threshold: f64) -> DwellStats {
    let mut per_layer = vec![LayerDwell::default(); record.layers.len()];
    let mut blob_events = Vec::new();
    for idle in &record.idles {
        if let Some(l) = idle.layer.and_then(|i| per_layer.get_mut(i)) {
            l.max_idle = l.max_idle.max(idle.duration);
            if idle.duration > threshold {
                l.over_threshold += 1;
            }
        }
        if idle.duration > threshold {
            blob_events.push(*idle);
        }
    }
    DwellStats { threshold, per_layer, blob_events }
}

#[derive(Debug, Clone)]
pub struct Printer {
    pub machine: MachineSpec,
    kin: Kinematics,
    pub homed: bool,
    pub hotend_target: f64,
    pub bed_target: f64,
    pub hotend_temp: f64,
    pub bed_temp: f64,
    pub fan: u8,
    pub clock: f64,
    /// Last commanded feed in mm/min.
    feed: f64,
    record: PrintRecord,
    lines: u64,
}

impl Printer {
    pub fn new(machine: MachineSpec) -> Self {
        let feed = machine.travel_feed;
        Self {
            machine,
            kin: Kinematics::default(),
            homed: false,
            hotend_target: 0.0,
            bed_target: 0.0,
            hotend_temp: AMBIENT,
            bed_temp: AMBIENT,
            fan: 0,
            clock: 0.0,
            feed,
            record: PrintRecord::default(),
            lines: 0,
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.kin.pos[0], self.kin.pos[1], self.kin.pos[2])
    }

    /// Logical position after any G92 rebinding.
    pub fn logical_position(&self) -> [f64; 4] {
        std::array::from_fn(|a| self.kin.pos[a] + self.kin.offset[a])
    }

    pub fn e_accum(&self) -> f64 {
        self.kin.pos[3]
    }

    pub fn lines_received(&self) -> u64 {
        self.lines
    }

    /// Copy of everything recorded so far.
    pub fn record(&self) -> PrintRecord {
        PrintRecord { e_accum: self.e_accum(), ..self.record.clone() }
    }

    fn is_hot(&self) -> bool {
        self.hotend_target >= EXTRUSION_TEMP && self.hotend_temp >= EXTRUSION_TEMP
    }

    fn advance(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let k = (-dt / THERMAL_TAU).exp();
        let hot_goal = if self.hotend_target > 0.0 { self.hotend_target } else { AMBIENT };
        let bed_goal = if self.bed_target > 0.0 { self.bed_target } else { AMBIENT };
        self.hotend_temp = hot_goal + (self.hotend_temp - hot_goal) * k;
        self.bed_temp = bed_goal + (self.bed_temp - bed_goal) * k;
        self.clock += dt;
    }

    /// Let `dt` seconds pass with no command, logging it if the nozzle is hot.
    pub fn idle(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let hot = self.is_hot();
        self.advance(dt);
        if hot {
            let layer = self.record.layers.len().checked_sub(1);
            self.record.idles.push(Idle { at: self.clock, duration: dt, position: self.position(), layer });
        }
    }

    /// Simulated seconds to wait for `temp` to settle within the band of `target`.
    fn settle_time(temp: f64, target: f64) -> f64 {
        let gap = (temp - target).abs();
        if gap <= REACHED_BAND { 0.0 } else { THERMAL_TAU * (gap / REACHED_BAND).ln() }
    }

    /// Handle one protocol line. Returns the reply (without newline) and the
    /// simulated time spent moving, which a paced server turns into wall time.
    pub fn handle_line(&mut self, line: &str) -> (String, f64) {
        self.lines += 1;
        if line.len() > MAX_LINE {
            return ("error:line too long".into(), 0.0);
        }
        match parse_line(line, self.lines as usize) {
            Ok(None) => ("ok".into(), 0.0),
            Ok(Some((c, _))) => match self.execute(&c) {
                Ok(dt) => ("ok".into(), dt),
                Err(e) => (format!("error:{e}"), 0.0),
            },
            Err(e) => (format!("error:{e}"), 0.0),
        }
    }

    /// Execute one command. Returns the simulated time spent in motion; heat
    /// waits advance the clock but are not returned. On error nothing changes.
    pub fn execute(&mut self, c: &GcodeCommand) -> Result<f64, String> {
        if is_always_forbidden(c.letter, c.number) {
            return Err("forbidden".into());
        }
        let m = &self.machine;
        match (c.letter, c.number) {
            ('G', 0) | ('G', 1) => {
                if !self.homed {
                    return Err("not homed".into());
                }
                let t = self.kin.target(c);
                let lim = [m.bed_x, m.bed_y, m.max_z];
                if (0..3).any(|a| t[a] < -1e-9 || t[a] > lim[a] + 1e-9) {
                    return Err(format!("out of bounds ({}, {}, {})", t[0], t[1], t[2]));
                }
                if let Some(f) = c.get('F') {
                    if !(f > 0.0) {
                        return Err(format!("bad feed {f}"));
                    }
                    self.feed = f;
                }
                let from = self.kin.pos;
                let de = t[3] - from[3];
                if de > 0.0 && self.hotend_temp < EXTRUSION_TEMP {
                    return Err("cold extrusion".into());
                }
                let dist = ((t[0] - from[0]).powi(2) + (t[1] - from[1]).powi(2) + (t[2] - from[2]).powi(2)).sqrt();
                let dt = if dist > 0.0 { dist / self.feed * 60.0 } else { de.abs() / self.feed * 60.0 };
                self.kin.pos = t;
                let start = self.clock;
                self.advance(dt);
                if c.has('E') && de != 0.0 {
                    let z = t[2];
                    if self.record.layers.last().is_none_or(|l| l.z != z) {
                        self.record.layers.push(LayerRecord { z, start, ..Default::default() });
                    }
                    let l = self.record.layers.last_mut().unwrap();
                    l.segments.push(Segment { from: [from[0], from[1]], to: [t[0], t[1]], z, e_delta: de });
                    l.extruded += de;
                    l.end = self.clock;
                }
                Ok(dt)
            }
            ('G', 4) => {
                let dt = c.get('S').unwrap_or(0.0) + c.get('P').unwrap_or(0.0) / 1000.0;
                self.advance(dt.max(0.0));
                Ok(dt.max(0.0))
            }
            ('G', 12) => Ok(0.0),
            ('G', 28) => {
                self.kin.apply_modal(c);
                self.homed = true;
                Ok(0.0)
            }
            ('G', 90) | ('G', 91) | ('G', 92) | ('M', 82) | ('M', 83) => {
                self.kin.apply_modal(c);
                Ok(0.0)
            }
            ('M', 104) | ('M', 109) => {
                let s = c.get('S').unwrap_or(0.0);
                if s > m.max_hotend_temp || s < 0.0 {
                    return Err(format!("hotend temperature {s} beyond {}", m.max_hotend_temp));
                }
                self.hotend_target = s;
                if c.number == 109 && s > 0.0 {
                    let wait = Self::settle_time(self.hotend_temp, s);
                    self.advance(wait);
                }
                Ok(0.0)
            }
            ('M', 140) | ('M', 190) => {
                let s = c.get('S').unwrap_or(0.0);
                if s > m.max_bed_temp || s < 0.0 {
                    return Err(format!("bed temperature {s} beyond {}", m.max_bed_temp));
                }
                self.bed_target = s;
                if c.number == 190 && s > 0.0 {
                    let wait = Self::settle_time(self.bed_temp, s);
                    self.advance(wait);
                }
                Ok(0.0)
            }
            ('M', 106) => {
                self.fan = c.get('S').unwrap_or(255.0).clamp(0.0, 255.0) as u8;
                Ok(0.0)
            }
            ('M', 107) => {
                self.fan = 0;
                Ok(0.0)
            }
            ('M', 84) | ('M', 17) | ('M', 18) | ('M', 105) => Ok(0.0),
            _ => Err(format!("unsupported command {}", c.code())),
        }
    }
}

/// How a served printer maps simulated time onto wall time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pace {
    /// Replies immediately; idle gaps are not measured.
    Unpaced,
    /// Motion takes `sim / speedup` wall seconds; gaps count `wall * speedup`.
    Speedup(f64),
}

/// Serve the line protocol until the peer closes its side.
pub fn serve<R: Read, W: Write>(printer: &mut Printer, pace: Pace, reader: R, mut writer: W) -> io::Result<()> {
    let mut reader = BufReader::new(reader);
    let mut buf = Vec::new();
    let mut last_reply: Option<Instant> = None;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        let received = Instant::now();
        if let (Pace::Speedup(s), Some(t)) = (pace, last_reply) {
            printer.idle(received.duration_since(t).as_secs_f64() * s);
        }
        let reply = match std::str::from_utf8(&buf) {
            Ok(text) => {
                let (reply, dt) = printer.handle_line(text.trim_end_matches(['\n', '\r']));
                if let Pace::Speedup(s) = pace {
                    let until = received + Duration::from_secs_f64(dt / s);
                    let now = Instant::now();
                    if until > now {
                        thread::sleep(until - now);
                    }
                }
                reply
            }
            Err(_) => "error:not ascii".into(),
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        last_reply = Some(Instant::now());
    }
}

/// Host side of a printer connection.
pub trait PrinterLink: Send {
    /// Send one command line and wait for its acknowledgment.
    fn send_line(&mut self, line: &str) -> Result<(), PrinterError>;
}

/// Line protocol over any byte stream.
pub struct StreamLink<S: Read + Write + Send> {
    reader: BufReader<S>,
    reply: String,
}

impl<S: Read + Write + Send> StreamLink<S> {
    pub fn new(stream: S) -> Self {
        Self { reader: BufReader::new(stream), reply: String::new() }
    }

    pub fn into_inner(self) -> S {
        self.reader.into_inner()
    }
}

impl<S: Read + Write + Send> PrinterLink for StreamLink<S> {
    fn send_line(&mut self, line: &str) -> Result<(), PrinterError> {
        let w = self.reader.get_mut();
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        self.reply.clear();
        if self.reader.read_line(&mut self.reply)? == 0 {
            return Err(PrinterError::Closed);
        }
        let r = self.reply.trim_end();
        if r == "ok" {
            Ok(())
        } else if let Some(d) = r.strip_prefix("error:") {
            Err(PrinterError::Rejected { line: line.to_string(), detail: d.to_string() })
        } else {
            Err(PrinterError::BadReply(r.to_string()))
        }
    }
}

/// In-process link straight into a simulator, without pacing.
impl PrinterLink for Printer {
    fn send_line(&mut self, line: &str) -> Result<(), PrinterError> {
        let (reply, _) = self.handle_line(line);
        match reply.strip_prefix("error:") {
            None => Ok(()),
            Some(d) => Err(PrinterError::Rejected { line: line.to_string(), detail: d.to_string() }),
        }
    }
}

/// A simulator running on its own thread behind a socket pair.
pub struct SimHandle {
    join: JoinHandle<Printer>,
}

impl SimHandle {
    /// Start a served simulator; returns the handle and the host link.
    pub fn spawn(machine: MachineSpec, pace: Pace) -> io::Result<(SimHandle, StreamLink<UnixStream>)> {
        let (host, device) = UnixStream::pair()?;
        let join = thread::Builder::new().name("printer-sim".into()).spawn(move || {
            let mut p = Printer::new(machine);
            let reader = device.try_clone().expect("clone socket");
            if let Err(e) = serve(&mut p, pace, reader, device) {
                log::warn!("printer sim stopped: {e}");
            }
            p
        })?;
        Ok((SimHandle { join }, StreamLink::new(host)))
    }

    /// Wait for the simulator to see the link close and return its final state.
    pub fn finish(self) -> Printer {
        self.join.join().expect("printer thread panicked")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn homed() -> Printer {
        let mut p = Printer::new(MachineSpec::default());
        assert_eq!(p.handle_line("G28").0, "ok");
        p
    }

    #[test]
    fn line_examples() {
        let mut p = Printer::new(MachineSpec::default());
        assert_eq!(p.handle_line("G1 X10 E0.5").0, "error:not homed");
        assert_eq!(p.handle_line("G28").0, "ok");
        assert!(p.homed);
        assert_eq!(p.position(), Vec3::ZERO);
        assert_eq!(p.handle_line("M104 S250").0, "ok");
        assert_eq!(p.hotend_target, 250.0);
        assert_eq!(p.handle_line("M999").0, "error:forbidden");
        assert_eq!(p.handle_line("M997").0, "error:forbidden");
        assert_eq!(p.handle_line("M23 gear.gcode").0, "error:forbidden");
        assert!(p.handle_line("M104 S500").0.starts_with("error:hotend"));
        assert_eq!(p.hotend_target, 250.0);
        assert_eq!(p.handle_line(&"G0 X1 ".repeat(60)).0, "error:line too long");
    }

    #[test]
    fn g92_offsets_and_move_time() {
        let mut p = homed();
        p.handle_line("G0 X5 Y5 F6000");
        p.handle_line("G92 X0 Y0");
        p.handle_line("G1 X1");
        assert!((p.position().x - 6.0).abs() < 1e-12);
        let t0 = p.clock;
        let (r, dt) = p.handle_line("G1 X61 F1200");
        assert_eq!(r, "ok");
        assert!((dt - 3.0).abs() < 1e-12);
        assert!((p.clock - t0 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn heat_wait_reaches_band() {
        let mut p = homed();
        p.handle_line("M109 S200");
        assert!((p.hotend_temp - 200.0).abs() <= 1.0 + 1e-9);
        let expect = THERMAL_TAU * (175.0f64).ln();
        assert!((p.clock - expect).abs() < 1e-9);
    }

    #[test]
    fn rejects_out_of_volume_and_cold_extrusion() {
        let mut p = homed();
        assert!(p.handle_line("G0 X221").0.starts_with("error:out of bounds"));
        assert!(p.handle_line("G1 X5 E1").0.starts_with("error:cold"));
        assert_eq!(p.position(), Vec3::ZERO);
    }

    #[test]
    fn conservation_across_rebinding() {
        let mut p = homed();
        for l in ["M109 S200", "M82", "G92 E0", "G1 X10 Z0.3 E1 F1200", "G1 X20 E2", "G92 E0", "G1 X30 E0.5", "G1 X30 Y5 Z0.6 E1.5"] {
            assert_eq!(p.handle_line(l).0, "ok", "{l}");
        }
        let r = p.record();
        let sum: f64 = r.layers.iter().flat_map(|l| &l.segments).map(|s| s.e_delta).sum();
        assert!((sum - r.e_accum).abs() < 1e-12);
        assert!((r.e_accum - 3.5).abs() < 1e-12);
        assert_eq!(r.layers.len(), 2);
    }

    #[test]
    fn idle_logged_only_when_hot() {
        let mut p = homed();
        p.idle(3.0);
        assert!(p.record().idles.is_empty());
        p.handle_line("M109 S200");
        p.idle(0.7);
        let d = dwell_report(&p.record(), DWELL_THRESHOLD);
        assert_eq!(d.blob_events.len(), 1);
    }

    #[test]
    fn served_over_socket_pair() {
        let (sim, mut link) = SimHandle::spawn(MachineSpec::default(), Pace::Unpaced).unwrap();
        link.send_line("G28").unwrap();
        assert!(matches!(link.send_line("M999"), Err(PrinterError::Rejected { detail, .. }) if detail == "forbidden"));
        drop(link);
        let p = sim.finish();
        assert_eq!(p.lines_received(), 2);
    }
}
