//! Design-owner side: answer the manufacturer's requests one layer at a time.

use std::io::{Read, Write};
use std::time::Instant;

use thiserror::Error;

use super::{Channel, FrameError, Kind, Message};
use crate::config::{parse_kv, ClientConfig, MachineSpec, PrintConfig};
use crate::mesh::Mesh;
use crate::pipeline::{client_slabs, PipelineError};
use crate::report::JobReport;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("machine is incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Geometry(#[from] PipelineError),
    #[error("transport failed after {layers_sent} layer(s): {source}")]
    Transport { layers_sent: u32, source: FrameError },
    #[error("protocol violation by manufacturer: {0}")]
    Protocol(String),
    #[error("manufacturer aborted: {0}")]
    Aborted(String),
}

#[derive(Debug)]
pub struct ClientOutcome {
    pub report: JobReport,
    /// Layer indices in the order their data was sent, repeats included.
    pub served: Vec<u32>,
    pub error: Option<ClientError>,
}

/// Stream `mesh` under `cfg`: handshake, prepare and section against the
/// manufacturer's published limits, then serve layer requests.
pub fn run_client<S: Read + Write>(stream: S, mesh: &Mesh, cfg: &ClientConfig) -> ClientOutcome {
    run_client_with(stream, &cfg.print, |machine| {
        Ok(client_slabs(mesh, cfg, machine)?.iter().map(|s| s.to_stl()).collect())
    })
}

/// Session driver with the geometry step supplied by the caller. `prepare`
/// gets the published machine limits and returns the STL payload per layer.
pub fn run_client_with<S, F>(stream: S, print: &PrintConfig, prepare: F) -> ClientOutcome
where
    S: Read + Write,
    F: FnOnce(&MachineSpec) -> Result<Vec<Vec<u8>>, PipelineError>,
{
    let mut ch = Channel::new(stream);
    let mut out = ClientOutcome { report: JobReport::default(), served: Vec::new(), error: None };
    let result = session(&mut ch, print, prepare, &mut out);
    out.report.bytes_sent = ch.bytes_sent;
    out.report.bytes_received = ch.bytes_received;
    match result {
        Ok(()) => out.report.outcome = "done".into(),
        Err(e) => {
            match &e {
                ClientError::Protocol(r) => ch.send_abort(Kind::Abort, r),
                ClientError::Incompatible(r) => ch.send_abort(Kind::Abort, r),
                ClientError::Geometry(g) => ch.send_abort(Kind::Abort, &g.to_string()),
                ClientError::Transport { source: FrameError::Io(_) | FrameError::Truncated, .. } => {}
                ClientError::Transport { source, .. } => ch.send_abort(Kind::Error, &source.to_string()),
                _ => {}
            }
            out.report.outcome = format!("failed: {e}");
            out.error = Some(e);
        }
    }
    out
}

fn session<S, F>(ch: &mut Channel<S>, print: &PrintConfig, prepare: F, out: &mut ClientOutcome) -> Result<(), ClientError>
where
    S: Read + Write,
    F: FnOnce(&MachineSpec) -> Result<Vec<Vec<u8>>, PipelineError>,
{
    let transport = |sent: u32| move |source| ClientError::Transport { layers_sent: sent, source };
    ch.send(&Message::spec_request()).map_err(transport(0))?;
    let reply = ch.recv().map_err(transport(0))?;
    if reply.kind != Kind::SpecReply {
        return Err(unexpected("SPEC_REPLY", &reply));
    }
    let machine = MachineSpec::from_public_kv(&reply.payload_text()).map_err(|e| ClientError::Incompatible(e.to_string()))?;
    let h = print.layer_height;
    if !machine.layer_range().contains(&h) {
        return Err(ClientError::Incompatible(format!(
            "layer height {h} outside machine range [{}, {}]",
            machine.layer_height_min, machine.layer_height_max
        )));
    }
    let layers = prepare(&machine)?;
    let total = layers.len() as u32;
    out.report.layers_total = total;
    ch.send(&Message::text(Kind::Config, &print.design_kv())).map_err(transport(0))?;

    let started = Instant::now();
    let mut last = started;
    let mut next = 0u32;
    let mut resent: Option<u32> = None;
    let mut done_sent = false;
    loop {
        let m = ch.recv().map_err(transport(next))?;
        match m.kind {
            Kind::LayerRequest if !done_sent && m.layer == next && next < total => {
                ch.send(&Message::new(Kind::LayerData, next, layers[next as usize].clone())).map_err(transport(next))?;
                out.served.push(next);
                out.report.layer_times.push(last.elapsed().as_secs_f64());
                last = Instant::now();
                next += 1;
            }
            // one repeat of the layer just sent, after a damaged frame
            Kind::LayerRequest if !done_sent && next > 0 && m.layer == next - 1 && resent != Some(m.layer) => {
                resent = Some(m.layer);
                ch.send(&Message::new(Kind::LayerData, m.layer, layers[m.layer as usize].clone())).map_err(transport(next))?;
                out.served.push(m.layer);
            }
            Kind::LayerRequest if next == total && m.layer == total && (!done_sent || resent != Some(total)) => {
                if done_sent {
                    resent = Some(total);
                }
                done_sent = true;
                ch.send(&Message::new(Kind::JobDone, total, [])).map_err(transport(next))?;
            }
            Kind::JobDone if done_sent => {
                for (k, v) in parse_kv(&m.payload_text()).unwrap_or_default() {
                    match k.as_str() {
                        "layers_printed" => out.report.layers_printed = v.parse().unwrap_or(0),
                        "extruded_mm" => out.report.extruded = v.parse().unwrap_or(0.0),
                        "guide_extruded_mm" => out.report.guide_extruded = v.parse().unwrap_or(0.0),
                        _ => {}
                    }
                }
                return Ok(());
            }
            Kind::Abort | Kind::Error => return Err(ClientError::Aborted(m.payload_text())),
            _ => {
                let want = if done_sent { "JOB_DONE".to_string() } else { format!("LAYER_REQUEST({next})") };
                return Err(unexpected(&want, &m));
            }
        }
    }
}

fn unexpected(want: &str, got: &Message) -> ClientError {
    if matches!(got.kind, Kind::Abort | Kind::Error) {
        return ClientError::Aborted(got.payload_text());
    }
    ClientError::Protocol(format!("expected {want}, got {:?}({})", got.kind, got.layer))
}
