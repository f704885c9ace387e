//! Scripted misbehaving peers. Each scenario returns a short description on
//! success or what went wrong.

use std::io::Write;
use std::os::unix::net::UnixStream;
use std::thread;

use stlstream::config::{ClientConfig, MachineSpec};
use stlstream::corpus;
use stlstream::pipeline::client_slabs;
use stlstream::printer::Printer;
use stlstream::protocol::client::{run_client_with, ClientOutcome};
use stlstream::protocol::frame::{frame_message, read_message, Kind, Message, HEADER_LEN, MAX_PAYLOAD};
use stlstream::protocol::ledger::{Action, ArtifactStore};
use stlstream::protocol::manufacturer::{run_manufacturer, ManufacturerOptions, SessionOutcome};

pub type Scenario = (&'static str, fn() -> Result<(), String>);

pub const SCENARIOS: [Scenario; 14] = [
    ("config before spec request", config_before_spec_request),
    ("duplicate spec request", duplicate_spec_request),
    ("duplicate config", duplicate_config),
    ("unsolicited layer data", unsolicited_layer_data),
    ("layer data for the wrong index", wrong_index),
    ("corrupt crc twice", corrupt_crc_twice),
    ("oversized frame", oversized_frame),
    ("bad magic", bad_magic),
    ("unknown version", unknown_version),
    ("machine-choice key in config", machine_key_in_config),
    ("layer payload is not STL", garbage_layer),
    ("manufacturer skips a layer index", client_sees_skip),
    ("manufacturer repeats spec reply", client_sees_second_spec_reply),
    ("manufacturer re-requests a layer twice", client_sees_double_rerequest),
];

fn send(s: &mut UnixStream, m: &Message) {
    s.write_all(&frame_message(m).unwrap()).unwrap();
}

fn recv(s: &mut UnixStream) -> Option<Message> {
    read_message(s).ok()
}

/// Read until the peer says ABORT/ERROR or hangs up.
fn terminal(s: &mut UnixStream) -> Option<Kind> {
    while let Some(m) = recv(s) {
        if matches!(m.kind, Kind::Abort | Kind::Error) {
            return Some(m.kind);
        }
    }
    None
}

fn layer_stl(n: usize) -> Vec<u8> {
    let m = MachineSpec::default();
    client_slabs(&corpus::cube(3.0), &ClientConfig::default(), &m).unwrap()[n].to_stl()
}

fn handshake(s: &mut UnixStream) {
    send(s, &Message::spec_request());
    recv(s).unwrap();
    send(s, &Message::text(Kind::Config, &ClientConfig::default().print.design_kv()));
}

/// Run the manufacturer against a scripted client; checks the session ended
/// in failure with ABORT/ERROR on the wire and nothing left in the workdir.
fn against_server(stored_ok: bool, script: impl FnOnce(&mut UnixStream)) -> Result<SessionOutcome, String> {
    let dir = tempfile::tempdir().unwrap();
    let (mut a, b) = UnixStream::pair().unwrap();
    let store = ArtifactStore::dir(dir.path()).unwrap();
    let server = thread::spawn(move || {
        let m = MachineSpec::default();
        run_manufacturer(b, &m, &mut Printer::new(m.clone()), &ManufacturerOptions::default(), store)
    });
    script(&mut a);
    let end = terminal(&mut a);
    drop(a);
    let out = server.join().map_err(|_| "manufacturer panicked".to_string())?;
    if out.error.is_none() {
        return Err("manufacturer finished without error".into());
    }
    if end.is_none() {
        return Err(format!("no ABORT/ERROR sent ({:?})", out.error));
    }
    let left = std::fs::read_dir(dir.path()).unwrap().count();
    if left != 0 {
        return Err(format!("{left} artifact(s) left in workdir"));
    }
    if !stored_ok && out.ledger.iter().any(|e| matches!(e.action, Action::Store { .. })) {
        return Err("unrequested data was stored".into());
    }
    Ok(out)
}

fn config_before_spec_request() -> Result<(), String> {
    against_server(false, |s| send(s, &Message::text(Kind::Config, "layer_height=0.3\n"))).map(drop)
}

fn duplicate_spec_request() -> Result<(), String> {
    against_server(false, |s| {
        send(s, &Message::spec_request());
        recv(s);
        send(s, &Message::spec_request());
    })
    .map(drop)
}

fn duplicate_config() -> Result<(), String> {
    against_server(false, |s| {
        handshake(s);
        recv(s);
        send(s, &Message::text(Kind::Config, &ClientConfig::default().print.design_kv()));
    })
    .map(drop)
}

fn unsolicited_layer_data() -> Result<(), String> {
    against_server(false, |s| {
        send(s, &Message::spec_request());
        recv(s);
        send(s, &Message::new(Kind::LayerData, 0, layer_stl(0)));
    })
    .map(drop)
}

fn wrong_index() -> Result<(), String> {
    against_server(false, |s| {
        handshake(s);
        recv(s);
        send(s, &Message::new(Kind::LayerData, 1, layer_stl(1)));
    })
    .map(drop)
}

fn corrupt_crc_twice() -> Result<(), String> {
    let mut rerequested = false;
    against_server(false, |s| {
        handshake(s);
        let mut bad = frame_message(&Message::new(Kind::LayerData, 0, layer_stl(0))).unwrap();
        bad[HEADER_LEN + 100] ^= 1;
        recv(s);
        s.write_all(&bad).unwrap();
        rerequested = recv(s).is_some_and(|m| m.kind == Kind::LayerRequest && m.layer == 0);
        s.write_all(&bad).unwrap();
    })?;
    if !rerequested {
        return Err("no single re-request after the first bad crc".into());
    }
    Ok(())
}

fn oversized_frame() -> Result<(), String> {
    against_server(false, |s| {
        handshake(s);
        recv(s);
        let mut f = frame_message(&Message::new(Kind::LayerData, 0, vec![])).unwrap();
        f[10..14].copy_from_slice(&((MAX_PAYLOAD + 1) as u32).to_le_bytes());
        s.write_all(&f[..HEADER_LEN]).unwrap();
    })
    .map(drop)
}

fn bad_magic() -> Result<(), String> {
    against_server(false, |s| {
        let mut f = frame_message(&Message::spec_request()).unwrap();
        f[..4].copy_from_slice(b"GCOD");
        s.write_all(&f).unwrap();
    })
    .map(drop)
}

fn unknown_version() -> Result<(), String> {
    against_server(false, |s| {
        let mut f = frame_message(&Message::spec_request()).unwrap();
        f[4] = 9;
        s.write_all(&f).unwrap();
    })
    .map(drop)
}

fn machine_key_in_config() -> Result<(), String> {
    let out = against_server(false, |s| {
        send(s, &Message::spec_request());
        recv(s);
        send(s, &Message::text(Kind::Config, "layer_height=0.3\ntemperature=250\n"));
    })?;
    let e = out.error.unwrap().to_string();
    if !e.contains("machine-choice parameter") {
        return Err(format!("unexpected error {e}"));
    }
    Ok(())
}

fn garbage_layer() -> Result<(), String> {
    against_server(false, |s| {
        handshake(s);
        recv(s);
        send(s, &Message::new(Kind::LayerData, 0, b"not a mesh at all, not even close".repeat(4)));
    })
    .map(drop)
}

/// Run the client against a scripted manufacturer that has already answered
/// the handshake; checks the client failed, said ABORT/ERROR, and never sent
/// a layer it was not asked for.
fn against_client(script: impl FnOnce(&mut UnixStream) -> Vec<u32>) -> Result<ClientOutcome, String> {
    let (mut a, b) = UnixStream::pair().unwrap();
    let layers: Vec<Vec<u8>> = (0..10).map(|i| format!("layer {i}").into_bytes()).collect();
    let client = thread::spawn(move || run_client_with(b, &ClientConfig::default().print, move |_| Ok(layers)));
    recv(&mut a).unwrap();
    send(&mut a, &Message::text(Kind::SpecReply, &MachineSpec::default().public_kv()));
    recv(&mut a).unwrap();
    let requested = script(&mut a);
    let end = terminal(&mut a);
    drop(a);
    let out = client.join().map_err(|_| "client panicked".to_string())?;
    if out.error.is_none() {
        return Err("client finished without error".into());
    }
    if end.is_none() {
        return Err(format!("client sent no ABORT/ERROR ({:?})", out.error));
    }
    if let Some(n) = out.served.iter().find(|n| !requested.contains(n)) {
        return Err(format!("client sent unrequested layer {n}"));
    }
    Ok(out)
}

fn client_sees_skip() -> Result<(), String> {
    against_client(|s| {
        send(s, &Message::layer_request(0));
        recv(s);
        send(s, &Message::layer_request(2));
        vec![0]
    })
    .map(drop)
}

fn client_sees_second_spec_reply() -> Result<(), String> {
    against_client(|s| {
        send(s, &Message::text(Kind::SpecReply, &MachineSpec::default().public_kv()));
        vec![]
    })
    .map(drop)
}

fn client_sees_double_rerequest() -> Result<(), String> {
    against_client(|s| {
        for _ in 0..2 {
            send(s, &Message::layer_request(0));
            recv(s);
        }
        send(s, &Message::layer_request(0));
        vec![0]
    })
    .map(drop)
}
