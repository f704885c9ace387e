//! Record of every layer artifact the manufacturer holds, and the store that
//! actually holds them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Artifact {
    Stl(u32),
    Gcode(u32),
}

impl Artifact {
    pub fn layer(self) -> u32 {
        match self {
            Artifact::Stl(n) | Artifact::Gcode(n) => n,
        }
    }

    pub fn file_name(self) -> String {
        match self {
            Artifact::Stl(n) => format!("layer_{n}.stl"),
            Artifact::Gcode(n) => format!("layer_{n}.gcode"),
        }
    }
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Artifact::Stl(n) => write!(f, "stl({n})"),
            Artifact::Gcode(n) => write!(f, "gcode({n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Store { bytes: usize },
    Delete,
    /// A layer was requested from the client. Logged so deletion order can be
    /// checked against requests.
    Request,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEvent {
    /// Seconds since the ledger was opened.
    pub at: f64,
    pub action: Action,
    pub layer: u32,
    pub artifact: Option<Artifact>,
}

impl fmt::Display for LedgerEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.action, self.artifact) {
            (Action::Store { bytes }, Some(a)) => write!(f, "store {a} {bytes}"),
            (Action::Delete, Some(a)) => write!(f, "delete {a}"),
            _ => write!(f, "request {}", self.layer),
        }
    }
}

/// Where layer artifacts physically live.
#[derive(Debug)]
pub enum ArtifactStore {
    Memory(BTreeMap<Artifact, Vec<u8>>),
    Dir(PathBuf),
}

impl ArtifactStore {
    pub fn memory() -> Self {
        ArtifactStore::Memory(BTreeMap::new())
    }

    pub fn dir(path: &Path) -> io::Result<Self> {
        fs::create_dir_all(path)?;
        Ok(ArtifactStore::Dir(path.to_path_buf()))
    }

    fn put(&mut self, a: Artifact, bytes: &[u8]) -> io::Result<()> {
        match self {
            ArtifactStore::Memory(m) => {
                m.insert(a, bytes.to_vec());
                Ok(())
            }
            ArtifactStore::Dir(d) => fs::write(d.join(a.file_name()), bytes),
        }
    }

    fn remove(&mut self, a: Artifact) -> io::Result<()> {
        match self {
            ArtifactStore::Memory(m) => {
                m.remove(&a);
                Ok(())
            }
            ArtifactStore::Dir(d) => match fs::remove_file(d.join(a.file_name())) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            },
        }
    }

    pub fn get(&self, a: Artifact) -> io::Result<Vec<u8>> {
        match self {
            ArtifactStore::Memory(m) => m.get(&a).cloned().ok_or_else(|| io::ErrorKind::NotFound.into()),
            ArtifactStore::Dir(d) => fs::read(d.join(a.file_name())),
        }
    }
}

#[derive(Debug)]
pub struct Ledger {
    opened: Instant,
    events: Vec<LedgerEvent>,
    resident: BTreeSet<Artifact>,
    store: ArtifactStore,
}

impl Ledger {
    pub fn new(store: ArtifactStore) -> Self {
        Self { opened: Instant::now(), events: Vec::new(), resident: BTreeSet::new(), store }
    }

    fn log(&mut self, action: Action, layer: u32, artifact: Option<Artifact>) {
        let at = self.opened.elapsed().as_secs_f64();
        self.events.push(LedgerEvent { at, action, layer, artifact });
    }

    pub fn store(&mut self, a: Artifact, bytes: &[u8]) -> io::Result<()> {
        self.store.put(a, bytes)?;
        self.resident.insert(a);
        self.log(Action::Store { bytes: bytes.len() }, a.layer(), Some(a));
        Ok(())
    }

    pub fn delete(&mut self, a: Artifact) -> io::Result<()> {
        if self.resident.remove(&a) {
            self.store.remove(a)?;
            self.log(Action::Delete, a.layer(), Some(a));
        }
        Ok(())
    }

    pub fn delete_layer(&mut self, n: u32) -> io::Result<()> {
        self.delete(Artifact::Stl(n))?;
        self.delete(Artifact::Gcode(n))
    }

    /// Drop everything still held, e.g. when a job is aborted.
    pub fn delete_all(&mut self) -> io::Result<()> {
        for a in self.resident.clone() {
            self.delete(a)?;
        }
        Ok(())
    }

    pub fn request(&mut self, n: u32) {
        self.log(Action::Request, n, None);
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn resident(&self) -> &BTreeSet<Artifact> {
        &self.resident
    }

    pub fn artifact(&self, a: Artifact) -> io::Result<Vec<u8>> {
        self.store.get(a)
    }

    /// SHA-256 over the event log without timestamps.
    pub fn digest(&self) -> String {
        digest_events(&self.events)
    }
}

pub fn digest_events(events: &[LedgerEvent]) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(e.to_string().as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Outcome of replaying a ledger.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Replay {
    /// Most layers with any artifact resident at once.
    pub max_resident_layers: usize,
    pub max_resident_stl: usize,
    pub max_resident_gcode: usize,
    /// Layers still held at the end.
    pub leftover: BTreeSet<Artifact>,
    pub violations: Vec<String>,
}

/// Rebuild the resident set from events alone and check the retention rules:
/// at most two STL and two G-code artifacts at once, and layer n gone before
/// layer n+2 is requested.
pub fn replay(events: &[LedgerEvent]) -> Replay {
    let mut r = Replay::default();
    let mut resident: BTreeSet<Artifact> = BTreeSet::new();
    for e in events {
        match (e.action, e.artifact) {
            (Action::Store { .. }, Some(a)) => {
                resident.insert(a);
            }
            (Action::Delete, Some(a)) => {
                if !resident.remove(&a) {
                    r.violations.push(format!("delete of {a} that was not stored"));
                }
            }
            (Action::Request, _) => {
                if let Some(a) = resident.iter().find(|a| a.layer() + 2 <= e.layer) {
                    r.violations.push(format!("{a} still held when layer {} was requested", e.layer));
                }
            }
            _ => r.violations.push(format!("malformed event {e:?}")),
        }
        let stl = resident.iter().filter(|a| matches!(a, Artifact::Stl(_))).count();
        let gcode = resident.len() - stl;
        let layers: BTreeSet<u32> = resident.iter().map(|a| a.layer()).collect();
        r.max_resident_stl = r.max_resident_stl.max(stl);
        r.max_resident_gcode = r.max_resident_gcode.max(gcode);
        r.max_resident_layers = r.max_resident_layers.max(layers.len());
    }
    if r.max_resident_stl > 2 || r.max_resident_gcode > 2 {
        r.violations.push(format!("{} STL and {} G-code artifacts held at once", r.max_resident_stl, r.max_resident_gcode));
    }
    r.leftover = resident;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_store_roundtrip_and_cleanup() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = Ledger::new(ArtifactStore::dir(dir.path()).unwrap());
        l.request(0);
        l.store(Artifact::Stl(0), b"abc").unwrap();
        assert!(dir.path().join("layer_0.stl").exists());
        assert_eq!(l.artifact(Artifact::Stl(0)).unwrap(), b"abc");
        l.store(Artifact::Gcode(0), b"G28").unwrap();
        l.delete_all().unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        let r = replay(l.events());
        assert!(r.violations.is_empty() && r.leftover.is_empty());
        assert_eq!(r.max_resident_layers, 1);
    }

    #[test]
    fn replay_flags_late_delete() {
        let mut l = Ledger::new(ArtifactStore::memory());
        for n in 0..3 {
            l.request(n);
            l.store(Artifact::Stl(n), b"x").unwrap();
        }
        let r = replay(l.events());
        assert_eq!(r.violations.len(), 2);
        assert_eq!(r.max_resident_stl, 3);
    }

    #[test]
    fn digest_ignores_time() {
        let mut a = Ledger::new(ArtifactStore::memory());
        a.request(0);
        std::thread::sleep(std::time::Duration::from_millis(2));
        let mut b = Ledger::new(ArtifactStore::memory());
        b.request(0);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
