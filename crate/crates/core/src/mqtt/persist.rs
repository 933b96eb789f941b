//! Storage for persistent MQTT sessions: client id → subscribed filters.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};

pub trait SessionStore: Send {
    fn load(&self, client_id: &str) -> Option<BTreeMap<String, u8>>;
    fn save(&mut self, client_id: &str, subs: &BTreeMap<String, u8>) -> io::Result<()>;
    fn remove(&mut self, client_id: &str) -> io::Result<()>;
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    sessions: BTreeMap<String, BTreeMap<String, u8>>,
}

impl SessionStore for MemoryStore {
    fn load(&self, client_id: &str) -> Option<BTreeMap<String, u8>> {
        self.sessions.get(client_id).cloned()
    }

    fn save(&mut self, client_id: &str, subs: &BTreeMap<String, u8>) -> io::Result<()> {
        self.sessions.insert(client_id.to_string(), subs.clone());
        Ok(())
    }

    fn remove(&mut self, client_id: &str) -> io::Result<()> {
        self.sessions.remove(client_id);
        Ok(())
    }
}

/// One `<qos> <filter>` line per subscription, one file per client under
/// `<dir>/topics/`.
#[derive(Debug, Clone)]
pub struct DirStore {
    dir: PathBuf,
}

impl DirStore {
    pub fn new(state_dir: &Path) -> io::Result<Self> {
        let dir = state_dir.join("topics");
        std::fs::create_dir_all(&dir)?;
        Ok(DirStore { dir })
    }

    fn path(&self, client_id: &str) -> PathBuf {
        let mut name = String::new();
        for b in client_id.bytes() {
            if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
                name.push(b as char);
            } else {
                name.push_str(&format!("%{b:02X}"));
            }
        }
        self.dir.join(format!("{name}.topics"))
    }
}

impl SessionStore for DirStore {
    fn load(&self, client_id: &str) -> Option<BTreeMap<String, u8>> {
        let text = std::fs::read_to_string(self.path(client_id)).ok()?;
        let mut out = BTreeMap::new();
        for line in text.lines() {
            let (q, f) = line.split_once(' ')?;
            out.insert(f.to_string(), q.parse().ok()?);
        }
        Some(out)
    }

    fn save(&mut self, client_id: &str, subs: &BTreeMap<String, u8>) -> io::Result<()> {
        let text: String = subs.iter().map(|(f, q)| format!("{q} {f}\n")).collect();
        std::fs::write(self.path(client_id), text)
    }

    fn remove(&mut self, client_id: &str) -> io::Result<()> {
        match std::fs::remove_file(self.path(client_id)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}

/// Filters as a set, for comparisons in tests and reports.
pub fn filter_set(subs: &BTreeMap<String, u8>) -> BTreeSet<String> {
    subs.keys().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_store_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = DirStore::new(tmp.path()).unwrap();
        let subs = BTreeMap::from([("a/+".to_string(), 1), ("b/#".to_string(), 0)]);
        s.save("client/1", &subs).unwrap();
        assert_eq!(s.load("client/1"), Some(subs));
        assert!(tmp.path().join("topics/client%2F1.topics").exists());
        s.remove("client/1").unwrap();
        assert_eq!(s.load("client/1"), None);
        s.remove("client/1").unwrap();
    }
}
