//! Client-side resumption state ("session files"): one key-value document
//! per broker address.

use crate::crypto::DhPublic;
use crate::transport::handshake::ScfgPub;
use crate::transport::ResumeState;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

/// Environment variable overriding the state directory.
pub const STATE_DIR_ENV: &str = "QUICMQTT_STATE_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionFile {
    pub server: SocketAddr,
    pub scfg: ScfgPub,
    pub stk: Vec<u8>,
    /// Unix seconds when the token was obtained.
    pub created: u64,
}

impl SessionFile {
    pub fn new(server: SocketAddr, state: &ResumeState, created: u64) -> Self {
        SessionFile {
            server,
            scfg: state.scfg.clone(),
            stk: state.stk.clone(),
            created,
        }
    }

    pub fn resume_state(&self) -> ResumeState {
        ResumeState {
            scfg: self.scfg.clone(),
            stk: self.stk.clone(),
        }
    }

    /// Usable for 0-RTT at `now_unix`: the config has not expired and the
    /// token is younger than `stk_validity`.
    pub fn is_fresh(&self, now_unix: u64, stk_validity: u64) -> bool {
        self.scfg.expy > now_unix && self.created + stk_validity > now_unix
    }

    pub fn to_text(&self) -> String {
        format!(
            "server = {}\nscid = {}\npubs = {}\nexpy = {}\nprof = {}\nstk = {}\ncreated = {}\n",
            self.server,
            B64.encode(self.scfg.scid),
            B64.encode(self.scfg.pub_s.to_bytes()),
            self.scfg.expy,
            B64.encode(&self.scfg.prof),
            B64.encode(&self.stk),
            self.created
        )
    }

    pub fn parse(text: &str) -> Option<Self> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let b = |k: &str| kv.get(k).and_then(|v| B64.decode(v).ok());
        Some(SessionFile {
            server: kv.get("server")?.parse().ok()?,
            scfg: ScfgPub {
                scid: b("scid")?.try_into().ok()?,
                pub_s: DhPublic::from_bytes(&b("pubs")?).ok()?,
                expy: kv.get("expy")?.parse().ok()?,
                prof: b("prof")?,
            },
            stk: b("stk")?,
            created: kv.get("created")?.parse().ok()?,
        })
    }
}

pub trait ResumeStore: Send {
    fn load(&self, server: SocketAddr) -> Option<SessionFile>;
    fn save(&mut self, file: &SessionFile) -> io::Result<()>;
}

/// In-memory store; clones share the same map.
#[derive(Debug, Clone, Default)]
pub struct MemoryResumeStore(Arc<Mutex<BTreeMap<SocketAddr, SessionFile>>>);

impl ResumeStore for MemoryResumeStore {
    fn load(&self, server: SocketAddr) -> Option<SessionFile> {
        self.0.lock().unwrap().get(&server).cloned()
    }

    fn save(&mut self, file: &SessionFile) -> io::Result<()> {
        self.0.lock().unwrap().insert(file.server, file.clone());
        Ok(())
    }
}

/// `<dir>/<host>_<port>.session`
#[derive(Debug, Clone)]
pub struct FileResumeStore {
    dir: PathBuf,
}

impl FileResumeStore {
    pub fn new(dir: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(FileResumeStore {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, server: SocketAddr) -> PathBuf {
        self.dir
            .join(format!("{}_{}.session", server.ip(), server.port()))
    }
}

impl ResumeStore for FileResumeStore {
    fn load(&self, server: SocketAddr) -> Option<SessionFile> {
        SessionFile::parse(&std::fs::read_to_string(self.path(server)).ok()?)
    }

    fn save(&mut self, file: &SessionFile) -> io::Result<()> {
        std::fs::write(self.path(file.server), file.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{dh_keypair, Group};
    use rand::SeedableRng;

    fn sample() -> SessionFile {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let kp = dh_keypair(Group::X25519, &mut rng);
        SessionFile {
            server: "10.0.0.1:4433".parse().unwrap(),
            scfg: ScfgPub {
                scid: [7; 32],
                pub_s: kp.public,
                expy: 1_700_086_400,
                prof: vec![1, 2, 3],
            },
            stk: vec![9; 40],
            created: 1_700_000_000,
        }
    }

    #[test]
    fn text_roundtrip() {
        let f = sample();
        assert_eq!(SessionFile::parse(&f.to_text()), Some(f));
        assert_eq!(SessionFile::parse("server = nonsense"), None);
    }

    #[test]
    fn freshness() {
        let f = sample();
        assert!(f.is_fresh(1_700_000_100, 86_400));
        assert!(!f.is_fresh(1_700_086_400, 1_000_000));
        assert!(!f.is_fresh(1_700_000_100, 50));
    }

    #[test]
    fn file_store_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = FileResumeStore::new(tmp.path()).unwrap();
        let f = sample();
        s.save(&f).unwrap();
        assert!(tmp.path().join("10.0.0.1_4433.session").exists());
        assert_eq!(s.load(f.server), Some(f));
    }
}
