//! Handshake messages and the cryptographic state behind them: server
//! configuration, source-address tokens, the strike register, and the
//! client/server key derivations for both key epochs.

use super::ConnectionId;
use crate::crypto::{
    aead_open, aead_seal, dh_keypair, dh_shared, extract_expand, sha256, sign, split_keys, ver,
    AeadKey, CryptoError, CryptoRng, DhPublic, DhSecret, Group, KeySet, Nonce, SignatureKeyPair,
    KEY_SET_LEN, SCFG_SIGNATURE_LABEL,
};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use thiserror::Error;

pub type Tag = [u8; 4];

pub const TAG_CHLO: Tag = *b"CHLO";
pub const TAG_REJ: Tag = *b"REJ\0";
pub const TAG_SHLO: Tag = *b"SHLO";

pub const TAG_SCID: Tag = *b"SCID";
pub const TAG_PUBS: Tag = *b"PUBS";
pub const TAG_EXPY: Tag = *b"EXPY";
pub const TAG_PROF: Tag = *b"PROF";
pub const TAG_STK: Tag = *b"STK\0";
pub const TAG_NONC: Tag = *b"NONC";
pub const TAG_PUBC: Tag = *b"PUBC";
pub const TAG_RRSN: Tag = *b"RRSN";

pub const NONC_LEN: usize = 24;

/// Why a server refused a full CHLO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    StkInvalid,
    StkIpMismatch,
    StkStale,
    NoncReplayed,
    NoncOutOfWindow,
    ScidUnknown,
    ScidExpired,
    GroupMismatch,
}

impl RejectReason {
    const ALL: [RejectReason; 8] = [
        RejectReason::StkInvalid,
        RejectReason::StkIpMismatch,
        RejectReason::StkStale,
        RejectReason::NoncReplayed,
        RejectReason::NoncOutOfWindow,
        RejectReason::ScidUnknown,
        RejectReason::ScidExpired,
        RejectReason::GroupMismatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::StkInvalid => "stk_invalid",
            RejectReason::StkIpMismatch => "stk_ip_mismatch",
            RejectReason::StkStale => "stk_stale",
            RejectReason::NoncReplayed => "nonc_replayed",
            RejectReason::NoncOutOfWindow => "nonc_out_of_window",
            RejectReason::ScidUnknown => "scid_unknown",
            RejectReason::ScidExpired => "scid_expired",
            RejectReason::GroupMismatch => "group_mismatch",
        }
    }

    pub fn parse(s: &str) -> Option<RejectReason> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("malformed handshake message: {0}")]
    Malformed(&'static str),
    #[error("server config signature does not verify")]
    BadSignature,
    #[error("server config expired")]
    ConfigExpired,
    #[error("server config id does not match its contents")]
    ScidMismatch,
    #[error("rejected by server: {0}")]
    Rejected(RejectReason),
    #[error("server hello failed authentication or carried the wrong marker")]
    BadServerHello,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Tag-value message: `tag(4) || len(4) || (tag(4) || len(4) || value)*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeMessage {
    pub tag: Tag,
    pub entries: BTreeMap<Tag, Vec<u8>>,
}

impl HandshakeMessage {
    pub fn new(tag: Tag) -> Self {
        HandshakeMessage {
            tag,
            entries: BTreeMap::new(),
        }
    }

    pub fn with(mut self, tag: Tag, value: impl Into<Vec<u8>>) -> Self {
        self.entries.insert(tag, value.into());
        self
    }

    pub fn get(&self, tag: &Tag) -> Option<&[u8]> {
        self.entries.get(tag).map(Vec::as_slice)
    }

    fn require(&self, tag: &Tag) -> Result<&[u8], HandshakeError> {
        self.get(tag)
            .ok_or(HandshakeError::Malformed("missing entry"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let body_len: usize = self.entries.values().map(|v| 8 + v.len()).sum();
        let mut out = Vec::with_capacity(8 + body_len);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&(body_len as u32).to_be_bytes());
        for (t, v) in &self.entries {
            out.extend_from_slice(t);
            out.extend_from_slice(&(v.len() as u32).to_be_bytes());
            out.extend_from_slice(v);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, HandshakeError> {
        let bad = HandshakeError::Malformed("tag-value framing");
        if buf.len() < 8 {
            return Err(bad);
        }
        let tag: Tag = buf[..4].try_into().unwrap();
        let len = u32::from_be_bytes(buf[4..8].try_into().unwrap()) as usize;
        if buf.len() != 8 + len {
            return Err(bad);
        }
        let mut entries = BTreeMap::new();
        let mut pos = 8;
        while pos < buf.len() {
            if buf.len() - pos < 8 {
                return Err(bad);
            }
            let t: Tag = buf[pos..pos + 4].try_into().unwrap();
            let l = u32::from_be_bytes(buf[pos + 4..pos + 8].try_into().unwrap()) as usize;
            pos += 8;
            if buf.len() - pos < l || entries.insert(t, buf[pos..pos + l].to_vec()).is_some() {
                return Err(bad);
            }
            pos += l;
        }
        Ok(HandshakeMessage { tag, entries })
    }

    /// An inchoate CHLO carries no keys; it only solicits a REJ.
    pub fn is_inchoate_chlo(&self) -> bool {
        self.tag == TAG_CHLO && !self.entries.contains_key(&TAG_PUBC)
    }
}

/// Public part of a server configuration as a client caches it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScfgPub {
    pub scid: [u8; 32],
    pub pub_s: DhPublic,
    pub expy: u64,
    pub prof: Vec<u8>,
}

impl ScfgPub {
    /// `scid || pub_s || expy`, mixed into every key expansion.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = self.scid.to_vec();
        v.extend_from_slice(&self.pub_s.to_bytes());
        v.extend_from_slice(&self.expy.to_be_bytes());
        v
    }

    fn signed_payload(scid: &[u8; 32], pub_s: &[u8], expy: u64) -> Vec<u8> {
        let mut v = SCFG_SIGNATURE_LABEL.to_vec();
        v.push(0);
        v.extend_from_slice(scid);
        v.extend_from_slice(pub_s);
        v.extend_from_slice(&expy.to_be_bytes());
        v
    }

    pub fn compute_scid(pub_s: &DhPublic, expy: u64) -> [u8; 32] {
        sha256(&[&pub_s.to_bytes(), &expy.to_be_bytes()])
    }

    /// Client-side checks before trusting a config: scid recomputes, the
    /// signature verifies under the pinned key and the config is unexpired.
    pub fn verify(&self, pk: &[u8], now_unix: u64) -> Result<(), HandshakeError> {
        if Self::compute_scid(&self.pub_s, self.expy) != self.scid {
            return Err(HandshakeError::ScidMismatch);
        }
        let payload = Self::signed_payload(&self.scid, &self.pub_s.to_bytes(), self.expy);
        if !ver(pk, &payload, &self.prof) {
            return Err(HandshakeError::BadSignature);
        }
        if self.expy <= now_unix {
            return Err(HandshakeError::ConfigExpired);
        }
        Ok(())
    }

    fn from_message(m: &HandshakeMessage) -> Result<Self, HandshakeError> {
        let scid: [u8; 32] = m
            .require(&TAG_SCID)?
            .try_into()
            .map_err(|_| HandshakeError::Malformed("scid"))?;
        let pub_s = DhPublic::from_bytes(m.require(&TAG_PUBS)?)?;
        let expy = u64::from_be_bytes(
            m.require(&TAG_EXPY)?
                .try_into()
                .map_err(|_| HandshakeError::Malformed("expy"))?,
        );
        let prof = m.require(&TAG_PROF)?.to_vec();
        Ok(ScfgPub {
            scid,
            pub_s,
            expy,
            prof,
        })
    }
}

/// A server configuration together with its DH secret.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub public: ScfgPub,
    pub sec_s: DhSecret,
}

/// Builds a fresh signed configuration valid until `now_unix + rotation`.
pub fn get_scfg(
    sk: &[u8],
    now_unix: u64,
    rotation_secs: u64,
    group: Group,
    rng: &mut impl CryptoRng,
) -> Result<ServerConfig, CryptoError> {
    let kp = dh_keypair(group, rng);
    let expy = now_unix + rotation_secs;
    let scid = ScfgPub::compute_scid(&kp.public, expy);
    let prof = sign(
        sk,
        &ScfgPub::signed_payload(&scid, &kp.public.to_bytes(), expy),
    )?;
    Ok(ServerConfig {
        public: ScfgPub {
            scid,
            pub_s: kp.public,
            expy,
            prof,
        },
        sec_s: kp.secret,
    })
}

/// Source-address token: `iv_stk(12) || AEAD(k_stk, iv_stk, "", ip || time)`.
pub fn mint_stk(k_stk: &AeadKey, ip: Ipv4Addr, now_unix: u32, rng: &mut impl CryptoRng) -> Vec<u8> {
    let mut iv = [0u8; 12];
    rng.fill_bytes(&mut iv);
    let mut pt = ip.octets().to_vec();
    pt.extend_from_slice(&now_unix.to_be_bytes());
    let mut out = iv.to_vec();
    out.extend(aead_seal(k_stk, &Nonce(iv), b"", &pt));
    out
}

pub fn open_stk(k_stk: &AeadKey, stk: &[u8]) -> Option<(Ipv4Addr, u32)> {
    if stk.len() < 12 {
        return None;
    }
    let iv: [u8; 12] = stk[..12].try_into().unwrap();
    let pt = aead_open(k_stk, &Nonce(iv), b"", &stk[12..])?;
    if pt.len() != 8 {
        return None;
    }
    let ip = Ipv4Addr::new(pt[0], pt[1], pt[2], pt[3]);
    Some((ip, u32::from_be_bytes(pt[4..8].try_into().unwrap())))
}

/// Seen handshake nonces plus the accepted timestamp window.
#[derive(Debug, Clone)]
pub struct StrikeRegister {
    window_secs: u64,
    seen: BTreeSet<(u32, [u8; NONC_LEN])>,
}

impl StrikeRegister {
    pub fn new(window_secs: u64) -> Self {
        StrikeRegister {
            window_secs,
            seen: BTreeSet::new(),
        }
    }

    /// Accepts `nonc` at most once and only if its timestamp lies within the
    /// window around `now_unix`.
    pub fn check(&mut self, nonc: &[u8; NONC_LEN], now_unix: u64) -> Result<(), RejectReason> {
        let ts = u32::from_be_bytes(nonc[..4].try_into().unwrap());
        if (ts as u64).abs_diff(now_unix) > self.window_secs {
            return Err(RejectReason::NoncOutOfWindow);
        }
        if self.seen.contains(&(ts, *nonc)) {
            return Err(RejectReason::NoncReplayed);
        }
        Ok(())
    }

    pub fn insert(&mut self, nonc: &[u8; NONC_LEN], now_unix: u64) {
        let ts = u32::from_be_bytes(nonc[..4].try_into().unwrap());
        self.seen.insert((ts, *nonc));
        // Entries older than the window are rejected by the timestamp check.
        let floor = now_unix
            .saturating_sub(self.window_secs + 1)
            .min(u32::MAX as u64) as u32;
        self.seen = self.seen.split_off(&(floor, [0; NONC_LEN]));
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Tunables for the server side of the handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HandshakeConfig {
    pub group: Group,
    pub stk_validity_secs: u64,
    pub strike_window_secs: u64,
    pub scfg_rotation_secs: u64,
}

impl Default for HandshakeConfig {
    fn default() -> Self {
        HandshakeConfig {
            group: Group::X25519,
            stk_validity_secs: 24 * 3600,
            strike_window_secs: 300,
            scfg_rotation_secs: 24 * 3600,
        }
    }
}

/// Values the client must keep between its full CHLO and the SHLO.
#[derive(Debug, Clone)]
pub struct ClientSecrets {
    pub x_c: DhSecret,
    pub nonc: [u8; NONC_LEN],
    pub chlo: Vec<u8>,
    pub scfg: ScfgPub,
    pub stk: Vec<u8>,
}

/// Values the server keeps after accepting a full CHLO.
#[derive(Debug, Clone)]
pub struct ServerSecrets {
    pub ik: KeySet,
    pub nonc: [u8; NONC_LEN],
    pub pub_c: DhPublic,
    pub chlo: Vec<u8>,
    pub scfg_pub: Vec<u8>,
    pub div_nonce: [u8; 32],
    pub client_ip: Ipv4Addr,
}

pub fn c_i_hello() -> HandshakeMessage {
    HandshakeMessage::new(TAG_CHLO)
}

/// Reads the server config and token out of a REJ.
pub fn parse_rej(
    rej: &HandshakeMessage,
) -> Result<(ScfgPub, Vec<u8>, Option<RejectReason>), HandshakeError> {
    if rej.tag != TAG_REJ {
        return Err(HandshakeError::Malformed("expected REJ"));
    }
    let scfg = ScfgPub::from_message(rej)?;
    let stk = rej.require(&TAG_STK)?.to_vec();
    let reason = match rej.get(&TAG_RRSN) {
        Some(r) => Some(
            std::str::from_utf8(r)
                .ok()
                .and_then(RejectReason::parse)
                .ok_or(HandshakeError::Malformed("reason"))?,
        ),
        None => None,
    };
    Ok((scfg, stk, reason))
}

/// Builds the full CHLO from a trusted config and token: fresh nonce
/// `timestamp(4) || random(20)` and a fresh ephemeral DH value in the
/// config's group.
pub fn c_hello(
    scfg: &ScfgPub,
    stk: &[u8],
    server_pk: &[u8],
    now_unix: u64,
    rng: &mut impl CryptoRng,
) -> Result<(HandshakeMessage, ClientSecrets), HandshakeError> {
    scfg.verify(server_pk, now_unix)?;
    let mut nonc = [0u8; NONC_LEN];
    nonc[..4].copy_from_slice(&(now_unix as u32).to_be_bytes());
    rng.fill_bytes(&mut nonc[4..]);
    let kp = dh_keypair(scfg.pub_s.group(), rng);
    let chlo = HandshakeMessage::new(TAG_CHLO)
        .with(TAG_STK, stk)
        .with(TAG_SCID, scfg.scid)
        .with(TAG_NONC, nonc)
        .with(TAG_PUBC, kp.public.to_bytes());
    let secrets = ClientSecrets {
        x_c: kp.secret,
        nonc,
        chlo: chlo.encode(),
        scfg: scfg.clone(),
        stk: stk.to_vec(),
    };
    Ok((chlo, secrets))
}

fn expand(
    ipm: &[u8],
    nonc: &[u8],
    cid: ConnectionId,
    m: &[u8],
    scfg_pub: &[u8],
    init: bool,
) -> KeySet {
    let material =
        extract_expand(ipm, nonc, cid.0, m, scfg_pub, KEY_SET_LEN, init).expect("40 bytes");
    split_keys(&material).expect("40 bytes")
}

/// Client initial key: `ipm = y_s^x_c`, expanded over the CHLO.
pub fn derive_initial_keys_client(
    s: &ClientSecrets,
    cid: ConnectionId,
) -> Result<KeySet, HandshakeError> {
    let ipm = dh_shared(&s.x_c, &s.scfg.pub_s)?;
    Ok(expand(
        &ipm,
        &s.nonc,
        cid,
        &s.chlo,
        &s.scfg.to_bytes(),
        true,
    ))
}

/// Final key on the client from the server's fresh DH value in the SHLO.
pub fn derive_final_keys_client(
    s: &ClientSecrets,
    shlo: &[u8],
    div_nonce: &[u8; 32],
    cid: ConnectionId,
) -> Result<(KeySet, Option<Vec<u8>>), HandshakeError> {
    let msg = HandshakeMessage::decode(shlo)?;
    if msg.tag != TAG_SHLO {
        return Err(HandshakeError::BadServerHello);
    }
    let pub_s = DhPublic::from_bytes(msg.require(&TAG_PUBS)?)?;
    let pms = dh_shared(&s.x_c, &pub_s)?;
    let m = final_transcript(&s.chlo, shlo, div_nonce);
    let stk = msg.get(&TAG_STK).map(<[u8]>::to_vec);
    Ok((
        expand(&pms, &s.nonc, cid, &m, &s.scfg.to_bytes(), false),
        stk,
    ))
}

fn final_transcript(chlo: &[u8], shlo: &[u8], div_nonce: &[u8; 32]) -> Vec<u8> {
    let mut m = chlo.to_vec();
    m.extend_from_slice(shlo);
    m.extend_from_slice(div_nonce);
    m
}

/// Server-side cryptographic state: signing key, active configs, token key
/// and strike register.
#[derive(Debug, Clone)]
pub struct ServerCrypto {
    pub signing: SignatureKeyPair,
    pub config: HandshakeConfig,
    configs: BTreeMap<[u8; 32], ServerConfig>,
    current: [u8; 32],
    k_stk: AeadKey,
    pub strike: StrikeRegister,
}

impl ServerCrypto {
    pub fn new(
        signing: SignatureKeyPair,
        config: HandshakeConfig,
        now_unix: u64,
        rng: &mut impl CryptoRng,
    ) -> Result<Self, CryptoError> {
        let scfg = get_scfg(
            &signing.sk,
            now_unix,
            config.scfg_rotation_secs,
            config.group,
            rng,
        )?;
        let mut k_stk = AeadKey::default();
        rng.fill_bytes(&mut k_stk.0);
        let current = scfg.public.scid;
        let mut configs = BTreeMap::new();
        configs.insert(current, scfg);
        Ok(ServerCrypto {
            signing,
            config,
            configs,
            current,
            k_stk,
            strike: StrikeRegister::new(config.strike_window_secs),
        })
    }

    /// The active config, rotated when it has expired. Expired configs are
    /// kept so that CHLOs naming them get `scid_expired` rather than
    /// `scid_unknown`.
    pub fn current_scfg(&mut self, now_unix: u64, rng: &mut impl CryptoRng) -> &ServerConfig {
        if self.configs[&self.current].public.expy <= now_unix {
            self.rotate(now_unix, rng);
        }
        &self.configs[&self.current]
    }

    /// Replaces the active config immediately.
    pub fn rotate(&mut self, now_unix: u64, rng: &mut impl CryptoRng) {
        let c = &self.config;
        let scfg = get_scfg(
            &self.signing.sk,
            now_unix,
            c.scfg_rotation_secs,
            c.group,
            rng,
        )
        .expect("own key");
        self.current = scfg.public.scid;
        self.configs.insert(self.current, scfg);
    }

    /// Forgets every config except the active one.
    pub fn forget_old_configs(&mut self) {
        let cur = self.configs.remove(&self.current).expect("current config");
        self.configs.clear();
        self.configs.insert(self.current, cur);
    }

    pub fn mint_stk(&self, ip: Ipv4Addr, now_unix: u64, rng: &mut impl CryptoRng) -> Vec<u8> {
        mint_stk(&self.k_stk, ip, now_unix as u32, rng)
    }

    pub fn open_stk(&self, stk: &[u8]) -> Option<(Ipv4Addr, u32)> {
        open_stk(&self.k_stk, stk)
    }

    /// Builds a REJ carrying the active config, its signature and a fresh
    /// token bound to `client_ip`.
    pub fn s_reject(
        &mut self,
        client_ip: Ipv4Addr,
        now_unix: u64,
        reason: Option<RejectReason>,
        rng: &mut impl CryptoRng,
    ) -> HandshakeMessage {
        let p = self.current_scfg(now_unix, rng).public.clone();
        let stk = self.mint_stk(client_ip, now_unix, rng);
        let mut rej = HandshakeMessage::new(TAG_REJ)
            .with(TAG_SCID, p.scid)
            .with(TAG_PUBS, p.pub_s.to_bytes())
            .with(TAG_EXPY, p.expy.to_be_bytes())
            .with(TAG_PROF, p.prof)
            .with(TAG_STK, stk);
        if let Some(r) = reason {
            rej = rej.with(TAG_RRSN, r.as_str());
        }
        rej
    }

    /// Validates a full CHLO and derives the initial key. Guards run in a
    /// fixed order: token, strike register, config id, group.
    pub fn accept_chlo(
        &mut self,
        chlo: &HandshakeMessage,
        client_ip: Ipv4Addr,
        now_unix: u64,
        cid: ConnectionId,
        rng: &mut impl CryptoRng,
    ) -> Result<ServerSecrets, RejectReason> {
        let stk = chlo.get(&TAG_STK).ok_or(RejectReason::StkInvalid)?;
        let (ip, ts) = self.open_stk(stk).ok_or(RejectReason::StkInvalid)?;
        if ip != client_ip {
            return Err(RejectReason::StkIpMismatch);
        }
        let ts = ts as u64;
        if ts > now_unix + self.config.strike_window_secs
            || now_unix - ts.min(now_unix) > self.config.stk_validity_secs
        {
            return Err(RejectReason::StkStale);
        }
        let nonc: [u8; NONC_LEN] = chlo
            .get(&TAG_NONC)
            .and_then(|n| n.try_into().ok())
            .ok_or(RejectReason::NoncOutOfWindow)?;
        self.strike.check(&nonc, now_unix)?;
        let scid: [u8; 32] = chlo
            .get(&TAG_SCID)
            .and_then(|s| s.try_into().ok())
            .ok_or(RejectReason::ScidUnknown)?;
        let scfg = self.configs.get(&scid).ok_or(RejectReason::ScidUnknown)?;
        if scfg.public.expy <= now_unix {
            return Err(RejectReason::ScidExpired);
        }
        let pub_c = chlo
            .get(&TAG_PUBC)
            .and_then(|p| DhPublic::from_bytes(p).ok())
            .ok_or(RejectReason::GroupMismatch)?;
        if pub_c.group() != scfg.public.pub_s.group() {
            return Err(RejectReason::GroupMismatch);
        }
        let ipm = dh_shared(&scfg.sec_s, &pub_c).map_err(|_| RejectReason::GroupMismatch)?;
        let chlo_bytes = chlo.encode();
        let scfg_pub = scfg.public.to_bytes();
        let ik = expand(&ipm, &nonc, cid, &chlo_bytes, &scfg_pub, true);
        self.strike.insert(&nonc, now_unix);
        let mut div_nonce = [0u8; 32];
        rng.fill_bytes(&mut div_nonce);
        Ok(ServerSecrets {
            ik,
            nonc,
            pub_c,
            chlo: chlo_bytes,
            scfg_pub,
            div_nonce,
            client_ip,
        })
    }

    /// Builds the SHLO with a fresh server DH value and a fresh token, and
    /// derives the forward-secure key.
    pub fn s_hello(
        &self,
        s: &ServerSecrets,
        cid: ConnectionId,
        now_unix: u64,
        rng: &mut impl CryptoRng,
    ) -> Result<(Vec<u8>, KeySet), HandshakeError> {
        let kp = dh_keypair(s.pub_c.group(), rng);
        let stk = self.mint_stk(s.client_ip, now_unix, rng);
        let shlo = HandshakeMessage::new(TAG_SHLO)
            .with(TAG_PUBS, kp.public.to_bytes())
            .with(TAG_STK, stk)
            .encode();
        let pms = dh_shared(&kp.secret, &s.pub_c)?;
        let m = final_transcript(&s.chlo, &shlo, &s.div_nonce);
        Ok((
            shlo.clone(),
            expand(&pms, &s.nonc, cid, &m, &s.scfg_pub, false),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::kg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const NOW: u64 = 1_700_000_000;
    const IP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);

    fn server(rng: &mut ChaCha20Rng) -> ServerCrypto {
        let kp = kg(128, rng).unwrap();
        ServerCrypto::new(kp, HandshakeConfig::default(), NOW, rng).unwrap()
    }

    fn full_chlo(
        s: &mut ServerCrypto,
        rng: &mut ChaCha20Rng,
        now: u64,
    ) -> (HandshakeMessage, ClientSecrets) {
        let rej = s.s_reject(IP, now, None, rng);
        let (scfg, stk, _) = parse_rej(&rej).unwrap();
        c_hello(&scfg, &stk, &s.signing.pk.clone(), now, rng).unwrap()
    }

    #[test]
    fn tlv_roundtrip_and_framing_errors() {
        let m = HandshakeMessage::new(TAG_CHLO)
            .with(TAG_NONC, vec![1, 2])
            .with(TAG_SCID, vec![]);
        let b = m.encode();
        assert_eq!(&b[..4], b"CHLO");
        assert_eq!(HandshakeMessage::decode(&b).unwrap(), m);
        assert!(HandshakeMessage::decode(&b[..b.len() - 1]).is_err());
        assert!(HandshakeMessage::decode(b"CH").is_err());
    }

    #[test]
    fn scfg_signature_and_scid() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = kg(128, &mut rng).unwrap();
        let c = get_scfg(&kp.sk, NOW, 3600, Group::X25519, &mut rng).unwrap();
        assert_eq!(
            ScfgPub::compute_scid(&c.public.pub_s, c.public.expy),
            c.public.scid
        );
        c.public.verify(&kp.pk, NOW).unwrap();
        assert_eq!(
            c.public.verify(&kp.pk, NOW + 3601),
            Err(HandshakeError::ConfigExpired)
        );
        let mut bad = c.public.clone();
        bad.prof[3] ^= 1;
        assert_eq!(bad.verify(&kp.pk, NOW), Err(HandshakeError::BadSignature));
    }

    #[test]
    fn stk_binds_ip_and_time() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let s = server(&mut rng);
        let a = s.mint_stk(IP, NOW, &mut rng);
        let b = s.mint_stk(IP, NOW, &mut rng);
        assert_ne!(a[..12], b[..12]);
        assert_eq!(s.open_stk(&a), Some((IP, NOW as u32)));
        let mut t = a.clone();
        t[20] ^= 1;
        assert_eq!(s.open_stk(&t), None);
    }

    #[test]
    fn strike_register_window_and_replay() {
        let mut reg = StrikeRegister::new(300);
        let mut n = [7u8; NONC_LEN];
        n[..4].copy_from_slice(&(NOW as u32).to_be_bytes());
        assert_eq!(reg.check(&n, NOW), Ok(()));
        reg.insert(&n, NOW);
        assert_eq!(reg.check(&n, NOW + 1), Err(RejectReason::NoncReplayed));
        assert_eq!(reg.check(&n, NOW + 301), Err(RejectReason::NoncOutOfWindow));
        reg.insert(&[9u8; NONC_LEN], NOW + 10_000);
        assert_eq!(reg.len(), 0);
    }

    #[test]
    fn initial_and_final_keys_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut s = server(&mut rng);
        let cid = ConnectionId(42);
        let (chlo, cs) = full_chlo(&mut s, &mut rng, NOW);
        let ss = s.accept_chlo(&chlo, IP, NOW, cid, &mut rng).unwrap();
        let ik_c = derive_initial_keys_client(&cs, cid).unwrap();
        assert_eq!(ik_c, ss.ik);
        let (shlo, k_s) = s.s_hello(&ss, cid, NOW, &mut rng).unwrap();
        let (k_c, stk) = derive_final_keys_client(&cs, &shlo, &ss.div_nonce, cid).unwrap();
        assert_eq!(k_c, k_s);
        assert_ne!(k_c, ik_c);
        assert!(stk.is_some());
    }

    #[test]
    fn reject_reasons() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut s = server(&mut rng);
        let cid = ConnectionId(1);
        let (chlo, _) = full_chlo(&mut s, &mut rng, NOW);
        assert_eq!(
            s.accept_chlo(&chlo, Ipv4Addr::new(10, 0, 0, 2), NOW, cid, &mut rng)
                .unwrap_err(),
            RejectReason::StkIpMismatch
        );
        s.accept_chlo(&chlo, IP, NOW, cid, &mut rng).unwrap();
        assert_eq!(
            s.accept_chlo(&chlo, IP, NOW, cid, &mut rng).unwrap_err(),
            RejectReason::NoncReplayed
        );

        let (chlo, _) = full_chlo(&mut s, &mut rng, NOW);
        let day = 24 * 3600;
        assert_eq!(
            s.accept_chlo(&chlo, IP, NOW + day + 1, cid, &mut rng)
                .unwrap_err(),
            RejectReason::StkStale
        );

        let mut forged = chlo.clone();
        forged.entries.insert(TAG_STK, vec![0; 36]);
        assert_eq!(
            s.accept_chlo(&forged, IP, NOW, cid, &mut rng).unwrap_err(),
            RejectReason::StkInvalid
        );

        let (chlo, _) = full_chlo(&mut s, &mut rng, NOW);
        let mut late = chlo.clone();
        let mut n = late.get(&TAG_NONC).unwrap().to_vec();
        n[..4].copy_from_slice(&((NOW - 1000) as u32).to_be_bytes());
        late.entries.insert(TAG_NONC, n);
        assert_eq!(
            s.accept_chlo(&late, IP, NOW, cid, &mut rng).unwrap_err(),
            RejectReason::NoncOutOfWindow
        );

        let mut unknown = chlo.clone();
        unknown.entries.insert(TAG_SCID, vec![0; 32]);
        assert_eq!(
            s.accept_chlo(&unknown, IP, NOW, cid, &mut rng).unwrap_err(),
            RejectReason::ScidUnknown
        );

        let mut tiny = chlo.clone();
        tiny.entries.insert(
            TAG_PUBC,
            dh_keypair(Group::TINY, &mut rng).public.to_bytes(),
        );
        assert_eq!(
            s.accept_chlo(&tiny, IP, NOW, cid, &mut rng).unwrap_err(),
            RejectReason::GroupMismatch
        );
    }

    #[test]
    fn expired_config_is_named() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let kp = kg(128, &mut rng).unwrap();
        let cfg = HandshakeConfig {
            scfg_rotation_secs: 100,
            ..HandshakeConfig::default()
        };
        let mut s = ServerCrypto::new(kp, cfg, NOW, &mut rng).unwrap();
        let (chlo, _) = full_chlo(&mut s, &mut rng, NOW);
        s.rotate(NOW + 200, &mut rng);
        assert_eq!(
            s.accept_chlo(&chlo, IP, NOW + 200, ConnectionId(3), &mut rng)
                .unwrap_err(),
            RejectReason::ScidExpired
        );
    }

    #[test]
    fn rej_carries_reason() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut s = server(&mut rng);
        let rej = s.s_reject(IP, NOW, Some(RejectReason::NoncReplayed), &mut rng);
        assert_eq!(parse_rej(&rej).unwrap().2, Some(RejectReason::NoncReplayed));
        assert!(c_i_hello().is_inchoate_chlo());
    }
}
