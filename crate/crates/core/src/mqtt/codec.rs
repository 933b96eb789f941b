//! MQTT 3.1.1 fixed/variable header framing for the subset we carry.

use thiserror::Error;

pub const PROTOCOL_LEVEL: u8 = 4;
const PROTOCOL_NAME: &[u8] = b"MQTT";
/// Largest message accepted by the sanity check.
pub const MAX_MESSAGE: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum Kind {
    Connect = 1,
    Connack = 2,
    Publish = 3,
    Puback = 4,
    Subscribe = 8,
    Suback = 9,
    Unsubscribe = 10,
    Unsuback = 11,
    Pingreq = 12,
    Pingresp = 13,
    Disconnect = 14,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Kind> {
        Some(match v {
            1 => Kind::Connect,
            2 => Kind::Connack,
            3 => Kind::Publish,
            4 => Kind::Puback,
            8 => Kind::Subscribe,
            9 => Kind::Suback,
            10 => Kind::Unsubscribe,
            11 => Kind::Unsuback,
            12 => Kind::Pingreq,
            13 => Kind::Pingresp,
            14 => Kind::Disconnect,
            _ => return None,
        })
    }

    /// Flag nibble mandated for every kind except PUBLISH.
    fn fixed_flags(self) -> Option<u8> {
        match self {
            Kind::Publish => None,
            Kind::Subscribe | Kind::Unsubscribe => Some(0b0010),
            _ => Some(0),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("incomplete message: need {0} more bytes")]
    Incomplete(usize),
    #[error("malformed remaining length")]
    BadLength,
    #[error("invalid UTF-8 string")]
    BadUtf8,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("persistent session requires a client id")]
    EmptyClientId,
    #[error("qos 1 message needs a non-zero msgid")]
    ZeroMsgid,
    #[error("message exceeds {MAX_MESSAGE} bytes")]
    TooLarge,
}

/// One MQTT control packet. Fields a kind does not use stay at their
/// defaults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MqttMessage {
    pub kind: Kind,
    pub msgid: u16,
    pub dup: bool,
    pub retained: bool,
    pub qos: u8,
    /// PUBLISH topic, or the filter of a SUBSCRIBE/UNSUBSCRIBE.
    pub topic: String,
    pub payload: Vec<u8>,
    pub version: u8,
    pub client_id: String,
    /// CONNECT: keep the session across reconnects (clean-session bit
    /// cleared). CONNACK: a stored session was restored.
    pub persist: bool,
    pub keep_alive: u16,
    /// CONNACK return code or SUBACK granted qos (0x80 on failure).
    pub return_code: u8,
}

impl MqttMessage {
    pub fn new(kind: Kind) -> Self {
        MqttMessage {
            kind,
            msgid: 0,
            dup: false,
            retained: false,
            qos: 0,
            topic: String::new(),
            payload: Vec::new(),
            version: PROTOCOL_LEVEL,
            client_id: String::new(),
            persist: false,
            keep_alive: 0,
            return_code: 0,
        }
    }

    pub fn connect(client_id: &str, persist: bool) -> Self {
        MqttMessage {
            client_id: client_id.into(),
            persist,
            ..Self::new(Kind::Connect)
        }
    }

    pub fn connack(session_present: bool, return_code: u8) -> Self {
        MqttMessage {
            persist: session_present,
            return_code,
            ..Self::new(Kind::Connack)
        }
    }

    pub fn publish(topic: &str, payload: &[u8], qos: u8, retained: bool, msgid: u16) -> Self {
        MqttMessage {
            topic: topic.into(),
            payload: payload.to_vec(),
            qos,
            retained,
            msgid,
            ..Self::new(Kind::Publish)
        }
    }

    pub fn puback(msgid: u16) -> Self {
        MqttMessage {
            msgid,
            ..Self::new(Kind::Puback)
        }
    }

    pub fn subscribe(filter: &str, qos: u8, msgid: u16) -> Self {
        MqttMessage {
            topic: filter.into(),
            qos,
            msgid,
            ..Self::new(Kind::Subscribe)
        }
    }

    pub fn suback(msgid: u16, granted: u8) -> Self {
        MqttMessage {
            msgid,
            return_code: granted,
            ..Self::new(Kind::Suback)
        }
    }

    pub fn unsubscribe(filter: &str, msgid: u16) -> Self {
        MqttMessage {
            topic: filter.into(),
            msgid,
            ..Self::new(Kind::Unsubscribe)
        }
    }

    pub fn unsuback(msgid: u16) -> Self {
        MqttMessage {
            msgid,
            ..Self::new(Kind::Unsuback)
        }
    }

    pub fn disconnect() -> Self {
        Self::new(Kind::Disconnect)
    }

    fn flags(&self) -> u8 {
        match self.kind.fixed_flags() {
            Some(f) => f,
            None => (self.dup as u8) << 3 | (self.qos & 3) << 1 | self.retained as u8,
        }
    }

    fn body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self.kind {
            Kind::Connect => {
                put_str(&mut b, PROTOCOL_NAME);
                b.push(self.version);
                b.push(if self.persist { 0 } else { 0b10 });
                b.extend_from_slice(&self.keep_alive.to_be_bytes());
                put_str(&mut b, self.client_id.as_bytes());
            }
            Kind::Connack => {
                b.push(self.persist as u8);
                b.push(self.return_code);
            }
            Kind::Publish => {
                put_str(&mut b, self.topic.as_bytes());
                if self.qos > 0 {
                    b.extend_from_slice(&self.msgid.to_be_bytes());
                }
                b.extend_from_slice(&self.payload);
            }
            Kind::Puback | Kind::Unsuback => b.extend_from_slice(&self.msgid.to_be_bytes()),
            Kind::Subscribe => {
                b.extend_from_slice(&self.msgid.to_be_bytes());
                put_str(&mut b, self.topic.as_bytes());
                b.push(self.qos);
            }
            Kind::Suback => {
                b.extend_from_slice(&self.msgid.to_be_bytes());
                b.push(self.return_code);
            }
            Kind::Unsubscribe => {
                b.extend_from_slice(&self.msgid.to_be_bytes());
                put_str(&mut b, self.topic.as_bytes());
            }
            Kind::Pingreq | Kind::Pingresp | Kind::Disconnect => {}
        }
        b
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = self.body();
        let mut out = Vec::with_capacity(body.len() + 5);
        out.push((self.kind as u8) << 4 | self.flags());
        put_varint(&mut out, body.len());
        out.extend_from_slice(&body);
        out
    }

    /// Size and field checks run before a message is handed to the transport.
    pub fn sanity(&self) -> Result<(), CodecError> {
        if self.kind == Kind::Publish && self.qos > 1
            || self.kind == Kind::Subscribe && self.qos > 1
        {
            return Err(CodecError::Malformed("qos"));
        }
        if self.qos == 1 && self.msgid == 0 && matches!(self.kind, Kind::Publish) {
            return Err(CodecError::ZeroMsgid);
        }
        if self.kind == Kind::Connect && self.persist && self.client_id.is_empty() {
            return Err(CodecError::EmptyClientId);
        }
        if self.topic.len() > u16::MAX as usize || self.client_id.len() > u16::MAX as usize {
            return Err(CodecError::TooLarge);
        }
        if self.body().len() + 5 > MAX_MESSAGE {
            return Err(CodecError::TooLarge);
        }
        Ok(())
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CodecError> {
        let (kind, flags, hdr, len) = parse_header(buf)?;
        if buf.len() < hdr + len {
            return Err(CodecError::Incomplete(hdr + len - buf.len()));
        }
        if buf.len() > hdr + len {
            return Err(CodecError::Malformed("trailing bytes"));
        }
        let mut r = Cursor {
            buf: &buf[hdr..],
            pos: 0,
        };
        let mut m = MqttMessage::new(kind);
        match kind {
            Kind::Connect => {
                if r.string_bytes()? != PROTOCOL_NAME {
                    return Err(CodecError::Malformed("protocol name"));
                }
                m.version = r.u8()?;
                let cf = r.u8()?;
                if cf & !0b10 != 0 {
                    return Err(CodecError::Malformed("connect flags"));
                }
                m.persist = cf & 0b10 == 0;
                m.keep_alive = r.u16()?;
                m.client_id = r.string()?;
                if m.persist && m.client_id.is_empty() {
                    return Err(CodecError::EmptyClientId);
                }
            }
            Kind::Connack => {
                let f = r.u8()?;
                if f > 1 {
                    return Err(CodecError::Malformed("connack flags"));
                }
                m.persist = f == 1;
                m.return_code = r.u8()?;
            }
            Kind::Publish => {
                m.dup = flags & 0b1000 != 0;
                m.qos = (flags >> 1) & 3;
                m.retained = flags & 1 != 0;
                if m.qos > 1 {
                    return Err(CodecError::Malformed("qos"));
                }
                m.topic = r.string()?;
                if m.qos > 0 {
                    m.msgid = r.u16()?;
                    if m.msgid == 0 {
                        return Err(CodecError::ZeroMsgid);
                    }
                }
                m.payload = r.rest().to_vec();
            }
            Kind::Puback | Kind::Unsuback => m.msgid = r.u16()?,
            Kind::Subscribe => {
                m.msgid = r.u16()?;
                m.topic = r.string()?;
                m.qos = r.u8()?;
                if m.qos > 1 {
                    return Err(CodecError::Malformed("qos"));
                }
            }
            Kind::Suback => {
                m.msgid = r.u16()?;
                m.return_code = r.u8()?;
            }
            Kind::Unsubscribe => {
                m.msgid = r.u16()?;
                m.topic = r.string()?;
            }
            Kind::Pingreq | Kind::Pingresp | Kind::Disconnect => {}
        }
        if !r.rest().is_empty() {
            return Err(CodecError::Malformed("trailing bytes"));
        }
        Ok(m)
    }
}

fn put_str(out: &mut Vec<u8>, s: &[u8]) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s);
}

fn put_varint(out: &mut Vec<u8>, mut n: usize) {
    loop {
        let mut b = (n % 128) as u8;
        n /= 128;
        if n > 0 {
            b |= 0x80;
        }
        out.push(b);
        if n == 0 {
            break;
        }
    }
}

/// Returns (kind, flags, header length, remaining length).
fn parse_header(buf: &[u8]) -> Result<(Kind, u8, usize, usize), CodecError> {
    let first = *buf.first().ok_or(CodecError::Incomplete(2))?;
    let kind = Kind::from_u8(first >> 4).ok_or(CodecError::UnknownKind(first >> 4))?;
    let flags = first & 0x0f;
    if kind.fixed_flags().is_some_and(|f| f != flags) {
        return Err(CodecError::Malformed("fixed header flags"));
    }
    let mut len = 0usize;
    for i in 0..4 {
        let b = *buf.get(1 + i).ok_or(CodecError::Incomplete(1))?;
        len |= ((b & 0x7f) as usize) << (7 * i);
        if b & 0x80 == 0 {
            return Ok((kind, flags, 2 + i, len));
        }
    }
    Err(CodecError::BadLength)
}

/// Length of the first complete message in `buf`, `None` if more bytes are
/// needed.
pub fn frame_len(buf: &[u8]) -> Result<Option<usize>, CodecError> {
    match parse_header(buf) {
        Ok((_, _, hdr, len)) if buf.len() >= hdr + len => Ok(Some(hdr + len)),
        Ok(_) | Err(CodecError::Incomplete(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Whether `buf` starts with a well-formed fixed header. Says nothing about
/// the body.
pub fn valid_mqtt_header(buf: &[u8]) -> bool {
    parse_header(buf).is_ok()
}

/// Parses a message whose header already passed [`valid_mqtt_header`].
pub fn mqtt_parse_args(buf: &[u8]) -> Result<MqttMessage, CodecError> {
    assert!(
        valid_mqtt_header(buf),
        "mqtt_parse_args called on an invalid header"
    );
    MqttMessage::decode(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Malformed("body shorter than its fields"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn string_bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u16()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let b = self.string_bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| CodecError::BadUtf8)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn publish_roundtrip() {
        let m = MqttMessage::publish("a/b", b"hi", 0, false, 0);
        let b = m.encode();
        assert_eq!(b, [0x30, 7, 0, 3, b'a', b'/', b'b', b'h', b'i']);
        assert_eq!(MqttMessage::decode(&b).unwrap(), m);
    }

    #[test]
    fn connect_wire_layout() {
        let b = MqttMessage::connect("c1", false).encode();
        assert_eq!(
            b,
            [0x10, 14, 0, 4, b'M', b'Q', b'T', b'T', 4, 0b10, 0, 0, 0, 2, b'c', b'1']
        );
    }

    #[test]
    fn empty_client_id_with_persistence_is_rejected() {
        let mut m = MqttMessage::connect("", false);
        let mut b = m.encode();
        assert!(MqttMessage::decode(&b).is_ok());
        b[9] = 0;
        assert_eq!(MqttMessage::decode(&b), Err(CodecError::EmptyClientId));
        m.persist = true;
        assert_eq!(m.sanity(), Err(CodecError::EmptyClientId));
    }

    #[test]
    fn truncated_buffer_is_incomplete() {
        let b = MqttMessage::publish("t", b"payload", 1, false, 7).encode();
        assert_eq!(
            MqttMessage::decode(&b[..4]),
            Err(CodecError::Incomplete(b.len() - 4))
        );
        assert_eq!(MqttMessage::decode(&[]), Err(CodecError::Incomplete(2)));
        assert_eq!(frame_len(&b[..4]), Ok(None));
        assert_eq!(frame_len(&b), Ok(Some(b.len())));
    }

    #[test]
    fn header_check_is_separate_from_parse() {
        let b = MqttMessage::publish("topic", b"x", 0, false, 0).encode();
        assert!(valid_mqtt_header(&b[..3]));
        assert!(matches!(
            mqtt_parse_args(&b[..3]),
            Err(CodecError::Incomplete(_))
        ));
        assert!(!valid_mqtt_header(&[0x00, 0x00]));
        assert!(!valid_mqtt_header(&[0x80, 0x00]));
        assert!(!valid_mqtt_header(&[0x30, 0xff, 0xff, 0xff, 0xff]));
    }

    #[test]
    fn qos1_needs_msgid() {
        assert_eq!(
            MqttMessage::publish("t", b"", 1, false, 0).sanity(),
            Err(CodecError::ZeroMsgid)
        );
        let b = [0x32, 5, 0, 1, b't', 0, 0];
        assert_eq!(MqttMessage::decode(&b), Err(CodecError::ZeroMsgid));
    }

    #[test]
    fn oversized_message_fails_sanity() {
        let m = MqttMessage::publish("t", &vec![0; MAX_MESSAGE], 0, false, 0);
        assert_eq!(m.sanity(), Err(CodecError::TooLarge));
    }

    #[test]
    fn long_remaining_length() {
        let m = MqttMessage::publish("t", &[7; 300], 0, true, 0);
        let b = m.encode();
        assert_eq!(&b[..3], &[0x31, 0xaf, 0x02]);
        assert_eq!(MqttMessage::decode(&b).unwrap(), m);
    }
}
