//! Reassembly of MQTT messages from transport stream bytes.

use crate::mqtt::{frame_len, CodecError};
use crate::transport::StreamId;
use std::collections::BTreeMap;

#[derive(Debug, Default)]
pub struct Framer {
    bufs: BTreeMap<StreamId, Vec<u8>>,
}

impl Framer {
    /// Appends stream bytes and splits off complete messages. On a bad
    /// header the stream's buffered bytes are discarded.
    pub fn push(&mut self, id: StreamId, data: &[u8]) -> Result<Vec<Vec<u8>>, CodecError> {
        let buf = self.bufs.entry(id).or_default();
        buf.extend_from_slice(data);
        let mut out = Vec::new();
        loop {
            match frame_len(buf) {
                Ok(Some(n)) => out.push(buf.drain(..n).collect()),
                Ok(None) => break,
                Err(e) => {
                    self.bufs.remove(&id);
                    return if out.is_empty() { Err(e) } else { Ok(out) };
                }
            }
        }
        if buf.is_empty() {
            self.bufs.remove(&id);
        }
        Ok(out)
    }

    pub fn forget(&mut self, id: StreamId) {
        self.bufs.remove(&id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mqtt::MqttMessage;

    #[test]
    fn split_and_join() {
        let a = MqttMessage::publish("t", b"one", 0, false, 0).encode();
        let b = MqttMessage::disconnect().encode();
        let mut all = a.clone();
        all.extend_from_slice(&b);
        let mut f = Framer::default();
        assert_eq!(f.push(1, &all[..3]).unwrap(), Vec::<Vec<u8>>::new());
        assert_eq!(f.push(1, &all[3..]).unwrap(), vec![a, b]);
        assert!(f.push(3, &[0xf0, 0]).is_err());
        assert!(f.bufs.is_empty());
    }
}
