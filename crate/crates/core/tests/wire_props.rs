use proptest::prelude::*;
use quicmqtt::mqtt::codec::MqttMessage;
use quicmqtt::mqtt::topic::matches;
use quicmqtt::transport::frame::{decode_frames, encode_frames, AckFrame, Frame, SENT_NACK_RANGES};
use quicmqtt::transport::ranges::RangeSet;
use quicmqtt::transport::wire::{Epoch, Header, Packet};
use quicmqtt::transport::ConnectionId;
use std::collections::BTreeSet;

fn received() -> impl Strategy<Value = BTreeSet<u64>> {
    proptest::collection::btree_set(1u64..2000, 1..300)
}

fn ack_for(set: &BTreeSet<u64>, limit: usize) -> AckFrame {
    let mut r = RangeSet::new();
    for &x in set {
        r.insert(x);
    }
    AckFrame {
        largest: r.max().unwrap(),
        delay_us: 25,
        nacks: r.gaps(limit),
    }
}

fn frame() -> impl Strategy<Value = Frame> {
    prop_oneof![
        (1usize..64).prop_map(Frame::Padding),
        (
            any::<u32>(),
            0u64..1 << 40,
            any::<bool>(),
            proptest::collection::vec(any::<u8>(), 0..200)
        )
            .prop_map(|(id, offset, fin, data)| Frame::Stream {
                id,
                offset,
                fin,
                data
            }),
        (received(), 1usize..64).prop_map(|(s, l)| Frame::Ack(ack_for(&s, l))),
        (any::<u32>(), any::<u64>())
            .prop_map(|(stream_id, offset)| Frame::WindowUpdate { stream_id, offset }),
        (any::<u32>(), any::<u64>(), any::<u32>()).prop_map(
            |(stream_id, final_offset, error_code)| {
                Frame::RstStream {
                    stream_id,
                    final_offset,
                    error_code,
                }
            }
        ),
        Just(Frame::Ping),
        (any::<u32>(), "[a-z ]{0,40}")
            .prop_map(|(error_code, reason)| Frame::Close { error_code, reason }),
    ]
}

proptest! {
    #[test]
    fn frames_roundtrip(frames in proptest::collection::vec(frame(), 1..8)) {
        // Adjacent padding coalesces on decode.
        let mut want: Vec<Frame> = Vec::new();
        for f in frames.iter().cloned() {
            match (want.last_mut(), &f) {
                (Some(Frame::Padding(a)), Frame::Padding(b)) => *a += b,
                _ => want.push(f),
            }
        }
        let buf = encode_frames(&frames);
        prop_assert_eq!(buf.len(), frames.iter().map(Frame::encoded_len).sum::<usize>());
        prop_assert_eq!(decode_frames(&buf).unwrap(), want);
    }

    #[test]
    fn decoding_arbitrary_bytes_never_panics(b in proptest::collection::vec(any::<u8>(), 0..300)) {
        let _ = decode_frames(&b);
        let _ = Packet::decode(&b);
        let _ = MqttMessage::decode(&b);
    }

    #[test]
    fn capped_ack_never_acks_a_missing_packet(set in received(), limit in 1usize..=SENT_NACK_RANGES) {
        let ack = ack_for(&set, limit);
        prop_assert!(ack.nacks.len() <= limit);
        for sqn in 1..=ack.largest {
            if ack.acks(sqn) {
                prop_assert!(set.contains(&sqn), "false ack of {}", sqn);
            }
        }
        // Uncapped, the ack is exact.
        let exact = ack_for(&set, usize::MAX);
        for sqn in 1..=exact.largest {
            prop_assert_eq!(exact.acks(sqn), set.contains(&sqn));
        }
    }

    #[test]
    fn packet_header_roundtrip(
        epoch in prop_oneof![Just(Epoch::Handshake), Just(Epoch::Initial), Just(Epoch::Final)],
        cid in any::<u64>(),
        sqn in any::<u64>(),
        version in any::<bool>(),
        div in proptest::option::of(any::<[u8; 32]>()),
        body in proptest::collection::vec(any::<u8>(), 16..200),
    ) {
        let mut header = Header::new(epoch, ConnectionId(cid), sqn);
        header.version = version.then_some(quicmqtt::transport::wire::VERSION);
        header.div_nonce = div;
        let p = Packet { header, body };
        prop_assert_eq!(Packet::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn publish_roundtrip(
        topic in "[a-z]{1,8}(/[a-z0-9]{1,8}){0,4}",
        payload in proptest::collection::vec(any::<u8>(), 0..2000),
        qos in 0u8..2,
        retained in any::<bool>(),
        msgid in 1u16..,
    ) {
        let m = MqttMessage::publish(&topic, &payload, qos, retained, if qos == 0 { 0 } else { msgid });
        prop_assert!(m.sanity().is_ok());
        prop_assert_eq!(MqttMessage::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn topic_filters(levels in proptest::collection::vec("[a-z0-9]{1,6}", 1..6), cut in 0usize..6) {
        let topic = levels.join("/");
        prop_assert!(matches(&topic, &topic));
        prop_assert!(matches("#", &topic));
        let cut = cut.min(levels.len() - 1);
        let prefix = levels[..cut].iter().map(|s| format!("{s}/")).collect::<String>();
        let multi = format!("{prefix}#");
        prop_assert!(matches(&multi, &topic));
        let mut plus = levels.clone();
        plus[cut] = "+".into();
        prop_assert!(matches(&plus.join("/"), &topic));
        let deeper = format!("{topic}/x");
        prop_assert!(!matches(&deeper, &topic));
    }
}
