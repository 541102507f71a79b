use std::time::Duration;

use asyncrma::transport::CostModel;
use asyncrma::{CtrlMessage, Packet, Role, Tag, Transport, UnitId, PACKET_LEN};
use proptest::prelude::*;

fn packet() -> impl Strategy<Value = Packet> {
    (any::<u32>(), any::<u32>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<u32>(), 0u8..=1).prop_map(
        |(dest, index, origin_offset, target_offset, data_size, segid, is_shmem)| Packet {
            dest,
            index,
            origin_offset,
            target_offset,
            data_size,
            segid,
            is_shmem,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn packet_round_trip(p in packet()) {
        let b = p.encode();
        prop_assert_eq!(b.len(), PACKET_LEN);
        prop_assert_eq!(Packet::decode(&b).unwrap(), p);
    }

    #[test]
    fn truncated_or_padded_frames_are_rejected(p in packet(), cut in 0usize..PACKET_LEN) {
        let b = p.encode();
        prop_assert!(Packet::decode(&b[..cut]).is_err());
        let mut long = b.to_vec();
        long.push(0);
        prop_assert!(Packet::decode(&long).is_err());
    }
}

proptest! {
    #[test]
    fn per_pair_order_survives_interleaving(sends in proptest::collection::vec(0u32..3, 1..200)) {
        let units: Vec<UnitId> = (0..4).map(|r| UnitId::new(r, 0, Role::Application)).collect();
        let cost = CostModel { latency: Duration::ZERO, bandwidth: 1e9, dilation: 1.0 };
        let t = Transport::new(units.clone(), 1, cost, false).unwrap();
        let me = units[3];
        let mut seq = [0u32; 3];
        for &src in &sends {
            t.send_ctrl(CtrlMessage {
                src: units[src as usize],
                dst: me,
                tag: Tag::Get,
                payload: seq[src as usize].to_le_bytes().to_vec(),
            }).unwrap();
            seq[src as usize] += 1;
        }
        let mut next = [0u32; 3];
        for _ in 0..sends.len() {
            let h = t.iprobe(me).unwrap();
            let m = t.recv_ctrl(me, h.src, h.tag).unwrap();
            let n = u32::from_le_bytes(m.payload.try_into().unwrap());
            prop_assert_eq!(n, next[h.src.rank() as usize]);
            next[h.src.rank() as usize] += 1;
        }
        prop_assert!(t.iprobe(me).is_none());
    }

    #[test]
    fn cost_model_is_monotone(a in 0usize..1 << 24, b in 0usize..1 << 24, lat in 0u64..1000) {
        let c = CostModel { latency: Duration::from_micros(lat), bandwidth: 1e9, dilation: 1.0 };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(c.delay(lo) <= c.delay(hi));
        prop_assert!(c.delay(lo) >= c.latency);
    }
}
