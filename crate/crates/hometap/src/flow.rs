//! Traffic separation: partition a direction-tagged trace into per-service
//! streams keyed by (remote endpoint, NAT-side local port, transport).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Direction, Stream, StreamKey, Trace};

/// Result of stream separation. Unknown-direction packets cannot be keyed
/// (there is no way to tell which side is the service) and are counted
/// instead; every other packet lands in exactly one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub streams: Vec<Stream>,
    pub unknown_direction: u64,
}

/// Splits a validated, direction-tagged trace into streams, ordered by
/// stream key. Packets within a stream keep trace (time) order.
pub fn separate_streams(trace: &Trace) -> Separation {
    let mut buckets: BTreeMap<StreamKey, Vec<crate::model::PacketRecord>> = BTreeMap::new();
    let mut unknown = 0u64;
    for p in &trace.packets {
        if p.direction == Direction::Unknown {
            unknown += 1;
            continue;
        }
        let key = StreamKey {
            remote_ip: p.remote_ip,
            remote_port: p.remote_port,
            local_port: p.local_port,
            transport: p.transport,
        };
        buckets.entry(key).or_default().push(*p);
    }
    Separation {
        streams: buckets
            .into_iter()
            .map(|(key, packets)| Stream { key, packets, label: None })
            .collect(),
        unknown_direction: unknown,
    }
}

/// Per-stream byte/packet summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StreamStats {
    pub packets: u64,
    pub send_bytes: u64,
    pub recv_bytes: u64,
    pub first_ts: f64,
    pub last_ts: f64,
}

/// Totals for one stream; an empty stream reports all zeros.
pub fn stream_stats(stream: &Stream) -> StreamStats {
    let mut stats = StreamStats::default();
    stats.packets = stream.packets.len() as u64;
    for p in &stream.packets {
        match p.direction {
            Direction::Outbound => stats.send_bytes += p.wire_len as u64,
            Direction::Inbound => stats.recv_bytes += p.wire_len as u64,
            Direction::Unknown => {}
        }
    }
    if let (Some(first), Some(last)) = (stream.packets.first(), stream.packets.last()) {
        stats.first_ts = first.timestamp();
        stats.last_ts = last.timestamp();
    }
    stats
}
