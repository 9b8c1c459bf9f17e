//! Capture ingestion: pcap and JSONL parsing, the cleartext-DNS side
//! channel, and direction tagging against a home subnet.

pub mod dns;
pub mod jsonl;
pub mod pcap;

use std::collections::{BTreeMap, VecDeque};

use crate::model::{Cidr, Direction, DnsObservation, PacketRecord, Trace, Transport, MICROS_PER_SEC};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("pcap: file too short for the 24-byte global header")]
    PcapTruncated,
    #[error("pcap: unrecognized magic 0x{0:08x}")]
    PcapBadMagic(u32),
    #[error("pcap: nanosecond-resolution captures are unsupported; re-save with microsecond timestamps")]
    PcapNanosecondUnsupported,
    #[error("pcap: unsupported link type {0}; only Ethernet (link type 1) captures are readable")]
    PcapUnsupportedLinkType(u32),
    #[error("jsonl line {line}: {reason}")]
    Jsonl { line: usize, reason: String },
    #[error("packet {index} cannot be written: {reason}")]
    Unwritable { index: usize, reason: String },
    #[error("DNS observation at t={ts} has no matching packet to ride on")]
    DanglingDns { ts: f64 },
}

/// A parsed capture: the packet trace plus everything read from the side:
/// cleartext DNS observations and ingest counters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Capture {
    pub trace: Trace,
    pub dns: Vec<DnsObservation>,
    pub skipped_packets: u64,
    pub malformed_dns: u64,
}

impl Capture {
    pub fn new(trace: Trace, dns: Vec<DnsObservation>) -> Self {
        Capture { trace, dns, skipped_packets: 0, malformed_dns: 0 }
    }

    /// Direction-tags the trace in place against `subnet`.
    pub fn tag(mut self, subnet: Cidr) -> Self {
        self.trace = tag_direction(self.trace, subnet);
        self
    }
}

/// Parses pcap bytes and extracts the DNS side channel in one go.
pub fn load_pcap(bytes: &[u8]) -> Result<Capture, IngestError> {
    let (trace, skipped_packets) = pcap::parse_pcap(bytes)?;
    let (dns, malformed_dns) = pcap::extract_dns(bytes)?;
    Ok(Capture { trace, dns, skipped_packets, malformed_dns })
}

/// Parses JSONL text; DNS observations ride on packet lines.
pub fn load_jsonl(text: &str) -> Result<Capture, IngestError> {
    let (trace, dns) = jsonl::parse_jsonl(text)?;
    Ok(Capture { trace, dns, skipped_packets: 0, malformed_dns: 0 })
}

/// Assigns packet directions relative to `subnet`: source inside means
/// Outbound, destination inside means Inbound, both or neither stays
/// Unknown. Local/remote fields are re-oriented to match, and the trace
/// remembers the subnet. Safe to re-run with a different subnet.
pub fn tag_direction(mut trace: Trace, subnet: Cidr) -> Trace {
    for p in &mut trace.packets {
        let ((src_ip, src_port), (dst_ip, dst_port)) = p.src_dst();
        let (direction, local, remote) = match (subnet.contains(src_ip), subnet.contains(dst_ip)) {
            (true, false) => (Direction::Outbound, (src_ip, src_port), (dst_ip, dst_port)),
            (false, true) => (Direction::Inbound, (dst_ip, dst_port), (src_ip, src_port)),
            _ => (Direction::Unknown, (src_ip, src_port), (dst_ip, dst_port)),
        };
        p.direction = direction;
        p.local_ip = local.0;
        p.local_port = local.1;
        p.remote_ip = remote.0;
        p.remote_port = remote.1;
    }
    trace.home_subnet = Some(subnet);
    trace
}

/// True when a packet can carry a DNS response payload on the wire: UDP with
/// source port 53.
pub(crate) fn is_dns_carrier(p: &PacketRecord) -> bool {
    p.transport == Transport::Udp && p.src_dst().0 .1 == 53
}

/// Pairs DNS observations with same-timestamp packets for the writers.
/// Carrier packets (UDP from port 53) are preferred; with
/// `allow_any_same_ts` a leftover observation may ride any other packet at
/// its timestamp (JSONL can express that, pcap cannot). Returns
/// `packet index -> observation index` or the timestamp of the first
/// observation that found no packet.
pub(crate) fn pair_dns(
    trace: &Trace,
    observations: &[DnsObservation],
    allow_any_same_ts: bool,
) -> Result<BTreeMap<usize, usize>, IngestError> {
    let mut by_ts: BTreeMap<u64, VecDeque<usize>> = BTreeMap::new();
    for (i, obs) in observations.iter().enumerate() {
        by_ts.entry(obs.ts_micros).or_default().push_back(i);
    }
    let mut pairing: BTreeMap<usize, usize> = BTreeMap::new();

    for carriers_only in [true, false] {
        if !carriers_only && !allow_any_same_ts {
            break;
        }
        for (pi, p) in trace.packets.iter().enumerate() {
            if pairing.contains_key(&pi) || (carriers_only != is_dns_carrier(p)) {
                continue;
            }
            if let Some(queue) = by_ts.get_mut(&p.ts_micros) {
                if let Some(oi) = queue.pop_front() {
                    pairing.insert(pi, oi);
                }
            }
        }
    }

    for (ts, queue) in &by_ts {
        if !queue.is_empty() {
            return Err(IngestError::DanglingDns { ts: *ts as f64 / MICROS_PER_SEC as f64 });
        }
    }
    Ok(pairing)
}
