//! Classic pcap reader/writer for Ethernet captures.
//!
//! Reading accepts both byte orders of the microsecond-resolution magic and
//! rejects nanosecond captures with a pointed error. Non-IPv4 frames and
//! truncated records are skipped and counted, never fatal. Writing emits
//! little-endian microsecond pcap with header-only frames (the IP total
//! length field carries the payload size), except that packets carrying a
//! DNS observation get a synthesized response payload so the cleartext-DNS
//! side channel survives a write/parse cycle.

use std::net::Ipv4Addr;

use crate::ingest::{dns, pair_dns, IngestError};
use crate::model::{Direction, DnsObservation, PacketRecord, Trace, Transport, MICROS_PER_SEC};

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        match self {
            Endian::Little => u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            Endian::Big => u32::from_be_bytes([b[0], b[1], b[2], b[3]]),
        }
    }
}

fn classify_magic(bytes: &[u8]) -> Result<Endian, IngestError> {
    let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if le == MAGIC_MICROS {
        Ok(Endian::Little)
    } else if be == MAGIC_MICROS {
        Ok(Endian::Big)
    } else if le == MAGIC_NANOS || be == MAGIC_NANOS {
        Err(IngestError::PcapNanosecondUnsupported)
    } else {
        Err(IngestError::PcapBadMagic(be))
    }
}

struct FrameLayout {
    transport: Transport,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    payload_len: u32,
    /// Offset of the transport payload within the frame, for DNS extraction.
    payload_offset: usize,
}

/// Decodes Ethernet/IPv4 headers out of one captured frame. `None` means the
/// frame is not analyzable (non-IPv4, truncated, malformed lengths) and
/// should be counted as skipped.
fn parse_frame(frame: &[u8]) -> Option<FrameLayout> {
    if frame.len() < 14 {
        return None;
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut ip_start = 14;
    if ethertype == ETHERTYPE_VLAN {
        // One level of 802.1Q: TCI (2 bytes), then the encapsulated type.
        if frame.len() < 18 {
            return None;
        }
        ethertype = u16::from_be_bytes([frame[16], frame[17]]);
        ip_start = 18;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return None;
    }

    let ip = frame.get(ip_start..)?;
    if ip.len() < 20 {
        return None;
    }
    if ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = ((ip[0] & 0x0F) as usize) * 4;
    if ihl < 20 || ip.len() < ihl {
        return None;
    }
    let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    let proto = ip[9];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);

    let th = &ip[ihl..];
    let (transport, src_port, dst_port, header_len) = match proto {
        6 => {
            if th.len() < 20 {
                return None;
            }
            let data_offset = ((th[12] >> 4) as usize) * 4;
            if data_offset < 20 {
                return None;
            }
            (
                Transport::Tcp,
                u16::from_be_bytes([th[0], th[1]]),
                u16::from_be_bytes([th[2], th[3]]),
                data_offset,
            )
        }
        17 => {
            if th.len() < 8 {
                return None;
            }
            (
                Transport::Udp,
                u16::from_be_bytes([th[0], th[1]]),
                u16::from_be_bytes([th[2], th[3]]),
                8,
            )
        }
        _ => (Transport::Other, 0, 0, 0),
    };

    let payload_len = total_len.checked_sub(ihl + header_len)?;
    Some(FrameLayout {
        transport,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        payload_len: payload_len as u32,
        payload_offset: ip_start + ihl + header_len,
    })
}

fn records(bytes: &[u8]) -> Result<(Endian, impl Iterator<Item = (u64, u32, &[u8])>), IngestError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::PcapTruncated);
    }
    let endian = classify_magic(bytes)?;
    let linktype = endian.u32(&bytes[20..24]);
    if linktype != LINKTYPE_ETHERNET {
        return Err(IngestError::PcapUnsupportedLinkType(linktype));
    }

    let mut offset = GLOBAL_HEADER_LEN;
    let iter = std::iter::from_fn(move || {
        if offset + RECORD_HEADER_LEN > bytes.len() {
            // Either clean EOF or a trailing partial header; the caller
            // counts the latter via the skipped-tail check below.
            return None;
        }
        let h = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = endian.u32(&h[0..4]) as u64;
        let ts_usec = endian.u32(&h[4..8]) as u64;
        let incl_len = endian.u32(&h[8..12]) as usize;
        let orig_len = endian.u32(&h[12..16]);
        let frame_start = offset + RECORD_HEADER_LEN;
        let frame_end = frame_start.checked_add(incl_len)?;
        if frame_end > bytes.len() {
            return None;
        }
        offset = frame_end;
        Some((
            ts_sec * MICROS_PER_SEC + ts_usec,
            orig_len,
            &bytes[frame_start..frame_end],
        ))
    });
    Ok((endian, iter))
}

fn tail_is_truncated(bytes: &[u8], consumed_records: &[usize]) -> bool {
    // A record iterator stops either at exact EOF or on a partial tail.
    let mut offset = GLOBAL_HEADER_LEN;
    for len in consumed_records {
        offset += RECORD_HEADER_LEN + len;
    }
    offset < bytes.len()
}

/// Parses classic pcap bytes into a trace of direction-untagged packets.
/// Returns the trace and the count of skipped records (non-IPv4, truncated,
/// malformed).
pub fn parse_pcap(bytes: &[u8]) -> Result<(Trace, u64), IngestError> {
    let (_endian, iter) = records(bytes)?;
    let mut packets = Vec::new();
    let mut skipped = 0u64;
    let mut lens = Vec::new();
    for (ts_micros, orig_len, frame) in iter {
        lens.push(frame.len());
        match parse_frame(frame) {
            Some(f) => packets.push(PacketRecord {
                ts_micros,
                direction: Direction::Unknown,
                local_ip: f.src_ip,
                remote_ip: f.dst_ip,
                local_port: f.src_port,
                remote_port: f.dst_port,
                transport: f.transport,
                wire_len: orig_len,
                payload_len: f.payload_len,
            }),
            None => skipped += 1,
        }
    }
    if tail_is_truncated(bytes, &lens) {
        skipped += 1;
    }
    Ok((Trace::new(packets), skipped))
}

/// Walks the same pcap bytes and decodes every UDP source-port-53 response
/// payload into a [`DnsObservation`]. Malformed DNS messages are counted,
/// never fatal. Queries and A-record-free responses produce nothing.
pub fn extract_dns(bytes: &[u8]) -> Result<(Vec<DnsObservation>, u64), IngestError> {
    let (_endian, iter) = records(bytes)?;
    let mut observations = Vec::new();
    let mut malformed = 0u64;
    for (ts_micros, _orig_len, frame) in iter {
        let Some(f) = parse_frame(frame) else { continue };
        if f.transport != Transport::Udp || f.src_port != 53 {
            continue;
        }
        let payload = frame.get(f.payload_offset..).unwrap_or(&[]);
        match dns::response_addresses(payload) {
            Ok(Some((query_name, answers))) => observations.push(DnsObservation {
                ts_micros,
                query_name,
                answers,
            }),
            Ok(None) => {}
            Err(_) => malformed += 1,
        }
    }
    Ok((observations, malformed))
}

fn ip_checksum(header: &[u8]) -> u16 {
    let mut sum = 0u32;
    for chunk in header.chunks(2) {
        let word = if chunk.len() == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]])
        } else {
            u16::from_be_bytes([chunk[0], 0])
        };
        sum += word as u32;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// Serializes a trace (plus its DNS side channel) as little-endian
/// microsecond pcap. Frames are synthesized from the record fields; parsing
/// the output recovers the identical trace, and [`extract_dns`] recovers the
/// observations. Every observation must ride a UDP source-port-53 packet at
/// its own timestamp — pcap has nowhere else to put it.
pub fn write_pcap(trace: &Trace, observations: &[DnsObservation]) -> Result<Vec<u8>, IngestError> {
    let pairing = pair_dns(trace, observations, false)?;

    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + trace.packets.len() * 70);
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // major
    out.extend_from_slice(&4u16.to_le_bytes()); // minor
    out.extend_from_slice(&0i32.to_le_bytes()); // thiszone
    out.extend_from_slice(&0u32.to_le_bytes()); // sigfigs
    out.extend_from_slice(&65535u32.to_le_bytes()); // snaplen
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());

    for (index, p) in trace.packets.iter().enumerate() {
        let unwritable = |reason: String| IngestError::Unwritable { index, reason };

        let dns_payload = match pairing.get(&index) {
            Some(&oi) => {
                let obs = &observations[oi];
                let msg = dns::build_response(index as u16, &obs.query_name, &obs.answers);
                if msg.len() as u32 > p.payload_len {
                    return Err(unwritable(format!(
                        "payload_len {} too small for its DNS response ({} bytes)",
                        p.payload_len,
                        msg.len()
                    )));
                }
                let mut padded = msg;
                padded.resize(p.payload_len as usize, 0);
                Some(padded)
            }
            None => None,
        };

        let ts_sec = p.ts_micros / MICROS_PER_SEC;
        let ts_usec = p.ts_micros % MICROS_PER_SEC;
        if ts_sec > u32::MAX as u64 {
            return Err(unwritable(format!("timestamp {}s exceeds pcap's 32-bit seconds", ts_sec)));
        }

        let ((src_ip, src_port), (dst_ip, dst_port)) = p.src_dst();
        let transport_header_len: usize = match p.transport {
            Transport::Tcp => 20,
            Transport::Udp => 8,
            Transport::Other => 0,
        };
        let ip_total = 20 + transport_header_len + p.payload_len as usize;
        if ip_total > u16::MAX as usize {
            return Err(unwritable(format!(
                "payload_len {} does not fit a single IPv4 frame",
                p.payload_len
            )));
        }

        let mut frame = Vec::with_capacity(54 + dns_payload.as_ref().map_or(0, |d| d.len()));
        frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]); // dst MAC
        frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]); // src MAC
        frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

        let mut ip = [0u8; 20];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&(ip_total as u16).to_be_bytes());
        ip[8] = 64; // TTL
        ip[9] = match p.transport {
            Transport::Tcp => 6,
            Transport::Udp => 17,
            Transport::Other => 253,
        };
        ip[12..16].copy_from_slice(&src_ip.octets());
        ip[16..20].copy_from_slice(&dst_ip.octets());
        let csum = ip_checksum(&ip);
        ip[10..12].copy_from_slice(&csum.to_be_bytes());
        frame.extend_from_slice(&ip);

        match p.transport {
            Transport::Tcp => {
                let mut th = [0u8; 20];
                th[0..2].copy_from_slice(&src_port.to_be_bytes());
                th[2..4].copy_from_slice(&dst_port.to_be_bytes());
                th[12] = 5 << 4;
                th[13] = 0x10; // ACK
                th[14..16].copy_from_slice(&0xFFFFu16.to_be_bytes());
                frame.extend_from_slice(&th);
            }
            Transport::Udp => {
                frame.extend_from_slice(&src_port.to_be_bytes());
                frame.extend_from_slice(&dst_port.to_be_bytes());
                frame.extend_from_slice(&((8 + p.payload_len) as u16).to_be_bytes());
                frame.extend_from_slice(&0u16.to_be_bytes());
            }
            Transport::Other => {}
        }
        if let Some(payload) = dns_payload {
            frame.extend_from_slice(&payload);
        }

        out.extend_from_slice(&(ts_sec as u32).to_le_bytes());
        out.extend_from_slice(&(ts_usec as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&p.wire_len.to_le_bytes());
        out.extend_from_slice(&frame);
    }
    Ok(out)
}
