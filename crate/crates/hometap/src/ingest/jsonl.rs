//! JSONL trace format: one packet object per line with optional DNS
//! side-channel data riding on its line.
//!
//! Required keys: `ts` (seconds, fractional), `src_ip`, `dst_ip`,
//! `src_port`, `dst_port`, `proto` ("tcp"|"udp"|"other"), `wire_len`,
//! `payload_len`. Optional: `dns` = `{"query": name, "answers": [ipv4...]}`.
//!
//! Timestamps are written with exactly six decimal digits and re-parsed
//! from the decimal text, so microsecond values survive a write/parse cycle
//! even at epoch scale (a plain f64 round-trip would not guarantee that).

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::ingest::{pair_dns, IngestError};
use crate::model::{Direction, DnsObservation, PacketRecord, Trace, Transport, MICROS_PER_SEC};

#[derive(Serialize, Deserialize)]
struct DnsField {
    query: String,
    answers: Vec<Ipv4Addr>,
}

#[derive(Deserialize)]
struct LineIn<'a> {
    #[serde(borrow)]
    ts: &'a RawValue,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    proto: Transport,
    wire_len: u32,
    payload_len: u32,
    #[serde(default)]
    dns: Option<DnsField>,
}

#[derive(Serialize)]
struct LineOut<'a> {
    ts: &'a RawValue,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    proto: Transport,
    wire_len: u32,
    payload_len: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    dns: Option<DnsField>,
}

/// Exact decimal seconds -> integer microseconds. Sub-microsecond digits are
/// truncated; exponent-form numbers fall back to f64 (fine at that point:
/// whoever writes `1.7e9` is not asking for microsecond identity).
fn parse_ts_micros(literal: &str) -> Result<u64, String> {
    let lit = literal.trim();
    if lit.starts_with('-') {
        return Err(format!("ts must be non-negative, got {lit}"));
    }
    if !lit.starts_with(|c: char| c.is_ascii_digit()) {
        return Err(format!("ts must be a number, got {lit}"));
    }
    if lit.contains(['e', 'E']) {
        let x: f64 = lit.parse().map_err(|_| format!("bad ts {lit}"))?;
        if !x.is_finite() || x < 0.0 || x * 1e6 > u64::MAX as f64 {
            return Err(format!("ts out of range: {lit}"));
        }
        return Ok((x * 1e6).round() as u64);
    }
    let (int_part, frac_part) = match lit.split_once('.') {
        Some((i, f)) => (i, f),
        None => (lit, ""),
    };
    let secs: u64 = int_part.parse().map_err(|_| format!("ts out of range: {lit}"))?;
    if !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return Err(format!("bad ts {lit}"));
    }
    let mut digits = [b'0'; 6];
    for (slot, ch) in digits.iter_mut().zip(frac_part.bytes()) {
        *slot = ch;
    }
    let frac: u64 = std::str::from_utf8(&digits).unwrap().parse().unwrap();
    secs.checked_mul(MICROS_PER_SEC)
        .and_then(|m| m.checked_add(frac))
        .ok_or_else(|| format!("ts out of range: {lit}"))
}

fn format_ts(ts_micros: u64) -> String {
    format!("{}.{:06}", ts_micros / MICROS_PER_SEC, ts_micros % MICROS_PER_SEC)
}

/// Parses JSONL text into a direction-untagged trace plus the DNS
/// observations carried on its lines. Errors carry 1-based line numbers.
pub fn parse_jsonl(text: &str) -> Result<(Trace, Vec<DnsObservation>), IngestError> {
    let mut packets = Vec::new();
    let mut observations = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let rec: LineIn<'_> = serde_json::from_str(raw_line)
            .map_err(|e| IngestError::Jsonl { line, reason: e.to_string() })?;
        let ts_micros = parse_ts_micros(rec.ts.get())
            .map_err(|reason| IngestError::Jsonl { line, reason })?;
        packets.push(PacketRecord {
            ts_micros,
            direction: Direction::Unknown,
            local_ip: rec.src_ip,
            remote_ip: rec.dst_ip,
            local_port: rec.src_port,
            remote_port: rec.dst_port,
            transport: rec.proto,
            wire_len: rec.wire_len,
            payload_len: rec.payload_len,
        });
        if let Some(dns) = rec.dns {
            if dns.query.is_empty() {
                return Err(IngestError::Jsonl { line, reason: "dns.query is empty".into() });
            }
            observations.push(DnsObservation {
                ts_micros,
                query_name: dns.query.to_lowercase().trim_end_matches('.').to_string(),
                answers: dns.answers.into_iter().collect(),
            });
        }
    }
    Ok((Trace::new(packets), observations))
}

/// Serializes a trace and its DNS observations as JSONL. Each observation is
/// attached to a same-timestamp packet line (UDP/53 carriers preferred).
/// Output is byte-deterministic for a given capture.
pub fn write_jsonl(trace: &Trace, observations: &[DnsObservation]) -> Result<String, IngestError> {
    let pairing = pair_dns(trace, observations, true)?;
    let mut out = String::with_capacity(trace.packets.len() * 160);
    for (index, p) in trace.packets.iter().enumerate() {
        let ((src_ip, src_port), (dst_ip, dst_port)) = p.src_dst();
        let ts_text = format_ts(p.ts_micros);
        let ts = RawValue::from_string(ts_text).expect("formatted ts is valid JSON");
        let dns = pairing.get(&index).map(|&oi| {
            let obs = &observations[oi];
            DnsField {
                query: obs.query_name.clone(),
                answers: obs.answers.iter().copied().collect(),
            }
        });
        let line = LineOut {
            ts: &ts,
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            proto: p.transport,
            wire_len: p.wire_len,
            payload_len: p.payload_len,
            dns,
        };
        out.push_str(&serde_json::to_string(&line).expect("line serialization cannot fail"));
        out.push('\n');
    }
    Ok(out)
}
