//! Countermeasures and their measurement: constant-rate traffic shaping,
//! tunnel aggregation, and a before/after evaluation that quantifies how much
//! each transform degrades the inference pipeline.

use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::ingest::{pair_dns, Capture};
use crate::model::{
    Direction, DnsObservation, GroundTruth, ModelError, PacketRecord, StreamKey, Trace, Transport,
    MICROS_PER_SEC,
};
use crate::pipeline::{run_pipeline, ActivityReport, AnalysisConfig, Finding};

/// Event-to-truth matching tolerance used by [`evaluate_defense`], in seconds.
pub const MATCH_TOLERANCE: f64 = 30.0;

/// A detected mode boundary this close to the capture edge is an artifact of
/// the capture starting or ending, not a real mode flip, so scoring skips it.
const SPAN_EDGE_GUARD: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum DefenseError {
    #[error("invalid shaping config: {0}")]
    InvalidConfig(String),
    #[error("tunnel aggregation needs a direction-tagged trace; tag directions first")]
    Untagged,
}

/// Constant-rate shaping parameters. `target_rate` applies to each direction
/// of each stream independently; `span` overrides the shaped time range
/// (defaulting to the trace's own extent) and is what makes shaping a trace
/// with no packets meaningful — cover traffic to `pad_remote` fills it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeConfig {
    /// Bytes per second each stream direction is held to.
    pub target_rate: f64,
    /// Padding packet size cap in bytes.
    pub mtu: u32,
    /// Shaped range in seconds; `None` uses the trace span.
    pub span: Option<(f64, f64)>,
    /// Home-side address for synthesized cover traffic.
    pub pad_local: Ipv4Addr,
    /// Remote endpoint cover traffic is addressed to when the input has no
    /// streams of its own.
    pub pad_remote: (Ipv4Addr, u16),
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            target_rate: 10_000.0,
            mtu: 1_400,
            span: None,
            pad_local: Ipv4Addr::new(10, 0, 0, 1),
            pad_remote: (Ipv4Addr::new(198, 18, 0, 1), 443),
        }
    }
}

/// What shaping did: padding volume and queueing delay. Overhead ratios come
/// from comparing byte totals of the two captures.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub padding_packets: u64,
    pub padding_bytes: u64,
    pub delayed_packets: u64,
    /// Largest added queueing delay in seconds.
    pub max_delay: f64,
}

const COVER_LOCAL_PORT: u16 = 61_000;

/// Reshapes every stream direction to a constant `target_rate`: idle bins are
/// filled with padding packets (`mtu`-sized plus one exact remainder), bursts
/// beyond the budget are queued and drained at the target rate in later bins
/// (added latency, never loss). Works on 1-second bins anchored at the span
/// start. A packet larger than a whole bin budget is emitted whole in its own
/// bin — packets are never fragmented. Packets with an unknown direction pass
/// through untouched, and DNS observations move with the packets that carried
/// them. Deterministic: no randomness is involved.
pub fn shape_constant_rate(
    capture: &Capture,
    config: &ShapeConfig,
) -> Result<(Capture, ShapeSummary), DefenseError> {
    let err = |msg: String| Err(DefenseError::InvalidConfig(msg));
    if !(config.target_rate > 0.0 && config.target_rate.is_finite()) {
        return err(format!("target rate must be positive, got {}", config.target_rate));
    }
    if config.mtu == 0 {
        return err("mtu must be positive".to_string());
    }
    if let Some((a, b)) = config.span {
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && b > a) {
            return err(format!("span ({a}, {b}) is not a forward time range"));
        }
    }

    let trace = &capture.trace;
    let span = config.span.or_else(|| trace.span());
    let Some((t0, t1)) = span else {
        return Ok((capture.clone(), ShapeSummary::default()));
    };
    let w = MICROS_PER_SEC;
    let t0_us = (t0 * w as f64).round() as u64;
    let t1_us = (t1 * w as f64).round() as u64;
    // Explicit spans cover exactly their length; a trace-derived span gets one
    // extra bin so the last packet (which defines the span end) is inside.
    let n_bins = if config.span.is_some() {
        ((t1_us - t0_us).div_ceil(w)).max(1)
    } else {
        (t1_us - t0_us) / w + 1
    };
    let budget = (config.target_rate.round() as u64).max(1);

    let grid_end = t0_us + n_bins * w;

    let mut groups: BTreeMap<(StreamKey, u8), Vec<usize>> = BTreeMap::new();
    let mut emitted_ts: Vec<u64> = trace.packets.iter().map(|p| p.ts_micros).collect();
    let mut out: Vec<PacketRecord> = Vec::new();
    for (i, p) in trace.packets.iter().enumerate() {
        // Packets past an explicitly shortened span are outside the shaped
        // range and pass through, as do packets with no known direction.
        if p.direction == Direction::Unknown || p.ts_micros >= grid_end {
            out.push(*p);
            continue;
        }
        let side = match p.direction {
            Direction::Outbound => 0,
            _ => 1,
        };
        let key = StreamKey {
            remote_ip: p.remote_ip,
            remote_port: p.remote_port,
            local_port: p.local_port,
            transport: p.transport,
        };
        groups.entry((key, side)).or_default().push(i);
    }

    let mut summary = ShapeSummary::default();
    // First pass: emit the originals, group by group, against the per-bin
    // budget (FIFO, whole packets only), recording each bin's leftover
    // budget. Padding waits for the second pass so that when one group's
    // backlog drain runs past the span, every group keeps its cover going
    // over the same extended range — no stream reveals when its real
    // traffic ended.
    let mut plans: Vec<(StreamKey, PacketRecord, Vec<u64>)> = Vec::new();
    for ((key, _side), indices) in &groups {
        let template = trace.packets[indices[0]];
        let mut leftovers: Vec<u64> = Vec::new();
        let mut arrivals = indices.iter().copied().peekable();
        let mut queue: VecDeque<usize> = VecDeque::new();
        loop {
            let bin_start = t0_us + leftovers.len() as u64 * w;
            let bin_end = bin_start + w;
            while let Some(&i) = arrivals.peek() {
                if trace.packets[i].ts_micros < bin_end {
                    queue.push_back(i);
                    arrivals.next();
                } else {
                    break;
                }
            }
            let mut remaining = budget;
            while let Some(&i) = queue.front() {
                let p = &trace.packets[i];
                let wlen = u64::from(p.wire_len);
                if wlen > remaining && remaining < budget {
                    break;
                }
                queue.pop_front();
                let new_ts = p.ts_micros.max(bin_start);
                if new_ts != p.ts_micros {
                    summary.delayed_packets += 1;
                    let delay = (new_ts - p.ts_micros) as f64 / w as f64;
                    summary.max_delay = summary.max_delay.max(delay);
                }
                emitted_ts[i] = new_ts;
                out.push(PacketRecord { ts_micros: new_ts, ..*p });
                remaining = remaining.saturating_sub(wlen);
            }
            leftovers.push(remaining);
            if leftovers.len() as u64 >= n_bins && queue.is_empty() && arrivals.peek().is_none() {
                break;
            }
        }
        plans.push((*key, template, leftovers));
    }

    let total_bins = plans
        .iter()
        .map(|(_, _, leftovers)| leftovers.len() as u64)
        .max()
        .unwrap_or(n_bins);
    for (key, template, leftovers) in &plans {
        for b in 0..total_bins {
            let remaining = leftovers.get(b as usize).copied().unwrap_or(budget);
            emit_padding(template, key, t0_us + b * w, w, remaining, config.mtu, &mut out, &mut summary);
        }
    }

    if plans.is_empty() && config.span.is_some() {
        let template = PacketRecord {
            ts_micros: t0_us,
            direction: Direction::Outbound,
            local_ip: config.pad_local,
            remote_ip: config.pad_remote.0,
            local_port: COVER_LOCAL_PORT,
            remote_port: config.pad_remote.1,
            transport: Transport::Tcp,
            wire_len: 0,
            payload_len: 0,
        };
        let key = StreamKey {
            remote_ip: template.remote_ip,
            remote_port: template.remote_port,
            local_port: template.local_port,
            transport: template.transport,
        };
        for b in 0..n_bins {
            emit_padding(&template, &key, t0_us + b * w, w, budget, config.mtu, &mut out, &mut summary);
        }
    }

    // Full-record ordering keeps same-timestamp packets in a canonical
    // order no matter which internal pass produced them.
    out.sort_by_key(|p| {
        (
            p.ts_micros,
            match p.direction {
                Direction::Outbound => 0u8,
                Direction::Inbound => 1,
                Direction::Unknown => 2,
            },
            p.remote_ip,
            p.remote_port,
            p.local_port,
            p.transport,
            p.wire_len,
            p.payload_len,
        )
    });
    let dns = restamp_dns(trace, &capture.dns, &emitted_ts);
    let shaped = Capture {
        trace: Trace { packets: out, home_subnet: trace.home_subnet },
        dns,
        skipped_packets: capture.skipped_packets,
        malformed_dns: capture.malformed_dns,
    };
    Ok((shaped, summary))
}

#[allow(clippy::too_many_arguments)]
fn emit_padding(
    template: &PacketRecord,
    key: &StreamKey,
    bin_start: u64,
    width_us: u64,
    budget_left: u64,
    mtu: u32,
    out: &mut Vec<PacketRecord>,
    summary: &mut ShapeSummary,
) {
    if budget_left == 0 {
        return;
    }
    let mtu64 = u64::from(mtu);
    let full = budget_left / mtu64;
    let remainder = budget_left % mtu64;
    let count = full + u64::from(remainder > 0);
    for j in 0..count {
        let size = if j < full { mtu } else { remainder as u32 };
        out.push(PacketRecord {
            ts_micros: bin_start + j * width_us / count,
            direction: template.direction,
            local_ip: template.local_ip,
            remote_ip: key.remote_ip,
            local_port: key.local_port,
            remote_port: key.remote_port,
            transport: key.transport,
            wire_len: size,
            payload_len: 0,
        });
        summary.padding_packets += 1;
        summary.padding_bytes += u64::from(size);
    }
}

/// Moves each DNS observation to its carrier packet's new timestamp. If the
/// observations cannot be paired with packets (they were dangling to begin
/// with), they are passed through unchanged.
fn restamp_dns(
    trace: &Trace,
    observations: &[DnsObservation],
    emitted_ts: &[u64],
) -> Vec<DnsObservation> {
    let Ok(pairing) = pair_dns(trace, observations, true) else {
        return observations.to_vec();
    };
    let mut dns: Vec<DnsObservation> = observations.to_vec();
    for (packet_index, obs_index) in pairing {
        dns[obs_index].ts_micros = emitted_ts[packet_index];
    }
    dns.sort_by_key(|o| o.ts_micros);
    dns
}

/// Tunnel encapsulation parameters: where the tunnel terminates and what each
/// packet pays in encapsulation overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TunnelConfig {
    pub remote: Ipv4Addr,
    pub port: u16,
    pub local_port: u16,
    /// Bytes added to every packet's wire length.
    pub overhead: u32,
}

impl Default for TunnelConfig {
    fn default() -> Self {
        TunnelConfig {
            remote: Ipv4Addr::new(198, 51, 100, 1),
            port: 51_820,
            local_port: 51_820,
            overhead: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TunnelSummary {
    pub packets: u64,
    pub overhead_bytes: u64,
}

/// Rewrites every packet into a single encapsulated flow to the tunnel
/// endpoint: one remote, one local port, UDP, with `overhead` bytes added to
/// each wire length. Timestamps, directions, and packet count are preserved;
/// the DNS side channel disappears (it rides inside the tunnel now). Requires
/// a direction-tagged trace so "local" and "remote" are meaningful.
pub fn tunnel_aggregate(
    capture: &Capture,
    config: &TunnelConfig,
) -> Result<(Capture, TunnelSummary), DefenseError> {
    if capture.trace.home_subnet.is_none() {
        return Err(DefenseError::Untagged);
    }
    let packets: Vec<PacketRecord> = capture
        .trace
        .packets
        .iter()
        .map(|p| PacketRecord {
            remote_ip: config.remote,
            remote_port: config.port,
            local_port: config.local_port,
            transport: Transport::Udp,
            wire_len: p.wire_len.saturating_add(config.overhead),
            ..*p
        })
        .collect();
    let summary = TunnelSummary {
        packets: packets.len() as u64,
        overhead_bytes: packets.len() as u64 * u64::from(config.overhead),
    };
    let tunneled = Capture {
        trace: Trace { packets, home_subnet: capture.trace.home_subnet },
        dns: Vec::new(),
        skipped_packets: capture.skipped_packets,
        malformed_dns: capture.malformed_dns,
    };
    Ok((tunneled, summary))
}

/// Per-device scoring of one pipeline run against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Best label confidence among streams attributed to the device.
    pub label_confidence: f64,
}

/// Before/after comparison of the analysis on an original and a defended
/// capture of the same scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub before: BTreeMap<String, DeviceMetrics>,
    pub after: BTreeMap<String, DeviceMetrics>,
    /// defended bytes / original bytes - 1.
    pub overhead: f64,
}

/// Runs the full pipeline on both captures (concurrently — they are
/// independent) and scores each against the ground truth: per-device event
/// precision and recall with ±[`MATCH_TOLERANCE`] s greedy matching, label
/// confidence, and the bandwidth overhead the defense cost.
///
/// Conventions for empty sides: a run that reports no events for a device has
/// precision 1.0 (it claimed nothing false); a device with no truth entries
/// has recall 1.0 (there was nothing to find).
pub fn evaluate_defense(
    original: &Capture,
    defended: &Capture,
    truth: &GroundTruth,
    config: &AnalysisConfig,
) -> Result<DefenseReport, ModelError> {
    let (before_run, after_run) = std::thread::scope(|scope| {
        let after = scope.spawn(|| run_pipeline(defended, config, None));
        let before = run_pipeline(original, config, None);
        (before, after.join().expect("analysis thread panicked"))
    });
    let before_report = before_run?;
    let after_report = after_run?;

    let original_bytes: u64 = original.trace.packets.iter().map(|p| u64::from(p.wire_len)).sum();
    let defended_bytes: u64 = defended.trace.packets.iter().map(|p| u64::from(p.wire_len)).sum();
    let overhead = if original_bytes == 0 {
        if defended_bytes == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        defended_bytes as f64 / original_bytes as f64 - 1.0
    };

    Ok(DefenseReport {
        before: score_report(&before_report, original.trace.span(), truth),
        after: score_report(&after_report, defended.trace.span(), truth),
        overhead,
    })
}

/// Event times each finding contributes to scoring, grouped by device.
/// Camera streaming intervals contribute their boundaries (each boundary is
/// a mode flip) except boundaries at the capture edges.
fn found_times(report: &ActivityReport, span: Option<(f64, f64)>) -> BTreeMap<String, Vec<f64>> {
    let near_edge = |t: f64| {
        span.is_some_and(|(a, b)| (t - a).abs() <= SPAN_EDGE_GUARD || (t - b).abs() <= SPAN_EDGE_GUARD)
    };
    let mut found: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for finding in &report.findings {
        let times = found.entry(finding.device().to_string()).or_default();
        match finding {
            Finding::Sleep { report, .. } => {
                times.push(report.bedtime);
                times.extend(&report.interruptions);
                times.push(report.wake_time);
            }
            Finding::Camera { report, .. } => {
                for &(start, end) in &report.streaming_intervals {
                    for boundary in [start, end] {
                        if !near_edge(boundary) {
                            times.push(boundary);
                        }
                    }
                }
                times.extend(&report.motion_events);
            }
            Finding::Toggle { report, .. } => times.extend(&report.toggle_times),
            Finding::Interaction { report, .. } => times.extend(&report.interaction_times),
        }
    }
    for times in found.values_mut() {
        times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    }
    found
}

/// Greedy one-to-one matching of two ascending time lists within ±`tol`.
/// Both lists sorted; each found time takes the earliest unmatched truth time
/// it can reach, which is optimal for interval matching.
fn match_within(found: &[f64], truth: &[f64], tol: f64) -> usize {
    let mut matched = 0;
    let mut ti = 0;
    for &f in found {
        while ti < truth.len() && truth[ti] < f - tol {
            ti += 1;
        }
        if ti < truth.len() && (truth[ti] - f).abs() <= tol {
            matched += 1;
            ti += 1;
        }
    }
    matched
}

fn score_report(
    report: &ActivityReport,
    span: Option<(f64, f64)>,
    truth: &GroundTruth,
) -> BTreeMap<String, DeviceMetrics> {
    let found = found_times(report, span);
    let mut truth_times: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for entry in &truth.entries {
        truth_times.entry(entry.device.clone()).or_default().push(entry.t);
    }
    for times in truth_times.values_mut() {
        times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    }

    let devices: std::collections::BTreeSet<&String> =
        found.keys().chain(truth_times.keys()).collect();
    let empty: Vec<f64> = Vec::new();
    let mut metrics = BTreeMap::new();
    for device in devices {
        let f = found.get(device).unwrap_or(&empty);
        let t = truth_times.get(device).unwrap_or(&empty);
        let matched = match_within(f, t, MATCH_TOLERANCE);
        let precision = if f.is_empty() { 1.0 } else { matched as f64 / f.len() as f64 };
        let recall = if t.is_empty() { 1.0 } else { matched as f64 / t.len() as f64 };
        let label_confidence = report
            .streams
            .iter()
            .filter(|s| &s.label.device == device)
            .map(|s| s.label.confidence)
            .fold(0.0, f64::max);
        metrics.insert(
            device.clone(),
            DeviceMetrics { precision, recall, label_confidence },
        );
    }
    metrics
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::separate_streams;
    use crate::model::{TruthEntry, validate_trace};
    use crate::rates::compute_rate_series;
    use crate::model::RateDirection;
    use proptest::prelude::*;

    fn packet(ts_micros: u64, dir: Direction, len: u32) -> PacketRecord {
        PacketRecord {
            ts_micros,
            direction: dir,
            local_ip: "10.0.0.1".parse().unwrap(),
            remote_ip: "52.1.1.1".parse().unwrap(),
            local_port: 40_000,
            remote_port: 443,
            transport: Transport::Tcp,
            wire_len: len,
            payload_len: 0,
        }
    }

    fn capture(packets: Vec<PacketRecord>) -> Capture {
        Capture::new(
            Trace { packets, home_subnet: Some("10.0.0.0/24".parse().unwrap()) },
            Vec::new(),
        )
    }

    fn bin_sums(capture: &Capture, span: (f64, f64)) -> Vec<f64> {
        let separation = separate_streams(&capture.trace);
        assert_eq!(separation.streams.len(), 1);
        compute_rate_series(&separation.streams[0], 1.0, Some(span))
            .values(RateDirection::Either)
    }

    #[test]
    fn silent_span_becomes_constant_cover_traffic() {
        let config = ShapeConfig {
            target_rate: 1_000.0,
            mtu: 400,
            span: Some((0.0, 10.0)),
            ..ShapeConfig::default()
        };
        let (shaped, summary) = shape_constant_rate(&capture(Vec::new()), &config).unwrap();
        assert_eq!(summary.padding_bytes, 10_000);
        assert_eq!(summary.padding_packets, 30);
        assert_eq!(summary.delayed_packets, 0);
        assert_eq!(bin_sums(&shaped, (0.0, 10.0)), vec![1_000.0; 10]);
        validate_trace(shaped.trace).unwrap();
    }

    #[test]
    fn quiet_stream_is_padded_to_exactly_the_target() {
        let input = capture(vec![
            packet(200_000, Direction::Outbound, 100),
            packet(3_500_000, Direction::Outbound, 100),
            packet(7_900_000, Direction::Outbound, 100),
        ]);
        let config = ShapeConfig { target_rate: 5_000.0, ..ShapeConfig::default() };
        let (shaped, summary) = shape_constant_rate(&input, &config).unwrap();
        // span 0.2..7.9 -> 8 whole bins anchored at 0.2
        assert_eq!(bin_sums(&shaped, (0.2, 8.2)), vec![5_000.0; 8]);
        assert_eq!(summary.delayed_packets, 0);
        assert_eq!(summary.padding_bytes, 8 * 5_000 - 300);
        // originals keep their own timestamps
        for p in [200_000u64, 3_500_000, 7_900_000] {
            assert!(shaped.trace.packets.iter().any(|q| q.ts_micros == p && q.wire_len == 100));
        }
    }

    #[test]
    fn burst_drains_at_the_target_rate() {
        // 100 x 10 kB at t=0 against a 10 kB/s budget: one packet per bin,
        // drained over 100 s with no padding after the first bin.
        let packets = (0..100).map(|_| packet(0, Direction::Outbound, 10_000)).collect();
        let config = ShapeConfig { target_rate: 10_000.0, ..ShapeConfig::default() };
        let (shaped, summary) = shape_constant_rate(&capture(packets), &config).unwrap();
        assert_eq!(shaped.trace.packets.len(), 100);
        for (b, p) in shaped.trace.packets.iter().enumerate() {
            assert_eq!(p.ts_micros, b as u64 * 1_000_000);
        }
        assert_eq!(summary.delayed_packets, 99);
        assert_eq!(summary.max_delay, 99.0);
        assert_eq!(summary.padding_packets, 0);
    }

    #[test]
    fn oversize_packets_are_emitted_whole() {
        let input = capture(vec![packet(0, Direction::Outbound, 5_000)]);
        let config = ShapeConfig { target_rate: 1_000.0, ..ShapeConfig::default() };
        let (shaped, summary) = shape_constant_rate(&input, &config).unwrap();
        assert_eq!(shaped.trace.packets.len(), 1);
        assert_eq!(shaped.trace.packets[0].ts_micros, 0);
        assert_eq!(shaped.trace.packets[0].wire_len, 5_000);
        assert_eq!(summary.delayed_packets, 0);
        assert_eq!(summary.padding_packets, 0);
    }

    #[test]
    fn shaping_twice_at_the_same_rate_is_identity() {
        let input = capture(vec![
            packet(100_000, Direction::Outbound, 700),
            packet(1_600_000, Direction::Outbound, 1_400),
            packet(2_100_000, Direction::Inbound, 300),
            packet(4_000_000, Direction::Outbound, 900),
        ]);
        let config = ShapeConfig { target_rate: 2_000.0, ..ShapeConfig::default() };
        let (once, _) = shape_constant_rate(&input, &config).unwrap();
        let (twice, second) = shape_constant_rate(&once, &config).unwrap();
        assert_eq!(twice, once);
        assert_eq!(second.padding_packets, 0);
        assert_eq!(second.delayed_packets, 0);
    }

    #[test]
    fn unknown_direction_packets_pass_through() {
        let mut p = packet(500_000, Direction::Unknown, 123);
        p.local_ip = "52.2.2.2".parse().unwrap();
        let input = capture(vec![packet(0, Direction::Outbound, 100), p]);
        let config = ShapeConfig { target_rate: 1_000.0, ..ShapeConfig::default() };
        let (shaped, _) = shape_constant_rate(&input, &config).unwrap();
        assert!(shaped
            .trace
            .packets
            .iter()
            .any(|q| q.direction == Direction::Unknown && q.ts_micros == 500_000 && q.wire_len == 123));
    }

    #[test]
    fn dns_observations_follow_their_delayed_carrier() {
        let mut carrier = packet(400_000, Direction::Inbound, 100);
        carrier.transport = Transport::Udp;
        carrier.remote_port = 53;
        let mut blocker = packet(0, Direction::Inbound, 2_000);
        blocker.transport = Transport::Udp;
        blocker.remote_port = 53;
        let mut input = capture(vec![blocker, carrier]);
        input.dns = vec![DnsObservation {
            ts_micros: 400_000,
            query_name: "nexus.dropcam.com".into(),
            answers: ["34.200.45.10".parse().unwrap()].into_iter().collect(),
        }];
        let config = ShapeConfig { target_rate: 1_000.0, ..ShapeConfig::default() };
        let (shaped, summary) = shape_constant_rate(&input, &config).unwrap();
        // the 2 kB packet eats bin 0 whole, so the carrier waits for bin 1
        assert_eq!(summary.delayed_packets, 1);
        assert_eq!(shaped.dns.len(), 1);
        assert_eq!(shaped.dns[0].ts_micros, 1_000_000);
        assert_eq!(shaped.dns[0].query_name, "nexus.dropcam.com");
    }

    #[test]
    fn rejects_nonsense_configs() {
        let input = capture(vec![packet(0, Direction::Outbound, 100)]);
        for config in [
            ShapeConfig { target_rate: 0.0, ..ShapeConfig::default() },
            ShapeConfig { target_rate: -5.0, ..ShapeConfig::default() },
            ShapeConfig { mtu: 0, ..ShapeConfig::default() },
            ShapeConfig { span: Some((5.0, 5.0)), ..ShapeConfig::default() },
            ShapeConfig { span: Some((-1.0, 5.0)), ..ShapeConfig::default() },
        ] {
            assert!(matches!(
                shape_constant_rate(&input, &config),
                Err(DefenseError::InvalidConfig(_))
            ));
        }
    }

    fn three_stream_capture() -> Capture {
        let mut packets = Vec::new();
        for (i, port) in [443u16, 8_883, 123].iter().enumerate() {
            for s in 0..5u64 {
                let mut p = packet(s * 1_000_000 + i as u64, Direction::Outbound, 200);
                p.remote_port = *port;
                p.local_port = 40_000 + i as u16;
                packets.push(p);
            }
        }
        packets.sort_by_key(|p| p.ts_micros);
        let mut c = capture(packets);
        c.dns = vec![DnsObservation {
            ts_micros: 0,
            query_name: "example.net".into(),
            answers: ["52.1.1.1".parse().unwrap()].into_iter().collect(),
        }];
        c
    }

    #[test]
    fn tunnel_collapses_everything_into_one_flow() {
        let input = three_stream_capture();
        assert_eq!(separate_streams(&input.trace).streams.len(), 3);
        let (tunneled, summary) = tunnel_aggregate(&input, &TunnelConfig::default()).unwrap();
        assert_eq!(separate_streams(&tunneled.trace).streams.len(), 1);
        assert!(tunneled.dns.is_empty());
        assert_eq!(summary.packets, 15);
        assert_eq!(summary.overhead_bytes, 15 * 40);

        let input_bytes: u64 = input.trace.packets.iter().map(|p| u64::from(p.wire_len)).sum();
        let output_bytes: u64 = tunneled.trace.packets.iter().map(|p| u64::from(p.wire_len)).sum();
        assert_eq!(output_bytes, input_bytes + summary.overhead_bytes);
        for (a, b) in input.trace.packets.iter().zip(&tunneled.trace.packets) {
            assert_eq!(a.ts_micros, b.ts_micros);
            assert_eq!(a.direction, b.direction);
        }
    }

    #[test]
    fn tunnel_requires_a_tagged_trace() {
        let mut input = three_stream_capture();
        input.trace.home_subnet = None;
        assert!(matches!(
            tunnel_aggregate(&input, &TunnelConfig::default()),
            Err(DefenseError::Untagged)
        ));
    }

    fn toggle_capture_with_truth() -> (Capture, GroundTruth) {
        let mut packets = Vec::new();
        for burst_start in [30u64, 150, 270] {
            for s in 0..10u64 {
                for (frac, dir) in [(0u64, Direction::Outbound), (400_000, Direction::Inbound)] {
                    packets.push(packet((burst_start + s) * 1_000_000 + frac, dir, 750));
                }
            }
        }
        packets.sort_by_key(|p| p.ts_micros);
        let mut c = capture(packets);
        c.dns = vec![DnsObservation {
            ts_micros: 30_000_000,
            query_name: "prod1-api-xbcs-net-889336557.us-east-1.elb.amazonaws.com".into(),
            answers: ["52.1.1.1".parse().unwrap()].into_iter().collect(),
        }];
        let truth = GroundTruth {
            entries: [30.0, 150.0, 270.0]
                .iter()
                .map(|&t| TruthEntry {
                    t,
                    device: "WeMo Switch".to_string(),
                    activity: "toggle".to_string(),
                })
                .collect(),
        };
        (c, truth)
    }

    fn analysis_config() -> AnalysisConfig {
        AnalysisConfig {
            home_subnet: Some("10.0.0.0/24".parse().unwrap()),
            ..AnalysisConfig::default()
        }
    }

    #[test]
    fn evaluating_a_capture_against_itself_shows_no_degradation() {
        let (input, truth) = toggle_capture_with_truth();
        let report = evaluate_defense(&input, &input, &truth, &analysis_config()).unwrap();
        assert_eq!(report.overhead, 0.0);
        assert_eq!(report.before, report.after);
        let metrics = &report.before["WeMo Switch"];
        assert_eq!(metrics.precision, 1.0);
        assert_eq!(metrics.recall, 1.0);
        assert_eq!(metrics.label_confidence, 0.5);
    }

    #[test]
    fn shaping_above_peak_hides_the_toggles() {
        let (input, truth) = toggle_capture_with_truth();
        let config = ShapeConfig { target_rate: 2_000.0, ..ShapeConfig::default() };
        let (shaped, summary) = shape_constant_rate(&input, &config).unwrap();
        let report = evaluate_defense(&input, &shaped, &truth, &analysis_config()).unwrap();
        assert_eq!(report.before["WeMo Switch"].recall, 1.0);
        assert_eq!(report.after["WeMo Switch"].recall, 0.0);
        // found nothing -> vacuous precision
        assert_eq!(report.after["WeMo Switch"].precision, 1.0);
        // labels survive shaping; only the rate signal is gone
        assert_eq!(report.after["WeMo Switch"].label_confidence, 0.5);
        let original_bytes: u64 = input.trace.packets.iter().map(|p| u64::from(p.wire_len)).sum();
        let defended_bytes = original_bytes + summary.padding_bytes;
        assert_eq!(report.overhead, defended_bytes as f64 / original_bytes as f64 - 1.0);
    }

    #[test]
    fn greedy_matching_counts_hand_checked_cases() {
        assert_eq!(match_within(&[10.0, 20.0], &[15.0], 5.0), 1);
        assert_eq!(match_within(&[10.0, 12.0], &[11.0, 11.5], 5.0), 2);
        assert_eq!(match_within(&[10.0], &[5.0, 10.0], 3.0), 1);
        assert_eq!(match_within(&[], &[1.0], 30.0), 0);
        assert_eq!(match_within(&[1.0], &[], 30.0), 0);
        // one truth time cannot absorb two detections
        assert_eq!(match_within(&[9.0, 11.0], &[10.0], 5.0), 1);
    }

    #[test]
    fn missing_devices_get_vacuous_metrics() {
        let (input, mut truth) = toggle_capture_with_truth();
        truth.entries.push(TruthEntry {
            t: 100.0,
            device: "Nest Security Camera".to_string(),
            activity: "motion".to_string(),
        });
        truth.sort();
        let report = evaluate_defense(&input, &input, &truth, &analysis_config()).unwrap();
        let camera = &report.before["Nest Security Camera"];
        assert_eq!(camera.precision, 1.0);
        assert_eq!(camera.recall, 0.0);
        assert_eq!(camera.label_confidence, 0.0);
    }

    fn arbitrary_packets() -> impl Strategy<Value = Vec<PacketRecord>> {
        proptest::collection::vec(
            (0u64..20_000_000, prop_oneof![Just(Direction::Outbound), Just(Direction::Inbound)], 1u32..3_000),
            0..30,
        )
        .prop_map(|entries| {
            let mut packets: Vec<PacketRecord> =
                entries.into_iter().map(|(ts, dir, len)| packet(ts, dir, len)).collect();
            packets.sort_by_key(|p| p.ts_micros);
            packets
        })
    }

    proptest! {
        #[test]
        fn shaping_never_loses_bytes_per_direction(
            packets in arbitrary_packets(),
            rate in 500f64..5_000.0,
        ) {
            let input = capture(packets);
            let config = ShapeConfig { target_rate: rate, ..ShapeConfig::default() };
            let (shaped, summary) = shape_constant_rate(&input, &config).unwrap();
            for dir in [Direction::Outbound, Direction::Inbound] {
                let sum = |c: &Capture| -> u64 {
                    c.trace.packets.iter().filter(|p| p.direction == dir)
                        .map(|p| u64::from(p.wire_len)).sum()
                };
                prop_assert!(sum(&shaped) >= sum(&input));
            }
            let total_in: u64 = input.trace.packets.iter().map(|p| u64::from(p.wire_len)).sum();
            let total_out: u64 = shaped.trace.packets.iter().map(|p| u64::from(p.wire_len)).sum();
            prop_assert_eq!(total_out, total_in + summary.padding_bytes);
            prop_assert_eq!(shaped.trace.packets.len(),
                input.trace.packets.len() + summary.padding_packets as usize);
            for pair in shaped.trace.packets.windows(2) {
                prop_assert!(pair[0].ts_micros <= pair[1].ts_micros);
            }
        }

        #[test]
        fn shaping_is_idempotent_on_bin_sums(
            packets in arbitrary_packets(),
            rate in 500f64..5_000.0,
        ) {
            let input = capture(packets);
            let config = ShapeConfig { target_rate: rate, ..ShapeConfig::default() };
            let (once, _) = shape_constant_rate(&input, &config).unwrap();
            let (twice, _) = shape_constant_rate(&once, &config).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn tunneling_preserves_count_and_times(packets in arbitrary_packets()) {
            let input = capture(packets);
            let (tunneled, _) = tunnel_aggregate(&input, &TunnelConfig::default()).unwrap();
            prop_assert_eq!(tunneled.trace.packets.len(), input.trace.packets.len());
            for (a, b) in input.trace.packets.iter().zip(&tunneled.trace.packets) {
                prop_assert_eq!(a.ts_micros, b.ts_micros);
                prop_assert_eq!(u64::from(a.wire_len) + 40, u64::from(b.wire_len));
            }
            prop_assert!(separate_streams(&tunneled.trace).streams.len() <= 1);
        }
    }
}
