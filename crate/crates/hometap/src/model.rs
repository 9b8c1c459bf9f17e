//! Core data model: packets, traces, stream keys, labels, rate series,
//! events, and ground truth. Everything downstream (ingest, flow separation,
//! labeling, rate analysis, profiles, defenses) speaks these types.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const MICROS_PER_SEC: u64 = 1_000_000;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("packet {index}: {reason}")]
    MalformedPacket { index: usize, reason: String },
    #[error("invalid CIDR {0:?}: {1}")]
    InvalidCidr(String, String),
    #[error("invalid night window {0:?}: {1}")]
    InvalidNightWindow(String, String),
}

/// Who sent a packet, as seen from the observed home uplink.
/// `Outbound` = home side -> remote service, `Inbound` = the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outbound,
    Inbound,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::Tcp => write!(f, "tcp"),
            Transport::Udp => write!(f, "udp"),
            Transport::Other => write!(f, "other"),
        }
    }
}

/// One observed packet. Timestamps are stored as integer microseconds so
/// sorting, binning, and serialization stay exact; `timestamp()` exposes
/// seconds for analysis code.
///
/// `local_*` is the home side of the conversation and `remote_*` the service
/// side once a direction is known. While `direction` is still `Unknown`
/// (straight off a capture, before [`crate::ingest::tag_direction`]), the
/// convention is local = packet source, remote = packet destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts_micros: u64,
    pub direction: Direction,
    pub local_ip: Ipv4Addr,
    pub remote_ip: Ipv4Addr,
    pub local_port: u16,
    pub remote_port: u16,
    pub transport: Transport,
    pub wire_len: u32,
    pub payload_len: u32,
}

impl PacketRecord {
    pub fn timestamp(&self) -> f64 {
        self.ts_micros as f64 / MICROS_PER_SEC as f64
    }

    /// (source, destination) endpoints in on-the-wire orientation.
    pub fn src_dst(&self) -> ((Ipv4Addr, u16), (Ipv4Addr, u16)) {
        match self.direction {
            Direction::Inbound => (
                (self.remote_ip, self.remote_port),
                (self.local_ip, self.local_port),
            ),
            Direction::Outbound | Direction::Unknown => (
                (self.local_ip, self.local_port),
                (self.remote_ip, self.remote_port),
            ),
        }
    }
}

/// IPv4 CIDR block, e.g. `10.0.0.0/24`. Used to decide which side of a
/// packet is the home under observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Cidr {
    network: Ipv4Addr,
    prefix: u8,
}

impl Cidr {
    pub fn new(network: Ipv4Addr, prefix: u8) -> Result<Self, ModelError> {
        if prefix > 32 {
            return Err(ModelError::InvalidCidr(
                format!("{network}/{prefix}"),
                "prefix must be 0..=32".into(),
            ));
        }
        Ok(Cidr {
            network: Ipv4Addr::from(u32::from(network) & Self::mask(prefix)),
            prefix,
        })
    }

    fn mask(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - prefix)
        }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask(self.prefix) == u32::from(self.network)
    }

    pub fn network(&self) -> Ipv4Addr {
        self.network
    }

    pub fn prefix(&self) -> u8 {
        self.prefix
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix)
    }
}

impl FromStr for Cidr {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| ModelError::InvalidCidr(s.to_string(), why.to_string());
        let (ip, prefix) = s.split_once('/').ok_or_else(|| bad("expected ip/prefix"))?;
        let ip: Ipv4Addr = ip.parse().map_err(|_| bad("bad IPv4 address"))?;
        let prefix: u8 = prefix.parse().map_err(|_| bad("bad prefix"))?;
        Cidr::new(ip, prefix)
    }
}

impl TryFrom<String> for Cidr {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Cidr> for String {
    fn from(c: Cidr) -> String {
        c.to_string()
    }
}

/// A capture: packets in non-decreasing timestamp order plus, once direction
/// tagging has run, the home subnet the tagging used.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub packets: Vec<PacketRecord>,
    pub home_subnet: Option<Cidr>,
}

impl Trace {
    pub fn new(packets: Vec<PacketRecord>) -> Self {
        Trace { packets, home_subnet: None }
    }

    /// First/last packet timestamps in seconds, `None` for an empty trace.
    pub fn span(&self) -> Option<(f64, f64)> {
        match (self.packets.first(), self.packets.last()) {
            (Some(a), Some(b)) => Some((a.timestamp(), b.timestamp())),
            _ => None,
        }
    }
}

/// Checks per-packet invariants and stable-sorts by timestamp. Errors name
/// the offending input index. Idempotent: revalidating a validated trace is
/// a no-op.
pub fn validate_trace(mut trace: Trace) -> Result<Trace, ModelError> {
    for (index, p) in trace.packets.iter().enumerate() {
        if p.wire_len < p.payload_len {
            return Err(ModelError::MalformedPacket {
                index,
                reason: format!("wire_len {} < payload_len {}", p.wire_len, p.payload_len),
            });
        }
        if p.transport != Transport::Other && (p.local_port == 0 || p.remote_port == 0) {
            return Err(ModelError::MalformedPacket {
                index,
                reason: format!("port 0 with transport {}", p.transport),
            });
        }
    }
    trace.packets.sort_by_key(|p| p.ts_micros);
    Ok(trace)
}

/// Identity of one NAT-side conversation as a passive observer can key it:
/// remote endpoint, NAT-rewritten local port, and transport. Ordering is
/// lexicographic over the fields in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub remote_ip: Ipv4Addr,
    pub remote_port: u16,
    pub local_port: u16,
    pub transport: Transport,
}

impl fmt::Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}/{}/{}",
            self.remote_ip, self.remote_port, self.local_port, self.transport
        )
    }
}

/// Packets of one keyed conversation, in trace order, with the device label
/// once labeling has run.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub key: StreamKey,
    pub packets: Vec<PacketRecord>,
    pub label: Option<DeviceLabel>,
}

/// One DNS answer seen in cleartext: at `ts_micros` the home resolved
/// `query_name` to `answers`. Names are lowercase without a trailing dot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsObservation {
    pub ts_micros: u64,
    pub query_name: String,
    pub answers: BTreeSet<Ipv4Addr>,
}

/// Device identity attached to a stream. `confidence` is 0 exactly when
/// nothing matched, in which case the label reads "Unknown".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLabel {
    pub device: String,
    pub manufacturer: String,
    pub confidence: f64,
    pub matched_domains: BTreeSet<String>,
}

impl DeviceLabel {
    pub fn unknown() -> Self {
        DeviceLabel {
            device: "Unknown".to_string(),
            manufacturer: "Unknown".to_string(),
            confidence: 0.0,
            matched_domains: BTreeSet::new(),
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.matched_domains.is_empty()
    }
}

/// Direction a rate value or event refers to: outbound bytes, inbound bytes,
/// or their per-bin sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateDirection {
    Send,
    Recv,
    Either,
}

/// Binned send/receive byte rates for one stream. Bin `i` covers
/// `[start + i*window, start + (i+1)*window)`; both vectors always have the
/// same length and hold finite, non-negative B/s values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSeries {
    pub start: f64,
    pub window: f64,
    pub send_rate: Vec<f64>,
    pub recv_rate: Vec<f64>,
}

impl RateSeries {
    pub fn len(&self) -> usize {
        self.send_rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.send_rate.is_empty()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.start + (i as f64 + 0.5) * self.window
    }

    /// Rate values seen through `direction` (`Either` = send + recv per bin).
    pub fn values(&self, direction: RateDirection) -> Vec<f64> {
        match direction {
            RateDirection::Send => self.send_rate.clone(),
            RateDirection::Recv => self.recv_rate.clone(),
            RateDirection::Either => self
                .send_rate
                .iter()
                .zip(&self.recv_rate)
                .map(|(s, r)| s + r)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Spike,
}

/// A detected traffic event: a rate spike at `time` (bin center of the peak
/// bin). `magnitude` is peak rate over baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub direction: RateDirection,
    pub peak_rate: f64,
    pub magnitude: f64,
    pub kind: EventKind,
}

/// Scheduled activity from a simulation scenario, used to score what the
/// analysis recovered. Entries are kept sorted by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    pub entries: Vec<TruthEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub t: f64,
    pub device: String,
    pub activity: String,
}

impl GroundTruth {
    pub fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap_or(std::cmp::Ordering::Equal));
    }
}

/// Clock-of-day interval, possibly wrapping midnight, in seconds of day.
/// The default covers 20:00 through 12:00 the next day. A packet or event at
/// absolute time `t` falls in the window based on `t mod 86400`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NightWindow {
    pub start: f64,
    pub end: f64,
}

impl Default for NightWindow {
    fn default() -> Self {
        NightWindow { start: 20.0 * 3600.0, end: 12.0 * 3600.0 }
    }
}

impl NightWindow {
    pub fn contains(&self, t: f64) -> bool {
        let sod = t.rem_euclid(SECONDS_PER_DAY);
        if self.start == self.end {
            true
        } else if self.start < self.end {
            sod >= self.start && sod < self.end
        } else {
            sod >= self.start || sod < self.end
        }
    }
}

impl FromStr for NightWindow {
    type Err = ModelError;

    /// Parses `"HH:MM-HH:MM"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| ModelError::InvalidNightWindow(s.to_string(), why.to_string());
        let (a, b) = s.split_once('-').ok_or_else(|| bad("expected HH:MM-HH:MM"))?;
        let part = |p: &str| -> Result<f64, ModelError> {
            let (h, m) = p.split_once(':').ok_or_else(|| bad("expected HH:MM"))?;
            let h: u32 = h.parse().map_err(|_| bad("bad hour"))?;
            let m: u32 = m.parse().map_err(|_| bad("bad minute"))?;
            if h > 23 || m > 59 {
                return Err(bad("hour/minute out of range"));
            }
            Ok((h * 3600 + m * 60) as f64)
        };
        Ok(NightWindow { start: part(a)?, end: part(b)? })
    }
}

impl fmt::Display for NightWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hm = |sod: f64| {
            let s = sod as u32;
            format!("{:02}:{:02}", s / 3600, (s % 3600) / 60)
        };
        write!(f, "{}-{}", hm(self.start), hm(self.end))
    }
}
