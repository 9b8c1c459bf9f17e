//! Mapping streams to device identities.
//!
//! The observer never sees device IPs (NAT hides them) and never decrypts
//! payloads. What it does see is cleartext DNS: a device that is about to
//! talk to `nexus.dropcam.com` first asks the resolver for that name, and the
//! response pairs the name with the addresses the device will contact next.
//! Harvesting those pairs and matching the names against a small fingerprint
//! database is enough to put a product name on most streams.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::model::{DeviceLabel, DnsObservation, Stream};

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("fingerprint database is not valid JSON: {0}")]
    Parse(String),
    #[error("fingerprint entry {device:?} has no patterns")]
    NoPatterns { device: String },
    #[error("fingerprint entry {device:?} contains an empty pattern")]
    EmptyPattern { device: String },
    #[error("duplicate fingerprint entry for device {0:?}")]
    DuplicateDevice(String),
}

/// One identifiable product: the domains it talks to, expressed as glob
/// patterns over fully qualified names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FingerprintEntry {
    pub device: String,
    pub manufacturer: String,
    pub patterns: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FingerprintDb {
    pub entries: Vec<FingerprintEntry>,
}

/// Parses and validates a fingerprint database. Patterns are normalized to
/// lowercase; every entry must carry at least one non-empty pattern and
/// device names must be unique.
pub fn load_fingerprints(text: &str) -> Result<FingerprintDb, LabelError> {
    let mut db: FingerprintDb =
        serde_json::from_str(text).map_err(|e| LabelError::Parse(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for entry in &mut db.entries {
        if !seen.insert(entry.device.clone()) {
            return Err(LabelError::DuplicateDevice(entry.device.clone()));
        }
        if entry.patterns.is_empty() {
            return Err(LabelError::NoPatterns {
                device: entry.device.clone(),
            });
        }
        for pattern in &mut entry.patterns {
            *pattern = pattern.trim().to_ascii_lowercase();
            if pattern.is_empty() {
                return Err(LabelError::EmptyPattern {
                    device: entry.device.clone(),
                });
            }
        }
    }
    Ok(db)
}

static DEFAULT_DB: OnceLock<FingerprintDb> = OnceLock::new();

/// The fingerprint database shipped with the crate, covering the four
/// devices the simulator knows how to emulate.
pub fn default_fingerprints() -> &'static FingerprintDb {
    DEFAULT_DB.get_or_init(|| {
        load_fingerprints(include_str!("../data/fingerprints.json"))
            .expect("bundled fingerprint database must be valid")
    })
}

/// Matches `text` against `pattern`, where `*` matches any run of characters
/// (dots included). Both sides are compared case-insensitively.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut star: Option<usize> = None;
    let mut mark = 0usize;
    while ti < t.len() {
        if pi < p.len() && p[pi] != b'*' && p[pi].eq_ignore_ascii_case(&t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == b'*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == b'*' {
        pi += 1;
    }
    pi == p.len()
}

/// A pattern that can only pin down the hosting provider, not the tenant:
/// anything other than an exact name or a `*.suffix` subdomain wildcard.
fn is_infix_pattern(pattern: &str) -> bool {
    if !pattern.contains('*') {
        return false;
    }
    if let Some(rest) = pattern.strip_prefix("*.") {
        return rest.contains('*');
    }
    true
}

/// Picks the best fingerprint for a set of observed domain names.
///
/// Every entry is scored by how many of the observed domains it matches; the
/// highest count wins and ties go to the earliest entry. Confidence is the
/// matched fraction of the observed set, capped at 0.5 when every matching
/// pattern was an infix glob (those identify shared hosting, not a product).
pub fn match_fingerprint(domains: &BTreeSet<String>, db: &FingerprintDb) -> DeviceLabel {
    if domains.is_empty() {
        return DeviceLabel::unknown();
    }
    let mut best: Option<(usize, &FingerprintEntry, BTreeSet<String>, bool)> = None;
    for entry in &db.entries {
        let mut matched = BTreeSet::new();
        let mut specific_hit = false;
        for domain in domains {
            let domain_lc = domain.to_ascii_lowercase();
            for pattern in &entry.patterns {
                if glob_match(pattern, &domain_lc) {
                    matched.insert(domain_lc.clone());
                    if !is_infix_pattern(pattern) {
                        specific_hit = true;
                    }
                }
            }
        }
        if matched.is_empty() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((count, ..)) => matched.len() > *count,
        };
        if better {
            best = Some((matched.len(), entry, matched.clone(), specific_hit));
        }
    }
    match best {
        None => DeviceLabel::unknown(),
        Some((hits, entry, matched, specific_hit)) => {
            let mut confidence = hits as f64 / domains.len() as f64;
            if !specific_hit {
                confidence = confidence.min(0.5);
            }
            DeviceLabel {
                device: entry.device.clone(),
                manufacturer: entry.manufacturer.clone(),
                confidence: confidence.clamp(f64::MIN_POSITIVE, 1.0),
                matched_domains: matched.into_iter().collect(),
            }
        }
    }
}

/// Everything DNS taught us about an address: the names that resolved to it
/// and when each name was last seen doing so (microseconds).
#[derive(Debug, Clone, Default)]
pub struct IpDomainMap {
    map: BTreeMap<Ipv4Addr, BTreeMap<String, u64>>,
}

impl IpDomainMap {
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn domains_for(&self, ip: Ipv4Addr) -> BTreeSet<String> {
        self.map
            .get(&ip)
            .map(|names| names.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn last_seen(&self, ip: Ipv4Addr, domain: &str) -> Option<u64> {
        self.map.get(&ip).and_then(|names| names.get(domain)).copied()
    }

    pub fn insert(&mut self, ip: Ipv4Addr, domain: &str, ts_micros: u64) {
        let slot = self
            .map
            .entry(ip)
            .or_default()
            .entry(domain.to_ascii_lowercase())
            .or_insert(ts_micros);
        *slot = (*slot).max(ts_micros);
    }
}

/// Folds a capture's DNS responses into an address-to-names index.
pub fn build_ip_domain_map(observations: &[DnsObservation]) -> IpDomainMap {
    let mut map = IpDomainMap::default();
    for obs in observations {
        for ip in &obs.answers {
            map.insert(*ip, &obs.query_name, obs.ts_micros);
        }
    }
    map
}

/// Fallback name source for addresses that never appeared in a captured DNS
/// answer, e.g. because the capture started after the lookup happened.
pub trait ReverseDns {
    fn lookup(&self, ip: Ipv4Addr) -> Result<Option<String>, String>;
}

/// PTR client that queries the system resolver from `/etc/resolv.conf`.
pub struct SystemReverseDns {
    nameserver: std::net::SocketAddr,
    timeout: std::time::Duration,
}

impl SystemReverseDns {
    pub fn new(nameserver: std::net::SocketAddr) -> Self {
        Self {
            nameserver,
            timeout: std::time::Duration::from_secs(2),
        }
    }

    /// Reads the first IPv4 `nameserver` line from `/etc/resolv.conf`.
    pub fn from_system() -> Option<Self> {
        let text = std::fs::read_to_string("/etc/resolv.conf").ok()?;
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("nameserver") {
                if let Ok(ip) = rest.trim().parse::<Ipv4Addr>() {
                    return Some(Self::new((ip, 53).into()));
                }
            }
        }
        None
    }
}

impl ReverseDns for SystemReverseDns {
    fn lookup(&self, ip: Ipv4Addr) -> Result<Option<String>, String> {
        use crate::ingest::dns;
        let socket =
            std::net::UdpSocket::bind("0.0.0.0:0").map_err(|e| format!("bind: {e}"))?;
        socket
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| format!("timeout: {e}"))?;
        let id = u16::from(ip.octets()[2]) << 8 | u16::from(ip.octets()[3]);
        let query = dns::build_ptr_query(id, ip);
        socket
            .send_to(&query, self.nameserver)
            .map_err(|e| format!("send: {e}"))?;
        let mut buf = [0u8; 1500];
        let (n, _) = socket.recv_from(&mut buf).map_err(|e| format!("recv: {e}"))?;
        dns::ptr_name(&buf[..n]).map_err(|e| format!("parse: {e}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelingStats {
    /// Reverse lookups attempted (one per distinct unresolved address).
    pub resolver_lookups: u64,
    /// Lookups that errored out; the affected streams stay unlabeled.
    pub resolver_failures: u64,
}

/// Attaches a device label to every stream.
///
/// Names come from captured DNS answers first; when an address was never seen
/// in an answer and a reverse resolver is supplied, a PTR lookup fills the
/// gap. Results are cached per address, so the outcome for a stream depends
/// only on its remote address and the database, never on stream order.
pub fn label_streams(
    streams: &mut [Stream],
    map: &IpDomainMap,
    db: &FingerprintDb,
    reverse: Option<&dyn ReverseDns>,
) -> LabelingStats {
    let mut stats = LabelingStats::default();
    let mut rdns_cache: BTreeMap<Ipv4Addr, Option<String>> = BTreeMap::new();
    for stream in streams.iter_mut() {
        let ip = stream.key.remote_ip;
        let mut domains = map.domains_for(ip);
        if domains.is_empty() {
            if let Some(resolver) = reverse {
                let cached = rdns_cache.entry(ip).or_insert_with(|| {
                    stats.resolver_lookups += 1;
                    match resolver.lookup(ip) {
                        Ok(name) => name.map(|n| n.to_ascii_lowercase()),
                        Err(_) => {
                            stats.resolver_failures += 1;
                            None
                        }
                    }
                });
                if let Some(name) = cached {
                    domains.insert(name.clone());
                }
            }
        }
        stream.label = Some(match_fingerprint(&domains, db));
    }
    stats
}
