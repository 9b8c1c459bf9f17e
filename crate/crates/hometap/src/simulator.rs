//! Synthetic smart-home traffic with known ground truth.
//!
//! Real captures of these devices cannot ship with the repository, so the
//! simulator builds the next best thing: NAT'd traces whose devices behave
//! on a script — a sleep monitor spiking when its wearer stirs, a camera
//! flipping between live streaming and idle motion detection, a switch
//! pulsing on each toggle, an assistant answering questions — with every
//! scripted action recorded as ground truth for closed-loop scoring.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ingest::{dns, Capture};
use crate::model::{
    Cidr, Direction, DnsObservation, GroundTruth, PacketRecord, Trace, Transport, TruthEntry,
    MICROS_PER_SEC,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Sense,
    Camera,
    Switch,
    Echo,
}

/// Whether an endpoint carries the device's scripted activity or only its
/// background chatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointRole {
    Primary,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub domain: String,
    pub ip: Ipv4Addr,
    pub port: u16,
    pub transport: Transport,
    pub role: EndpointRole,
}

/// One scripted action, `t` seconds after the scenario start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub t: f64,
    pub activity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    /// Device name as the fingerprint database knows it; ground-truth
    /// entries carry this name so reports can be scored against them.
    pub name: String,
    pub kind: DeviceKind,
    pub endpoints: Vec<Endpoint>,
    /// Idle traffic level in bytes/second.
    pub baseline_rate: f64,
    /// Relative stddev of the per-bin multiplicative log-normal noise.
    pub noise: f64,
    pub schedule: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NatSpec {
    /// The one address every home flow appears to come from.
    pub public_ip: Ipv4Addr,
    pub home_subnet: Cidr,
    /// Half-open range NAT ephemeral ports are assigned from, sequentially.
    pub port_range: (u16, u16),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Epoch seconds of the first simulated instant. The defaults anchor it
    /// at 22:40 UTC so clock-of-day logic (night windows) lines up.
    pub start: f64,
    pub duration: f64,
    pub seed: u64,
    pub devices: Vec<DeviceSpec>,
    pub nat: NatSpec,
    pub resolver: Ipv4Addr,
}

/// How much a scripted burst raises the rate over baseline.
const BURST_MULTIPLIER: f64 = 30.0;
const BURST_MIN_SECONDS: f64 = 5.0;
const BURST_MAX_SECONDS: f64 = 15.0;
/// Camera live-streaming upload rate.
const HIGH_MODE_RATE: f64 = 1_000_000.0;
const HIGH_MODE_PACKET: u32 = 1_200;
const PACKET_MIN: u32 = 100;
const PACKET_MAX: u32 = 400;
/// Fraction of non-streaming traffic that goes out rather than in.
const SEND_SHARE: f64 = 0.6;
/// 2016-09-20 22:40:00 UTC.
const DEFAULT_START: f64 = 1_474_411_200.0;
const DEFAULT_SEED: u64 = 42;

fn validate(scenario: &Scenario) -> Result<(), SimError> {
    let fail = |msg: String| Err(SimError::Invalid(msg));
    if !(scenario.duration > 0.0 && scenario.duration.is_finite()) {
        return fail(format!("duration must be positive, got {}", scenario.duration));
    }
    if !(scenario.start >= 0.0 && scenario.start.is_finite()) {
        return fail(format!("start must be non-negative, got {}", scenario.start));
    }
    let (port_lo, port_hi) = scenario.nat.port_range;
    if port_lo >= port_hi {
        return fail(format!("empty ephemeral port range {port_lo}..{port_hi}"));
    }
    let endpoints: usize = scenario.devices.iter().map(|d| d.endpoints.len()).sum();
    if usize::from(port_hi - port_lo) < endpoints + 1 {
        return fail(format!(
            "port range {port_lo}..{port_hi} too small for {endpoints} endpoints plus the resolver"
        ));
    }
    if !scenario.nat.home_subnet.contains(scenario.nat.public_ip) {
        return fail(format!(
            "public ip {} is outside the home subnet {}",
            scenario.nat.public_ip, scenario.nat.home_subnet
        ));
    }
    if scenario.nat.home_subnet.contains(scenario.resolver) {
        return fail("resolver must be outside the home subnet".to_string());
    }
    let mut names = std::collections::BTreeSet::new();
    for device in &scenario.devices {
        if device.name.is_empty() {
            return fail("device with an empty name".to_string());
        }
        if !names.insert(&device.name) {
            return fail(format!("duplicate device name {:?}", device.name));
        }
        if device.endpoints.is_empty() {
            return fail(format!("device {:?} has no endpoints", device.name));
        }
        if !device.endpoints.iter().any(|e| e.role == EndpointRole::Primary) {
            return fail(format!("device {:?} has no primary endpoint", device.name));
        }
        if !(device.baseline_rate > 0.0 && device.baseline_rate.is_finite()) {
            return fail(format!(
                "device {:?}: baseline rate must be positive",
                device.name
            ));
        }
        if !(device.noise >= 0.0 && device.noise.is_finite()) {
            return fail(format!("device {:?}: noise must be non-negative", device.name));
        }
        for endpoint in &device.endpoints {
            if scenario.nat.home_subnet.contains(endpoint.ip) {
                return fail(format!(
                    "device {:?}: endpoint {} is inside the home subnet",
                    device.name, endpoint.ip
                ));
            }
        }
        for entry in &device.schedule {
            if !(entry.t >= 0.0 && entry.t <= scenario.duration) {
                return fail(format!(
                    "device {:?}: schedule entry at {} s is outside 0..{}",
                    device.name, entry.t, scenario.duration
                ));
            }
        }
    }
    Ok(())
}

/// The rate plan for one device over the scenario: what its primary endpoint
/// sends at any instant.
struct RatePlan {
    /// (start, end, rate) burst windows, from Sense/Switch/Echo schedule
    /// entries and camera motion entries.
    bursts: Vec<(f64, f64, f64)>,
    /// (start, end) camera High-mode windows.
    high: Vec<(f64, f64)>,
}

impl RatePlan {
    fn rate_at(&self, t: f64, baseline: f64) -> (f64, bool) {
        for (start, end) in &self.high {
            if t >= *start && t < *end {
                return (HIGH_MODE_RATE, true);
            }
        }
        for (start, end, rate) in &self.bursts {
            if t >= *start && t < *end {
                return (*rate, false);
            }
        }
        (baseline, false)
    }
}

fn build_plan(device: &DeviceSpec, duration: f64, rng: &mut ChaCha8Rng) -> RatePlan {
    let mut bursts = Vec::new();
    let mut high = Vec::new();
    if device.kind == DeviceKind::Camera {
        let mut toggles: Vec<f64> = device
            .schedule
            .iter()
            .filter(|e| e.activity == "mode_toggle")
            .map(|e| e.t)
            .collect();
        toggles.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mut streaming = false;
        let mut since = 0.0;
        for t in toggles {
            if streaming {
                high.push((since, t));
            }
            streaming = !streaming;
            since = t;
        }
        if streaming {
            high.push((since, duration));
        }
    }
    for entry in &device.schedule {
        if device.kind == DeviceKind::Camera && entry.activity == "mode_toggle" {
            continue;
        }
        let length = rng.gen_range(BURST_MIN_SECONDS..=BURST_MAX_SECONDS);
        let end = (entry.t + length).min(duration);
        bursts.push((entry.t, end, device.baseline_rate * BURST_MULTIPLIER));
    }
    RatePlan { bursts, high }
}

/// Generates one scenario: the capture a passive observer would record
/// (packets plus the cleartext-DNS side channel) and the ground truth of
/// what actually happened. Deterministic in the scenario's seed.
pub fn generate_trace(scenario: &Scenario) -> Result<(Capture, GroundTruth), SimError> {
    validate(scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let start_us = (scenario.start * MICROS_PER_SEC as f64).round() as u64;
    let mut next_port = scenario.nat.port_range.0;
    let mut alloc_port = || {
        let p = next_port;
        next_port += 1;
        p
    };

    let resolver_port = alloc_port();
    let mut packets: Vec<PacketRecord> = Vec::new();
    let mut observations: Vec<DnsObservation> = Vec::new();

    // Start-up DNS answers, one per endpoint, staggered so none share a
    // timestamp with another.
    let mut lookup_index = 0u64;
    for device in &scenario.devices {
        for endpoint in &device.endpoints {
            let ts = start_us + 500_000 + lookup_index * 250_000;
            lookup_index += 1;
            let query_name = endpoint.domain.to_ascii_lowercase();
            let payload = dns::response_len(&query_name, 1) as u32;
            observations.push(DnsObservation {
                ts_micros: ts,
                query_name: query_name.clone(),
                answers: [endpoint.ip].into_iter().collect(),
            });
            packets.push(PacketRecord {
                ts_micros: ts,
                direction: Direction::Inbound,
                local_ip: scenario.nat.public_ip,
                remote_ip: scenario.resolver,
                local_port: resolver_port,
                remote_port: 53,
                transport: Transport::Udp,
                wire_len: payload + 42,
                payload_len: payload,
            });
        }
    }

    let bins = scenario.duration.ceil() as u64;
    for device in &scenario.devices {
        let plan = build_plan(device, scenario.duration, &mut rng);
        for endpoint in &device.endpoints {
            let local_port = alloc_port();
            let mut acc_send = 0.0f64;
            let mut acc_recv = 0.0f64;
            for bin in 0..bins {
                let bin_time = bin as f64;
                let width = (scenario.duration - bin_time).min(1.0);
                let (rate, streaming) = match endpoint.role {
                    EndpointRole::Primary => plan.rate_at(bin_time, device.baseline_rate),
                    EndpointRole::Background => (device.baseline_rate, false),
                };
                let z: f64 = rng.sample(StandardNormal);
                let target = rate * (device.noise * z).exp() * width;
                let send_share = if streaming { 1.0 } else { SEND_SHARE };
                acc_send += target * send_share;
                acc_recv += target * (1.0 - send_share);
                let bin_start = start_us + bin * MICROS_PER_SEC;
                let width_us = (width * MICROS_PER_SEC as f64) as u64;
                for (acc, direction) in
                    [(&mut acc_send, Direction::Outbound), (&mut acc_recv, Direction::Inbound)]
                {
                    loop {
                        let size = if streaming {
                            HIGH_MODE_PACKET
                        } else {
                            rng.gen_range(PACKET_MIN..=PACKET_MAX)
                        };
                        if *acc < size as f64 {
                            break;
                        }
                        *acc -= size as f64;
                        let offset = rng.gen_range(0..width_us.max(1));
                        packets.push(PacketRecord {
                            ts_micros: bin_start + offset,
                            direction,
                            local_ip: scenario.nat.public_ip,
                            remote_ip: endpoint.ip,
                            local_port,
                            remote_port: endpoint.port,
                            transport: endpoint.transport,
                            wire_len: size,
                            payload_len: 0,
                        });
                    }
                }
            }
        }
    }

    packets.sort_by_key(|p| p.ts_micros);
    observations.sort_by_key(|o| o.ts_micros);

    let mut truth = GroundTruth::default();
    for device in &scenario.devices {
        for entry in &device.schedule {
            truth.entries.push(TruthEntry {
                t: scenario.start + entry.t,
                device: device.name.clone(),
                activity: entry.activity.clone(),
            });
        }
    }
    truth.sort();

    let trace = Trace {
        packets,
        home_subnet: Some(scenario.nat.home_subnet),
    };
    Ok((Capture::new(trace, observations), truth))
}

fn default_nat() -> NatSpec {
    NatSpec {
        public_ip: "10.0.0.1".parse().unwrap(),
        home_subnet: "10.0.0.0/24".parse().unwrap(),
        port_range: (40000, 41000),
    }
}

fn endpoint(domain: &str, ip: &str, port: u16, transport: Transport, role: EndpointRole) -> Endpoint {
    Endpoint {
        domain: domain.to_string(),
        ip: ip.parse().unwrap(),
        port,
        transport,
        role,
    }
}

fn schedule(activity: &str, times: &[f64]) -> Vec<ScheduleEntry> {
    times
        .iter()
        .map(|t| ScheduleEntry {
            t: *t,
            activity: activity.to_string(),
        })
        .collect()
}

fn every_120s(activity: &str, count: usize) -> Vec<ScheduleEntry> {
    let times: Vec<f64> = (1..=count).map(|i| 120.0 * i as f64).collect();
    schedule(activity, &times)
}

fn sense_device(schedule: Vec<ScheduleEntry>) -> DeviceSpec {
    DeviceSpec {
        name: "Sense Sleep Monitor".to_string(),
        kind: DeviceKind::Sense,
        endpoints: vec![
            endpoint("sense-in.hello.is", "52.32.10.21", 443, Transport::Tcp, EndpointRole::Primary),
            endpoint("ntp.hello.is", "52.32.10.22", 123, Transport::Udp, EndpointRole::Background),
        ],
        baseline_rate: 50.0,
        noise: 0.2,
        schedule,
    }
}

fn camera_device(schedule: Vec<ScheduleEntry>) -> DeviceSpec {
    DeviceSpec {
        name: "Nest Security Camera".to_string(),
        kind: DeviceKind::Camera,
        endpoints: vec![endpoint(
            "nexus.dropcam.com",
            "34.200.45.10",
            443,
            Transport::Tcp,
            EndpointRole::Primary,
        )],
        baseline_rate: 50.0,
        noise: 0.2,
        schedule,
    }
}

fn switch_device(schedule: Vec<ScheduleEntry>) -> DeviceSpec {
    DeviceSpec {
        name: "WeMo Switch".to_string(),
        kind: DeviceKind::Switch,
        endpoints: vec![endpoint(
            "prod1-api-xbcs-net-889336557.us-east-1.elb.amazonaws.com",
            "54.172.8.40",
            443,
            Transport::Tcp,
            EndpointRole::Primary,
        )],
        baseline_rate: 50.0,
        noise: 0.2,
        schedule,
    }
}

fn echo_device(schedule: Vec<ScheduleEntry>) -> DeviceSpec {
    DeviceSpec {
        name: "Amazon Echo".to_string(),
        kind: DeviceKind::Echo,
        endpoints: vec![
            endpoint("pindorama.amazon.com", "54.239.28.85", 443, Transport::Tcp, EndpointRole::Primary),
            endpoint(
                "softwareupdates.amazon.com",
                "52.94.232.10",
                443,
                Transport::Tcp,
                EndpointRole::Background,
            ),
        ],
        baseline_rate: 50.0,
        noise: 0.2,
        schedule,
    }
}

fn scenario(name: &str, duration: f64, devices: Vec<DeviceSpec>) -> Scenario {
    Scenario {
        name: name.to_string(),
        start: DEFAULT_START,
        duration,
        seed: DEFAULT_SEED,
        devices,
        nat: default_nat(),
        resolver: "203.0.113.53".parse().unwrap(),
    }
}

/// The built-in scenario set: one per profiled device behavior, plus a
/// composite home running all four devices behind one NAT.
///
/// Every scenario starts at 22:40 clock time. The sleep scenario's events
/// land at 00:30, 06:30, and 09:15 — a night bracketed by going to bed,
/// one interruption, and getting up.
pub fn default_scenarios() -> Vec<Scenario> {
    let sense_schedule = schedule("movement", &[6_600.0, 28_200.0, 38_100.0]);
    vec![
        scenario("sense-night", 43_200.0, vec![sense_device(sense_schedule.clone())]),
        scenario("camera-alternating", 1_200.0, vec![camera_device(every_120s("mode_toggle", 9))]),
        scenario("camera-motion", 1_200.0, vec![camera_device(every_120s("motion", 9))]),
        scenario("switch-toggle", 1_380.0, vec![switch_device(every_120s("toggle", 10))]),
        scenario("echo-qa", 1_200.0, vec![echo_device(every_120s("question", 9))]),
        scenario(
            "composite",
            43_200.0,
            vec![
                sense_device(sense_schedule),
                camera_device(every_120s("motion", 9)),
                switch_device(every_120s("toggle", 10)),
                echo_device(every_120s("question", 9)),
            ],
        ),
    ]
}

/// Looks up a built-in scenario by name.
pub fn scenario_by_name(name: &str) -> Option<Scenario> {
    default_scenarios().into_iter().find(|s| s.name == name)
}
