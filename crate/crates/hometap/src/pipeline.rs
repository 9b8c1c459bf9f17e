//! The end-to-end passive-observer analysis: validate, tag directions,
//! separate streams, label them from DNS, then run whichever inference
//! profile each label calls for, assembling everything into one report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::flow::{separate_streams, stream_stats, StreamStats};
use crate::ingest::{tag_direction, Capture};
use crate::labeling::{
    build_ip_domain_map, default_fingerprints, label_streams, FingerprintDb, ReverseDns,
};
use crate::model::{
    validate_trace, Cidr, DeviceLabel, Event, ModelError, NightWindow, RateDirection, StreamKey,
};
use crate::profiles::{
    infer_camera, infer_interactions, infer_sleep, infer_toggles, CameraReport, InteractionReport,
    SleepReport, ToggleReport,
};
use crate::rates::{
    classify_bimodal, compute_rate_series, detect_spikes_smoothed, Mode, SpikeConfig,
};

/// Which inference rule a device label routes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Sleep,
    Camera,
    Toggle,
    Interaction,
}

/// Maps the bundled fingerprint names to their inference rules.
pub fn default_profile_map() -> BTreeMap<String, ProfileKind> {
    [
        ("Sense Sleep Monitor", ProfileKind::Sleep),
        ("Nest Security Camera", ProfileKind::Camera),
        ("WeMo Switch", ProfileKind::Toggle),
        ("Amazon Echo", ProfileKind::Interaction),
    ]
    .into_iter()
    .map(|(device, kind)| (device.to_string(), kind))
    .collect()
}

/// Everything the analysis needs beyond the capture itself. The defaults
/// match the simulator's scenarios; every knob is also a CLI flag.
#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    /// Rate bin width in seconds.
    pub window: f64,
    /// Pre-detection smoothing half-width, in bins.
    pub smoothing_half_width: usize,
    pub spike: SpikeConfig,
    /// Cluster-mean ratio above which a stream counts as bimodal.
    pub ratio_threshold: f64,
    /// Minimum mode-segment duration in seconds.
    pub dwell: f64,
    pub night_window: NightWindow,
    /// When set, directions are (re)tagged against this subnet before
    /// analysis; otherwise the trace's existing tagging is trusted.
    pub home_subnet: Option<Cidr>,
    pub fingerprints: FingerprintDb,
    /// Device name -> inference rule. Labels not in the map get stats only.
    pub profile_map: BTreeMap<String, ProfileKind>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            window: 1.0,
            smoothing_half_width: 2,
            spike: SpikeConfig::default(),
            ratio_threshold: 10.0,
            dwell: 30.0,
            night_window: NightWindow::default(),
            home_subnet: None,
            fingerprints: default_fingerprints().clone(),
            profile_map: default_profile_map(),
        }
    }
}

/// Per-stream line of the report: identity, best label, traffic totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub key: StreamKey,
    pub label: DeviceLabel,
    pub stats: StreamStats,
}

/// One inferred activity, tagged by profile kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Finding {
    Sleep {
        device: String,
        stream: StreamKey,
        report: SleepReport,
    },
    Camera {
        device: String,
        stream: StreamKey,
        report: CameraReport,
    },
    Toggle {
        device: String,
        stream: StreamKey,
        report: ToggleReport,
    },
    Interaction {
        device: String,
        stream: StreamKey,
        report: InteractionReport,
    },
}

impl Finding {
    pub fn device(&self) -> &str {
        match self {
            Finding::Sleep { device, .. }
            | Finding::Camera { device, .. }
            | Finding::Toggle { device, .. }
            | Finding::Interaction { device, .. } => device,
        }
    }
}

/// The full analysis output: every stream with its label and totals, the
/// activities inferred from them, and notes about anything the analysis had
/// to skip or could not conclude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ActivityReport {
    pub streams: Vec<StreamSummary>,
    pub findings: Vec<Finding>,
    pub notes: Vec<String>,
    pub unknown_direction_packets: u64,
}

/// Runs the whole observer pipeline over one capture.
///
/// Streams whose label is not in the profile map — unlabeled ones included —
/// contribute stats but no findings; that keeps infrastructure streams (the
/// resolver itself, unknown endpoints) from ever being read as activity.
/// Profiles that find nothing produce no finding; a sleep-profile stream
/// with too few night events additionally leaves a note saying so.
pub fn run_pipeline(
    capture: &Capture,
    config: &AnalysisConfig,
    reverse: Option<&dyn ReverseDns>,
) -> Result<ActivityReport, ModelError> {
    let mut trace = validate_trace(capture.trace.clone())?;
    if let Some(subnet) = config.home_subnet {
        trace = tag_direction(trace, subnet);
    }

    let mut notes = Vec::new();
    if capture.skipped_packets > 0 {
        notes.push(format!(
            "{} unparseable packets were skipped at ingest",
            capture.skipped_packets
        ));
    }
    if capture.malformed_dns > 0 {
        notes.push(format!(
            "{} DNS payloads could not be decoded",
            capture.malformed_dns
        ));
    }
    if trace.home_subnet.is_none() {
        notes.push(
            "no home subnet known; packet directions are unknown and no streams were formed"
                .to_string(),
        );
    }

    let separation = separate_streams(&trace);
    let mut streams = separation.streams;
    let map = build_ip_domain_map(&capture.dns);
    let label_stats = label_streams(&mut streams, &map, &config.fingerprints, reverse);
    if label_stats.resolver_failures > 0 {
        notes.push(format!(
            "{} of {} reverse DNS lookups failed; affected streams stay unlabeled",
            label_stats.resolver_failures, label_stats.resolver_lookups
        ));
    }

    let mut summaries = Vec::with_capacity(streams.len());
    let mut findings = Vec::new();
    let mut assistant_streams: Vec<(StreamKey, Vec<Event>, String)> = Vec::new();

    for stream in &streams {
        let label = stream.label.clone().unwrap_or_else(DeviceLabel::unknown);
        summaries.push(StreamSummary {
            key: stream.key,
            label: label.clone(),
            stats: stream_stats(stream),
        });
        let Some(kind) = config.profile_map.get(&label.device) else {
            continue;
        };
        let raw = compute_rate_series(stream, config.window, None);
        let events = detect_spikes_smoothed(
            &raw,
            RateDirection::Either,
            config.smoothing_half_width,
            &config.spike,
        );
        match kind {
            ProfileKind::Sleep => match infer_sleep(&events, &config.night_window) {
                Some(report) => findings.push(Finding::Sleep {
                    device: label.device.clone(),
                    stream: stream.key,
                    report,
                }),
                None => notes.push(format!(
                    "{} ({}): fewer than two night-window events; no sleep pattern inferred",
                    stream.key, label.device
                )),
            },
            ProfileKind::Camera => {
                let segments =
                    classify_bimodal(&raw, RateDirection::Either, config.ratio_threshold, config.dwell);
                let mut low_events = Vec::new();
                for (i, segment) in segments.iter().enumerate() {
                    if segment.mode != Mode::Low {
                        continue;
                    }
                    // A bin straddling a mode flip holds a fraction of a
                    // streaming second; it belongs to the interval boundary,
                    // not to motion detection.
                    let start = if i > 0 { segment.start + config.window } else { segment.start };
                    let end = if i + 1 < segments.len() {
                        segment.end - config.window
                    } else {
                        segment.end
                    };
                    if end <= start {
                        continue;
                    }
                    let sub = compute_rate_series(stream, config.window, Some((start, end)));
                    low_events.extend(detect_spikes_smoothed(
                        &sub,
                        RateDirection::Either,
                        config.smoothing_half_width,
                        &config.spike,
                    ));
                }
                let report = infer_camera(&segments, &low_events);
                if !report.is_empty() {
                    findings.push(Finding::Camera {
                        device: label.device.clone(),
                        stream: stream.key,
                        report,
                    });
                }
            }
            ProfileKind::Toggle => {
                let report = infer_toggles(&events);
                if !report.is_empty() {
                    findings.push(Finding::Toggle {
                        device: label.device.clone(),
                        stream: stream.key,
                        report,
                    });
                }
            }
            ProfileKind::Interaction => {
                assistant_streams.push((stream.key, events, label.device.clone()));
            }
        }
    }

    if !assistant_streams.is_empty() {
        let pairs: Vec<(StreamKey, Vec<Event>)> = assistant_streams
            .iter()
            .map(|(key, events, _)| (*key, events.clone()))
            .collect();
        if let Some(report) = infer_interactions(&pairs) {
            if !report.interaction_times.is_empty() {
                let device = assistant_streams
                    .iter()
                    .find(|(key, ..)| *key == report.selected_stream)
                    .map(|(_, _, device)| device.clone())
                    .expect("selected stream comes from the candidate list");
                findings.push(Finding::Interaction {
                    device,
                    stream: report.selected_stream,
                    report,
                });
            }
        }
    }

    Ok(ActivityReport {
        streams: summaries,
        findings,
        notes,
        unknown_direction_packets: separation.unknown_direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::load_fingerprints;
    use crate::model::{Direction, DnsObservation, PacketRecord, Trace, Transport};

    fn packet(ts_micros: u64, src: &str, dst: &str, sport: u16, dport: u16, len: u32) -> PacketRecord {
        PacketRecord {
            ts_micros,
            direction: Direction::Unknown,
            local_ip: src.parse().unwrap(),
            remote_ip: dst.parse().unwrap(),
            local_port: sport,
            remote_port: dport,
            transport: Transport::Tcp,
            wire_len: len,
            payload_len: 0,
        }
    }

    /// A switch-shaped capture: silence except three 10 s bursts of
    /// 1500 B/s, with the DNS answer that ties the remote to the switch.
    fn toggle_capture() -> Capture {
        let mut packets = Vec::new();
        for burst_start in [0u64, 120, 240] {
            for s in 0..10u64 {
                let t = (burst_start + s) * 1_000_000;
                packets.push(packet(t, "10.0.0.7", "54.172.8.40", 40000, 443, 750));
                packets.push(packet(t + 400_000, "10.0.0.7", "54.172.8.40", 40000, 443, 750));
            }
        }
        Capture {
            trace: Trace::new(packets),
            dns: vec![DnsObservation {
                ts_micros: 0,
                query_name: "prod1-api-xbcs-net-889336557.us-east-1.elb.amazonaws.com".into(),
                answers: ["54.172.8.40".parse().unwrap()].into_iter().collect(),
            }],
            skipped_packets: 0,
            malformed_dns: 0,
        }
    }

    fn config() -> AnalysisConfig {
        AnalysisConfig {
            home_subnet: Some("10.0.0.0/24".parse().unwrap()),
            ..AnalysisConfig::default()
        }
    }

    #[test]
    fn toggles_come_out_of_a_switch_capture() {
        let report = run_pipeline(&toggle_capture(), &config(), None).unwrap();
        assert_eq!(report.streams.len(), 1);
        assert_eq!(report.streams[0].label.device, "WeMo Switch");
        assert_eq!(report.streams[0].label.confidence, 0.5);
        assert_eq!(report.unknown_direction_packets, 0);
        assert_eq!(report.findings.len(), 1);
        match &report.findings[0] {
            Finding::Toggle { device, report, .. } => {
                assert_eq!(device, "WeMo Switch");
                assert_eq!(report.toggle_times.len(), 3);
            }
            other => panic!("expected a toggle finding, got {other:?}"),
        }
    }

    #[test]
    fn renaming_a_device_everywhere_is_isomorphic() {
        let renamed_db = load_fingerprints(
            r#"{"entries":[{
                "device": "Kitchen Plug",
                "manufacturer": "Belkin",
                "patterns": ["*xbcs*.amazonaws.com"]
            }]}"#,
        )
        .unwrap();
        let mut renamed_config = config();
        renamed_config.fingerprints = renamed_db;
        renamed_config.profile_map =
            [("Kitchen Plug".to_string(), ProfileKind::Toggle)].into_iter().collect();

        let base = run_pipeline(&toggle_capture(), &config(), None).unwrap();
        let renamed = run_pipeline(&toggle_capture(), &renamed_config, None).unwrap();

        assert_eq!(renamed.findings.len(), base.findings.len());
        match (&base.findings[0], &renamed.findings[0]) {
            (
                Finding::Toggle { device: d0, report: r0, stream: s0 },
                Finding::Toggle { device: d1, report: r1, stream: s1 },
            ) => {
                assert_eq!(d0, "WeMo Switch");
                assert_eq!(d1, "Kitchen Plug");
                assert_eq!(r0, r1);
                assert_eq!(s0, s1);
            }
            other => panic!("expected matching toggle findings, got {other:?}"),
        }
    }

    #[test]
    fn empty_capture_is_an_empty_report() {
        let capture = Capture {
            trace: Trace::default(),
            dns: Vec::new(),
            skipped_packets: 0,
            malformed_dns: 0,
        };
        let report = run_pipeline(&capture, &config(), None).unwrap();
        assert!(report.streams.is_empty());
        assert!(report.findings.is_empty());
        assert_eq!(report.unknown_direction_packets, 0);
    }

    #[test]
    fn unlabeled_streams_get_stats_only() {
        let mut capture = toggle_capture();
        capture.dns.clear();
        let report = run_pipeline(&capture, &config(), None).unwrap();
        assert_eq!(report.streams.len(), 1);
        assert!(report.streams[0].label.is_unknown());
        assert!(report.streams[0].stats.send_bytes > 0);
        assert!(report.findings.is_empty());
    }

    #[test]
    fn quiet_camera_yields_no_finding() {
        let mut packets = Vec::new();
        for s in 0..300u64 {
            packets.push(packet(s * 1_000_000, "10.0.0.9", "34.200.45.10", 40003, 443, 50));
        }
        let capture = Capture {
            trace: Trace::new(packets),
            dns: vec![DnsObservation {
                ts_micros: 0,
                query_name: "nexus.dropcam.com".into(),
                answers: ["34.200.45.10".parse().unwrap()].into_iter().collect(),
            }],
            skipped_packets: 0,
            malformed_dns: 0,
        };
        let report = run_pipeline(&capture, &config(), None).unwrap();
        assert_eq!(report.streams[0].label.device, "Nest Security Camera");
        assert!(report.findings.is_empty());
    }

    #[test]
    fn untagged_capture_reports_unknown_directions() {
        let mut untagged = config();
        untagged.home_subnet = None;
        let report = run_pipeline(&toggle_capture(), &untagged, None).unwrap();
        assert!(report.streams.is_empty());
        assert_eq!(report.unknown_direction_packets, 60);
        assert!(report
            .notes
            .iter()
            .any(|n| n.contains("no home subnet known")));
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = run_pipeline(&toggle_capture(), &config(), None).unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: ActivityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["findings"][0]["kind"], "toggle");
    }
}
