//! Per-device inference rules: turning detected events and mode segments
//! into claims about what the people behind the NAT were doing.
//!
//! Each rule is deliberately narrow. A sleep monitor's night-time spikes
//! bracket the night; a camera's High mode means someone is watching the
//! live stream; a smart switch spikes on every toggle (but the traffic does
//! not reveal on versus off, so the report has no field for it); a voice
//! assistant answers questions on whichever stream pulses most regularly.

use serde::{Deserialize, Serialize};

use crate::model::{Event, NightWindow, StreamKey};
use crate::rates::{Mode, ModeSegment};

/// One night of inferred sleep: the first and last night-window events
/// bracket the night, anything between is an interruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepReport {
    pub bedtime: f64,
    pub wake_time: f64,
    pub interruptions: Vec<f64>,
    /// The detected events the report was built from.
    pub events: Vec<Event>,
}

/// Brackets the night with a sleep monitor's traffic spikes.
///
/// Only events whose clock time falls inside `night` count. The earliest
/// becomes bedtime, the latest wake-up, the rest interruptions. Fewer than
/// two usable events — or events that all share one timestamp — make the
/// night uninferable and yield `None`; callers record the reason.
pub fn infer_sleep(events: &[Event], night: &NightWindow) -> Option<SleepReport> {
    let mut windowed: Vec<Event> = events
        .iter()
        .filter(|e| night.contains(e.time))
        .cloned()
        .collect();
    windowed.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap_or(std::cmp::Ordering::Equal));
    if windowed.len() < 2 {
        return None;
    }
    let bedtime = windowed.first().unwrap().time;
    let wake_time = windowed.last().unwrap().time;
    if wake_time <= bedtime {
        return None;
    }
    let interruptions = windowed
        .iter()
        .map(|e| e.time)
        .filter(|t| *t > bedtime && *t < wake_time)
        .collect();
    Some(SleepReport {
        bedtime,
        wake_time,
        interruptions,
        events: windowed,
    })
}

/// What a camera was doing: when its live stream was watched, and when it
/// saw motion while idle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraReport {
    pub streaming_intervals: Vec<(f64, f64)>,
    pub motion_events: Vec<f64>,
}

impl CameraReport {
    pub fn is_empty(&self) -> bool {
        self.streaming_intervals.is_empty() && self.motion_events.is_empty()
    }
}

/// High segments become streaming intervals; spike events become motion
/// sightings. Events that land inside a streaming interval are dropped —
/// rate spikes mean nothing while the camera is already saturating its
/// uplink, so motion is only observable from Low mode.
pub fn infer_camera(segments: &[ModeSegment], events: &[Event]) -> CameraReport {
    let streaming_intervals: Vec<(f64, f64)> = segments
        .iter()
        .filter(|s| s.mode == Mode::High)
        .map(|s| (s.start, s.end))
        .collect();
    let mut motion_events: Vec<f64> = events
        .iter()
        .map(|e| e.time)
        .filter(|t| {
            !streaming_intervals
                .iter()
                .any(|(t0, t1)| *t >= *t0 && *t < *t1)
        })
        .collect();
    motion_events.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    CameraReport {
        streaming_intervals,
        motion_events,
    }
}

/// Times a smart switch changed state. There is deliberately no field for
/// which state it changed to: on and off produce indistinguishable traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToggleReport {
    pub toggle_times: Vec<f64>,
}

impl ToggleReport {
    pub fn is_empty(&self) -> bool {
        self.toggle_times.is_empty()
    }
}

pub fn infer_toggles(events: &[Event]) -> ToggleReport {
    let mut toggle_times: Vec<f64> = events.iter().map(|e| e.time).collect();
    toggle_times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ToggleReport { toggle_times }
}

/// Voice-assistant interactions, taken from the one stream that correlated
/// best with question/answer traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub interaction_times: Vec<f64>,
    pub selected_stream: StreamKey,
}

/// Population coefficient of variation of the gaps between consecutive
/// times. Fewer than two gaps (or a zero mean gap) gives no regularity
/// signal, reported as infinity.
fn gap_cv(times: &[f64]) -> f64 {
    if times.len() < 3 {
        return f64::INFINITY;
    }
    let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if mean <= 0.0 {
        return f64::INFINITY;
    }
    let variance = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
    variance.sqrt() / mean
}

/// Picks the assistant's interaction stream from candidates.
///
/// An assistant keeps several connections open (service traffic, updates,
/// music); only one of them pulses once per spoken question. The stream with
/// the most detected events wins; ties go to the stream whose inter-event
/// gaps are most regular (lowest coefficient of variation), then to the
/// earliest candidate. `None` only when there are no candidates at all — a
/// candidate without events still names the stream, with nothing in it.
pub fn infer_interactions(candidates: &[(StreamKey, Vec<Event>)]) -> Option<InteractionReport> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, (_, events)) in candidates.iter().enumerate() {
        let times: Vec<f64> = events.iter().map(|e| e.time).collect();
        let cv = gap_cv(&times);
        let better = match best {
            None => true,
            Some((_, count, best_cv)) => {
                events.len() > count || (events.len() == count && cv < best_cv)
            }
        };
        if better {
            best = Some((i, events.len(), cv));
        }
    }
    let (index, ..) = best?;
    let (key, events) = &candidates[index];
    let mut interaction_times: Vec<f64> = events.iter().map(|e| e.time).collect();
    interaction_times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Some(InteractionReport {
        interaction_times,
        selected_stream: *key,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventKind, RateDirection, Transport};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn event(time: f64) -> Event {
        Event {
            time,
            direction: RateDirection::Either,
            peak_rate: 1_500.0,
            magnitude: 30.0,
            kind: EventKind::Spike,
        }
    }

    fn key(port: u16) -> StreamKey {
        StreamKey {
            remote_ip: "54.239.28.85".parse().unwrap(),
            remote_port: 443,
            local_port: port,
            transport: Transport::Tcp,
        }
    }

    #[test]
    fn night_events_bracket_the_night() {
        let night: NightWindow = "22:40-10:40".parse().unwrap();
        let half_past_midnight = 30.0 * 60.0;
        let half_past_six = 6.5 * 3600.0;
        let quarter_past_nine = 9.25 * 3600.0;
        let early_afternoon = 13.0 * 3600.0;
        let events = vec![
            event(half_past_midnight),
            event(half_past_six),
            event(quarter_past_nine),
            event(early_afternoon),
        ];
        let report = infer_sleep(&events, &night).unwrap();
        assert_eq!(report.bedtime, half_past_midnight);
        assert_eq!(report.interruptions, [half_past_six]);
        assert_eq!(report.wake_time, quarter_past_nine);
        assert_eq!(report.events.len(), 3);
    }

    #[test]
    fn night_window_wraps_across_epoch_midnight() {
        let night: NightWindow = "22:40-10:40".parse().unwrap();
        let start = 1_474_411_200.0;
        let events = vec![event(start + 6_600.0), event(start + 38_100.0)];
        let report = infer_sleep(&events, &night).unwrap();
        assert_eq!(report.bedtime, start + 6_600.0);
        assert_eq!(report.wake_time, start + 38_100.0);
        assert!(report.interruptions.is_empty());
    }

    #[test]
    fn too_few_events_is_no_report() {
        let night = NightWindow::default();
        assert!(infer_sleep(&[], &night).is_none());
        assert!(infer_sleep(&[event(22.5 * 3600.0)], &night).is_none());
        let out_of_window = vec![event(13.0 * 3600.0), event(14.0 * 3600.0)];
        assert!(infer_sleep(&out_of_window, &night).is_none());
        let same_instant = vec![event(23.0 * 3600.0), event(23.0 * 3600.0)];
        assert!(infer_sleep(&same_instant, &night).is_none());
    }

    #[test]
    fn two_events_make_a_night_without_interruptions() {
        let night = NightWindow::default();
        let report = infer_sleep(&[event(23.0 * 3600.0), event(8.0 * 3600.0)], &night).unwrap();
        assert_eq!(report.bedtime, 8.0 * 3600.0);
        assert_eq!(report.wake_time, 23.0 * 3600.0);
        assert!(report.interruptions.is_empty());
    }

    #[test]
    fn sleep_report_ordering_holds_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let night = NightWindow::default();
        for _ in 0..200 {
            let events: Vec<Event> = (0..rng.gen_range(0..12))
                .map(|_| event(rng.gen_range(0.0..2.0 * 86_400.0)))
                .collect();
            if let Some(report) = infer_sleep(&events, &night) {
                assert!(report.bedtime < report.wake_time);
                for t in &report.interruptions {
                    assert!(*t > report.bedtime && *t < report.wake_time);
                }
                assert!(night.contains(report.bedtime));
                assert!(night.contains(report.wake_time));
            }
        }
    }

    fn segment(start: f64, end: f64, mode: Mode) -> ModeSegment {
        ModeSegment { start, end, mode }
    }

    #[test]
    fn camera_splits_streaming_from_motion() {
        let segments = vec![
            segment(0.0, 120.0, Mode::High),
            segment(120.0, 240.0, Mode::Low),
            segment(240.0, 360.0, Mode::High),
            segment(360.0, 480.0, Mode::Low),
        ];
        let events = vec![event(180.0), event(420.0), event(60.0)];
        let report = infer_camera(&segments, &events);
        assert_eq!(report.streaming_intervals, [(0.0, 120.0), (240.0, 360.0)]);
        assert_eq!(report.motion_events, [180.0, 420.0]);
    }

    #[test]
    fn idle_camera_reports_nothing() {
        let segments = vec![segment(0.0, 1200.0, Mode::Low)];
        let report = infer_camera(&segments, &[]);
        assert!(report.is_empty());
    }

    #[test]
    fn always_streaming_camera_is_one_interval() {
        let segments = vec![segment(0.0, 1200.0, Mode::High)];
        let report = infer_camera(&segments, &[event(600.0)]);
        assert_eq!(report.streaming_intervals, [(0.0, 1200.0)]);
        assert!(report.motion_events.is_empty());
    }

    #[test]
    fn toggles_are_event_times_in_order() {
        let report = infer_toggles(&[event(240.0), event(120.0), event(360.0)]);
        assert_eq!(report.toggle_times, [120.0, 240.0, 360.0]);
        assert!(infer_toggles(&[]).is_empty());
    }

    #[test]
    fn toggle_report_has_no_state_field() {
        let json = serde_json::to_value(infer_toggles(&[event(120.0)])).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["toggle_times"]);
    }

    #[test]
    fn busiest_stream_wins_interaction_selection() {
        let questions: Vec<Event> = (0..9).map(|i| event(120.0 + 120.0 * i as f64)).collect();
        let chatter = vec![event(33.0), event(500.0)];
        let report = infer_interactions(&[
            (key(40000), chatter),
            (key(40001), questions.clone()),
        ])
        .unwrap();
        assert_eq!(report.selected_stream, key(40001));
        assert_eq!(report.interaction_times.len(), 9);
        assert_eq!(report.interaction_times[0], 120.0);
        assert_eq!(report.interaction_times[8], 1080.0);
    }

    #[test]
    fn regularity_breaks_count_ties() {
        let periodic = vec![event(100.0), event(220.0), event(340.0)];
        let jittery = vec![event(100.0), event(200.0), event(340.0)];

        let cv = |times: &[f64]| {
            let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let var =
                gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
            var.sqrt() / mean
        };
        assert_eq!(cv(&[100.0, 220.0, 340.0]), 0.0);
        assert!((cv(&[100.0, 200.0, 340.0]) - 20.0 / 120.0).abs() < 1e-12);

        let report =
            infer_interactions(&[(key(40000), jittery), (key(40001), periodic)]).unwrap();
        assert_eq!(report.selected_stream, key(40001));
    }

    #[test]
    fn quiet_assistant_still_names_its_stream() {
        let report = infer_interactions(&[(key(40000), Vec::new())]).unwrap();
        assert_eq!(report.selected_stream, key(40000));
        assert!(report.interaction_times.is_empty());
    }

    #[test]
    fn no_candidates_is_no_report() {
        assert!(infer_interactions(&[]).is_none());
    }

    #[test]
    fn equal_count_and_regularity_selects_the_first() {
        let a = vec![event(0.0), event(100.0), event(200.0)];
        let b = vec![event(50.0), event(150.0), event(250.0)];
        let report = infer_interactions(&[(key(40007), a), (key(40001), b)]).unwrap();
        assert_eq!(report.selected_stream, key(40007));
    }
}
