//! Traffic-rate time series and the detectors that read them.
//!
//! Everything here works on byte counts per fixed-width time bin — the one
//! signal an observer keeps after discarding payloads. Spikes above a robust
//! baseline mark user interactions; a two-cluster split of the bin rates
//! separates a camera's streaming mode from its idle mode.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::{
    Direction, Event, EventKind, RateDirection, RateSeries, Stream, MICROS_PER_SEC,
};

#[derive(Debug, thiserror::Error)]
pub enum RateError {
    #[error("cannot take a baseline of an empty series")]
    EmptySeries,
}

/// Bins a stream's packets into send/receive byte rates.
///
/// Bin `i` covers `[start + i*window, start + (i+1)*window)`. Binning is done
/// in integer microseconds so bin membership never depends on float rounding;
/// the effective window is the requested one rounded to whole microseconds.
/// Without an explicit span the series runs from the first packet to the last
/// (the final bin is the one containing the last packet); with a span,
/// packets outside it are ignored. Unknown-direction packets count toward
/// neither rate.
pub fn compute_rate_series(stream: &Stream, window: f64, span: Option<(f64, f64)>) -> RateSeries {
    let window_us = (window * MICROS_PER_SEC as f64).round() as u64;
    let empty = |start: f64, window: f64| RateSeries {
        start,
        window,
        send_rate: Vec::new(),
        recv_rate: Vec::new(),
    };
    if window_us == 0 {
        return empty(0.0, window);
    }
    let effective_window = window_us as f64 / MICROS_PER_SEC as f64;
    let (start_us, bins) = match span {
        Some((t0, t1)) => {
            let start = (t0.max(0.0) * MICROS_PER_SEC as f64).round() as u64;
            let end = (t1.max(0.0) * MICROS_PER_SEC as f64).round() as u64;
            if end <= start {
                return empty(start as f64 / MICROS_PER_SEC as f64, effective_window);
            }
            (start, ((end - start + window_us - 1) / window_us) as usize)
        }
        None => {
            let first = stream.packets.iter().map(|p| p.ts_micros).min();
            let last = stream.packets.iter().map(|p| p.ts_micros).max();
            match (first, last) {
                (Some(first), Some(last)) => (first, ((last - first) / window_us + 1) as usize),
                _ => return empty(0.0, effective_window),
            }
        }
    };
    let mut send = vec![0u64; bins];
    let mut recv = vec![0u64; bins];
    for packet in &stream.packets {
        if packet.ts_micros < start_us {
            continue;
        }
        let idx = ((packet.ts_micros - start_us) / window_us) as usize;
        if idx >= bins {
            continue;
        }
        match packet.direction {
            Direction::Outbound => send[idx] += u64::from(packet.wire_len),
            Direction::Inbound => recv[idx] += u64::from(packet.wire_len),
            Direction::Unknown => {}
        }
    }
    let to_rates = |bytes: Vec<u64>| {
        bytes
            .into_iter()
            .map(|b| b as f64 / effective_window)
            .collect()
    };
    RateSeries {
        start: start_us as f64 / MICROS_PER_SEC as f64,
        window: effective_window,
        send_rate: to_rates(send),
        recv_rate: to_rates(recv),
    }
}

fn smooth_values(values: &[f64], half_width: usize) -> Vec<f64> {
    if half_width == 0 || values.len() <= 1 {
        return values.to_vec();
    }
    let mut prefix = vec![0.0; values.len() + 1];
    for (i, v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width).min(values.len() - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64
        })
        .collect()
}

/// Centered moving average over `2*half_width + 1` bins, truncated at the
/// edges to the bins that exist. `half_width` 0 returns the series unchanged.
pub fn smooth(series: &RateSeries, half_width: usize) -> RateSeries {
    RateSeries {
        start: series.start,
        window: series.window,
        send_rate: smooth_values(&series.send_rate, half_width),
        recv_rate: smooth_values(&series.recv_rate, half_width),
    }
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    median_of_sorted(&sorted)
}

fn median_mad(values: &[f64]) -> (f64, f64) {
    let med = median(values);
    let deviations: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    (med, median(&deviations))
}

/// Median and median absolute deviation of the chosen direction's bins —
/// the robust baseline spikes are measured against.
pub fn baseline(series: &RateSeries, direction: RateDirection) -> Result<(f64, f64), RateError> {
    let values = series.values(direction);
    if values.is_empty() {
        return Err(RateError::EmptySeries);
    }
    Ok(median_mad(&values))
}

/// Spike-detector knobs. The floor keeps a near-silent baseline (MAD 0) from
/// turning every stray packet into an event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeConfig {
    /// MAD multiplier: a bin spikes when rate > median + k*mad.
    pub k: f64,
    /// Absolute minimum rate (B/s) a bin must exceed to count as spiking.
    pub floor: f64,
    /// Spiking bins closer together than this (seconds) merge into one event.
    pub min_separation: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig {
            k: 5.0,
            floor: 200.0,
            min_separation: 30.0,
        }
    }
}

fn detect_core(
    detect: &[f64],
    peaks: &[f64],
    start: f64,
    window: f64,
    direction: RateDirection,
    config: &SpikeConfig,
) -> Vec<Event> {
    debug_assert_eq!(detect.len(), peaks.len());
    if detect.is_empty() {
        return Vec::new();
    }
    let (median, mad) = median_mad(detect);
    let threshold = (median + config.k * mad).max(config.floor);
    let spiking: Vec<usize> = detect
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > threshold)
        .map(|(i, _)| i)
        .collect();
    let mut clusters: Vec<(usize, usize)> = Vec::new();
    for &bin in &spiking {
        match clusters.last_mut() {
            Some((_, hi)) if bin == *hi + 1 || (bin - *hi) as f64 * window <= config.min_separation => {
                *hi = bin;
            }
            _ => clusters.push((bin, bin)),
        }
    }
    clusters
        .into_iter()
        .map(|(lo, hi)| {
            let mut peak_bin = lo;
            for bin in lo..=hi {
                if peaks[bin] > peaks[peak_bin] {
                    peak_bin = bin;
                }
            }
            let peak_rate = peaks[peak_bin];
            Event {
                time: start + (peak_bin as f64 + 0.5) * window,
                direction,
                peak_rate,
                magnitude: peak_rate / median.max(1.0),
                kind: EventKind::Spike,
            }
        })
        .collect()
}

/// Finds rate spikes: bins whose rate exceeds `max(median + k*mad, floor)`.
///
/// Adjacent spiking bins — and spiking bins within `min_separation` seconds
/// of each other — collapse into a single event placed at the cluster's
/// highest bin (ties go to the earlier bin). Event time is that bin's center;
/// magnitude is the peak rate over `max(median, 1)`.
pub fn detect_spikes(
    series: &RateSeries,
    direction: RateDirection,
    config: &SpikeConfig,
) -> Vec<Event> {
    let values = series.values(direction);
    detect_core(
        &values,
        &values,
        series.start,
        series.window,
        direction,
        config,
    )
}

/// Spike detection with pre-smoothing: the threshold and spiking bins come
/// from the smoothed series, while the reported peak bin and peak rate come
/// from the raw series, so short bursts keep their true height.
pub fn detect_spikes_smoothed(
    raw: &RateSeries,
    direction: RateDirection,
    half_width: usize,
    config: &SpikeConfig,
) -> Vec<Event> {
    let raw_values = raw.values(direction);
    let smoothed = smooth_values(&raw_values, half_width);
    detect_core(
        &smoothed,
        &raw_values,
        raw.start,
        raw.window,
        direction,
        config,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Low,
    High,
}

/// A maximal run of bins operating in one mode. `start`/`end` are seconds;
/// segments returned by [`classify_bimodal`] tile the series span exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSegment {
    pub start: f64,
    pub end: f64,
    pub mode: Mode,
}

impl ModeSegment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Splits a series into High/Low operating modes.
///
/// Bin rates are clustered with 1-D k-means (k=2, centers initialized at the
/// min and max). If the cluster means differ by less than `ratio_threshold`
/// the device is considered single-mode and the whole span is one Low
/// segment. Otherwise bins take the mode of the nearer center, and any
/// segment shorter than `dwell` seconds is absorbed into its neighbors
/// (shortest first), so brief dropouts or bursts do not fragment a mode.
pub fn classify_bimodal(
    series: &RateSeries,
    direction: RateDirection,
    ratio_threshold: f64,
    dwell: f64,
) -> Vec<ModeSegment> {
    let values = series.values(direction);
    if values.is_empty() {
        return Vec::new();
    }
    let span_end = series.start + values.len() as f64 * series.window;
    let whole_low = vec![ModeSegment {
        start: series.start,
        end: span_end,
        mode: Mode::Low,
    }];
    let lo_init = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_init = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo_init == hi_init {
        return whole_low;
    }
    let (mut c_lo, mut c_hi) = (lo_init, hi_init);
    for _ in 0..64 {
        let mid = (c_lo + c_hi) / 2.0;
        let (mut lo_sum, mut lo_n, mut hi_sum, mut hi_n) = (0.0, 0u64, 0.0, 0u64);
        for &v in &values {
            if v <= mid {
                lo_sum += v;
                lo_n += 1;
            } else {
                hi_sum += v;
                hi_n += 1;
            }
        }
        if lo_n == 0 || hi_n == 0 {
            break;
        }
        let next_lo = lo_sum / lo_n as f64;
        let next_hi = hi_sum / hi_n as f64;
        if next_lo == c_lo && next_hi == c_hi {
            break;
        }
        c_lo = next_lo;
        c_hi = next_hi;
    }
    let bimodal = if c_lo <= 0.0 {
        c_hi > 0.0
    } else {
        c_hi / c_lo >= ratio_threshold
    };
    if !bimodal {
        return whole_low;
    }
    let mid = (c_lo + c_hi) / 2.0;
    let mut segments: Vec<ModeSegment> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let mode = if v <= mid { Mode::Low } else { Mode::High };
        let bin_start = series.start + i as f64 * series.window;
        let bin_end = series.start + (i + 1) as f64 * series.window;
        match segments.last_mut() {
            Some(last) if last.mode == mode => last.end = bin_end,
            _ => segments.push(ModeSegment {
                start: bin_start,
                end: bin_end,
                mode,
            }),
        }
    }
    absorb_short_segments(&mut segments, dwell);
    segments
}

/// Repeatedly flips the shortest below-dwell segment to its neighbors' mode
/// and merges, until every remaining segment is at least `dwell` long or only
/// one segment is left. Each flip strictly reduces the segment count, so this
/// terminates.
fn absorb_short_segments(segments: &mut Vec<ModeSegment>, dwell: f64) {
    while segments.len() > 1 {
        let mut shortest: Option<usize> = None;
        for (i, seg) in segments.iter().enumerate() {
            if seg.duration() < dwell {
                let better = match shortest {
                    None => true,
                    Some(j) => seg.duration() < segments[j].duration(),
                };
                if better {
                    shortest = Some(i);
                }
            }
        }
        let Some(i) = shortest else { break };
        segments[i].mode = match segments[i].mode {
            Mode::Low => Mode::High,
            Mode::High => Mode::Low,
        };
        let mut merged: Vec<ModeSegment> = Vec::with_capacity(segments.len());
        for seg in segments.drain(..) {
            match merged.last_mut() {
                Some(last) if last.mode == seg.mode => last.end = seg.end,
                _ => merged.push(seg),
            }
        }
        *segments = merged;
    }
}

/// Renders rate series as long-format CSV: `stream_id,t,send_Bps,recv_Bps`,
/// one row per bin, `t` at the bin center.
pub fn rate_csv<'a, I>(entries: I) -> String
where
    I: IntoIterator<Item = (&'a crate::model::StreamKey, &'a RateSeries)>,
{
    let mut out = String::from("stream_id,t,send_Bps,recv_Bps\n");
    for (key, series) in entries {
        for i in 0..series.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                key,
                series.bin_center(i),
                series.send_rate[i],
                series.recv_rate[i]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, PacketRecord, StreamKey, Transport};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn packet(ts_micros: u64, direction: Direction, wire_len: u32) -> PacketRecord {
        PacketRecord {
            ts_micros,
            direction,
            local_ip: "10.0.0.2".parse().unwrap(),
            remote_ip: "52.1.1.1".parse().unwrap(),
            local_port: 40000,
            remote_port: 443,
            transport: Transport::Tcp,
            wire_len,
            payload_len: 0,
        }
    }

    fn stream_of(packets: Vec<PacketRecord>) -> Stream {
        Stream {
            key: StreamKey {
                remote_ip: "52.1.1.1".parse().unwrap(),
                remote_port: 443,
                local_port: 40000,
                transport: Transport::Tcp,
            },
            packets,
            label: None,
        }
    }

    fn series_of(values: &[f64]) -> RateSeries {
        RateSeries {
            start: 0.0,
            window: 1.0,
            send_rate: values.to_vec(),
            recv_rate: vec![0.0; values.len()],
        }
    }

    #[test]
    fn three_packets_in_one_bin() {
        let stream = stream_of(vec![
            packet(0, Direction::Outbound, 100),
            packet(400_000, Direction::Outbound, 100),
            packet(900_000, Direction::Outbound, 100),
        ]);
        let series = compute_rate_series(&stream, 1.0, None);
        assert_eq!(series.send_rate, [300.0]);
        assert_eq!(series.recv_rate, [0.0]);
        assert_eq!(series.start, 0.0);
    }

    #[test]
    fn empty_stream_with_span_yields_zero_bins() {
        let series = compute_rate_series(&stream_of(Vec::new()), 1.0, Some((0.0, 10.0)));
        assert_eq!(series.len(), 10);
        assert!(series.send_rate.iter().all(|&r| r == 0.0));
        assert!(series.recv_rate.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn empty_stream_without_span_is_empty() {
        let series = compute_rate_series(&stream_of(Vec::new()), 1.0, None);
        assert!(series.is_empty());
    }

    #[test]
    fn binning_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let packets: Vec<PacketRecord> = (0..50)
            .map(|_| {
                let dir = if rng.gen_bool(0.5) {
                    Direction::Outbound
                } else {
                    Direction::Inbound
                };
                packet(rng.gen_range(0..20_000_000), dir, rng.gen_range(40..1500))
            })
            .collect();
        let mut stream = stream_of(packets);
        stream.packets.sort_by_key(|p| p.ts_micros);
        let window = 0.5;
        let series = compute_rate_series(&stream, window, None);
        let window_us = 500_000u64;
        let start_us = stream.packets.first().unwrap().ts_micros;
        for i in 0..series.len() {
            let lo = start_us + i as u64 * window_us;
            let hi = lo + window_us;
            let mut send = 0u64;
            let mut recv = 0u64;
            for p in &stream.packets {
                if p.ts_micros >= lo && p.ts_micros < hi {
                    match p.direction {
                        Direction::Outbound => send += u64::from(p.wire_len),
                        Direction::Inbound => recv += u64::from(p.wire_len),
                        Direction::Unknown => {}
                    }
                }
            }
            assert_eq!(series.send_rate[i], send as f64 / 0.5, "send bin {i}");
            assert_eq!(series.recv_rate[i], recv as f64 / 0.5, "recv bin {i}");
        }
        let last = stream.packets.last().unwrap().ts_micros;
        assert_eq!(series.len() as u64, (last - start_us) / window_us + 1);
    }

    #[test]
    fn rates_conserve_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let packets: Vec<PacketRecord> = (0..200)
            .map(|_| {
                packet(
                    rng.gen_range(0..60_000_000),
                    Direction::Outbound,
                    rng.gen_range(40..1500),
                )
            })
            .collect();
        let total: u64 = packets.iter().map(|p| u64::from(p.wire_len)).sum();
        let series = compute_rate_series(&stream_of(packets), 2.5, Some((0.0, 60.0)));
        let recovered: f64 = series.send_rate.iter().map(|r| r * series.window).sum();
        assert!((recovered - total as f64).abs() < 1e-6 * total as f64);
    }

    #[test]
    fn explicit_span_drops_outside_packets() {
        let stream = stream_of(vec![
            packet(500_000, Direction::Outbound, 100),
            packet(5_500_000, Direction::Outbound, 100),
            packet(9_999_999, Direction::Outbound, 100),
        ]);
        let series = compute_rate_series(&stream, 1.0, Some((1.0, 6.0)));
        assert_eq!(series.len(), 5);
        let total: f64 = series.send_rate.iter().sum();
        assert_eq!(total, 100.0);
        assert_eq!(series.send_rate[4], 100.0);
    }

    #[test]
    fn unknown_direction_counts_toward_neither_rate() {
        let stream = stream_of(vec![packet(0, Direction::Unknown, 999)]);
        let series = compute_rate_series(&stream, 1.0, None);
        assert_eq!(series.send_rate, [0.0]);
        assert_eq!(series.recv_rate, [0.0]);
    }

    #[test]
    fn smoothing_identity_cases() {
        let series = series_of(&[5.0, 1.0, 9.0, 2.0]);
        assert_eq!(smooth(&series, 0), series);
        let constant = series_of(&[100.0; 8]);
        assert_eq!(smooth(&constant, 3), constant);
    }

    #[test]
    fn smoothing_truncates_at_edges() {
        let series = series_of(&[0.0, 3.0, 0.0]);
        assert_eq!(smooth(&series, 1).send_rate, [1.5, 1.0, 1.5]);
    }

    #[test]
    fn baseline_hand_cases() {
        let constant = series_of(&[100.0; 5]);
        assert_eq!(baseline(&constant, RateDirection::Send).unwrap(), (100.0, 0.0));
        let ladder = series_of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(baseline(&ladder, RateDirection::Send).unwrap(), (3.0, 1.0));
        assert!(matches!(
            baseline(&series_of(&[]), RateDirection::Send),
            Err(RateError::EmptySeries)
        ));
    }

    #[test]
    fn baseline_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..5000.0)).collect();
        let series = series_of(&values);
        let (median, mad) = baseline(&series, RateDirection::Send).unwrap();

        let pick = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        };
        let expect_median = pick(values.clone());
        let expect_mad = pick(values.iter().map(|v| (v - expect_median).abs()).collect());
        assert_eq!(median, expect_median);
        assert_eq!(mad, expect_mad);
    }

    #[test]
    fn constant_series_has_no_spikes() {
        let series = series_of(&[500.0; 60]);
        let events = detect_spikes(&series, RateDirection::Send, &SpikeConfig::default());
        assert!(events.is_empty());
    }

    #[test]
    fn single_spike_is_found_at_its_bin() {
        let mut values = vec![1.0; 120];
        values[40] = 10_000.0;
        let series = series_of(&values);
        let config = SpikeConfig {
            k: 5.0,
            floor: 100.0,
            min_separation: 10.0,
        };
        let events = detect_spikes(&series, RateDirection::Send, &config);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].time, 40.5);
        assert_eq!(events[0].peak_rate, 10_000.0);
        assert_eq!(events[0].magnitude, 10_000.0);
        assert_eq!(events[0].kind, EventKind::Spike);

        let sorted = {
            let mut v = values.clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        let med = (sorted[59] + sorted[60]) / 2.0;
        let mad = {
            let mut d: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (d[59] + d[60]) / 2.0
        };
        let threshold = (med + config.k * mad).max(config.floor);
        let above: Vec<usize> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > threshold)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(above, [40]);
    }

    #[test]
    fn nearby_spikes_merge_to_the_higher_peak() {
        let mut values = vec![1.0; 60];
        values[20] = 5_000.0;
        values[23] = 8_000.0;
        let series = series_of(&values);
        let config = SpikeConfig {
            k: 5.0,
            floor: 100.0,
            min_separation: 10.0,
        };
        let events = detect_spikes(&series, RateDirection::Send, &config);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].time, 23.5);
        assert_eq!(events[0].peak_rate, 8_000.0);

        let tight = SpikeConfig {
            min_separation: 1.0,
            ..config
        };
        let events = detect_spikes(&series, RateDirection::Send, &tight);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].time, 20.5);
        assert_eq!(events[1].time, 23.5);

        let spiking = [20usize, 23];
        let mut clusters = 1;
        for pair in spiking.windows(2) {
            if (pair[1] - pair[0]) as f64 * 1.0 > 10.0 && pair[1] != pair[0] + 1 {
                clusters += 1;
            }
        }
        assert_eq!(clusters, 1);
    }

    #[test]
    fn adjacent_spiking_bins_are_one_event() {
        let mut values = vec![1.0; 40];
        values[10] = 4_000.0;
        values[11] = 6_000.0;
        values[12] = 3_000.0;
        let series = series_of(&values);
        let config = SpikeConfig {
            k: 5.0,
            floor: 100.0,
            min_separation: 0.0,
        };
        let events = detect_spikes(&series, RateDirection::Send, &config);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].time, 11.5);
    }

    #[test]
    fn detection_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut values: Vec<f64> = (0..600).map(|_| rng.gen_range(10.0..30.0)).collect();
        for i in [100usize, 300, 502] {
            values[i] = 9_000.0;
        }
        let config = SpikeConfig {
            k: 5.0,
            floor: 200.0,
            min_separation: 30.0,
        };
        let base = detect_spikes(&series_of(&values), RateDirection::Send, &config);
        let scaled_values: Vec<f64> = values.iter().map(|v| v * 1000.0).collect();
        let scaled_config = SpikeConfig {
            floor: config.floor * 1000.0,
            ..config
        };
        let scaled = detect_spikes(&series_of(&scaled_values), RateDirection::Send, &scaled_config);
        assert_eq!(base.len(), 3);
        assert_eq!(base.len(), scaled.len());
        for (a, b) in base.iter().zip(&scaled) {
            assert_eq!(a.time, b.time);
        }
    }

    #[test]
    fn smoothed_detection_reports_raw_peaks() {
        let mut values = vec![50.0; 200];
        for (offset, v) in [900.0, 1500.0, 1200.0, 1400.0, 800.0].iter().enumerate() {
            values[80 + offset] = *v;
        }
        let raw = series_of(&values);
        let events =
            detect_spikes_smoothed(&raw, RateDirection::Send, 2, &SpikeConfig::default());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].time, 81.5);
        assert_eq!(events[0].peak_rate, 1500.0);
        assert_eq!(events[0].magnitude, 1500.0 / 50.0);
    }

    #[test]
    fn event_times_stay_inside_the_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..25 {
            let n = rng.gen_range(2..300);
            let mut values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            for _ in 0..rng.gen_range(0..4) {
                let i = rng.gen_range(0..n);
                values[i] = rng.gen_range(5_000.0..50_000.0);
            }
            let series = RateSeries {
                start: 1_474_411_200.0,
                window: 1.0,
                send_rate: values.clone(),
                recv_rate: values,
            };
            for direction in [RateDirection::Send, RateDirection::Recv, RateDirection::Either] {
                for event in detect_spikes(&series, direction, &SpikeConfig::default()) {
                    assert!(event.time >= series.start);
                    assert!(event.time <= series.start + series.len() as f64 * series.window);
                    assert!(event.peak_rate >= 0.0);
                    assert!(event.magnitude >= 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_series_is_single_low() {
        let series = series_of(&[777.0; 90]);
        let segments = classify_bimodal(&series, RateDirection::Send, 10.0, 30.0);
        assert_eq!(
            segments,
            [ModeSegment {
                start: 0.0,
                end: 90.0,
                mode: Mode::Low
            }]
        );
    }

    #[test]
    fn alternating_blocks_are_segmented_on_their_boundaries() {
        let mut values = Vec::new();
        for block in 0..10 {
            let rate = if block % 2 == 0 { 1_000_000.0 } else { 1_000.0 };
            values.extend(std::iter::repeat(rate).take(120));
        }
        let series = series_of(&values);
        let segments = classify_bimodal(&series, RateDirection::Send, 10.0, 30.0);
        assert_eq!(segments.len(), 10);
        for (i, segment) in segments.iter().enumerate() {
            assert_eq!(segment.start, i as f64 * 120.0);
            assert_eq!(segment.end, (i as f64 + 1.0) * 120.0);
            let expected = if i % 2 == 0 { Mode::High } else { Mode::Low };
            assert_eq!(segment.mode, expected);
        }
    }

    #[test]
    fn short_dropout_is_absorbed() {
        let mut values = vec![1_000_000.0; 300];
        for v in values.iter_mut().skip(150).take(5) {
            *v = 1_000.0;
        }
        let series = series_of(&values);
        let segments = classify_bimodal(&series, RateDirection::Send, 10.0, 30.0);
        assert_eq!(
            segments,
            [ModeSegment {
                start: 0.0,
                end: 300.0,
                mode: Mode::High
            }]
        );
    }

    #[test]
    fn short_bursts_are_absorbed_into_low() {
        let mut values = vec![50.0; 1200];
        for burst_start in [120usize, 240, 360, 480] {
            for v in values.iter_mut().skip(burst_start).take(12) {
                *v = 1_500.0;
            }
        }
        let series = series_of(&values);
        let segments = classify_bimodal(&series, RateDirection::Send, 10.0, 30.0);
        assert_eq!(segments.len(), 1);
        assert_eq!(segments[0].mode, Mode::Low);
    }

    #[test]
    fn segments_tile_the_span_without_adjacent_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let n = rng.gen_range(1..400);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(100_000.0..1_000_000.0)
                    } else {
                        rng.gen_range(0.0..500.0)
                    }
                })
                .collect();
            let series = series_of(&values);
            let dwell = rng.gen_range(0.0..40.0);
            let segments = classify_bimodal(&series, RateDirection::Send, 10.0, dwell);
            assert!(!segments.is_empty());
            assert_eq!(segments.first().unwrap().start, series.start);
            assert_eq!(
                segments.last().unwrap().end,
                series.start + n as f64 * series.window
            );
            for pair in segments.windows(2) {
                assert_eq!(pair[0].end, pair[1].start);
                assert_ne!(pair[0].mode, pair[1].mode);
            }
        }
    }

    #[test]
    fn csv_layout_is_one_row_per_bin() {
        let key = StreamKey {
            remote_ip: "52.1.1.1".parse().unwrap(),
            remote_port: 443,
            local_port: 40000,
            transport: Transport::Tcp,
        };
        let series = RateSeries {
            start: 0.0,
            window: 1.0,
            send_rate: vec![300.0, 0.0],
            recv_rate: vec![150.0, 75.5],
        };
        let csv = rate_csv([(&key, &series)]);
        let expected = "stream_id,t,send_Bps,recv_Bps\n\
                        52.1.1.1:443/40000/tcp,0.5,300,150\n\
                        52.1.1.1:443/40000/tcp,1.5,0,75.5\n";
        assert_eq!(csv, expected);
    }
}
