//! Command-line frontend: analyze captures, generate synthetic ones, apply
//! traffic-shaping defenses, and score how much a defense actually hides.

use std::error::Error;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use hometap::defense::{ShapeConfig, TunnelConfig};
use hometap::flow::separate_streams;
use hometap::ingest::jsonl::write_jsonl;
use hometap::ingest::pcap::write_pcap;
use hometap::ingest::tag_direction;
use hometap::labeling::{default_fingerprints, load_fingerprints, FingerprintDb};
use hometap::model::{Cidr, NightWindow, RateSeries, StreamKey};
use hometap::pipeline::Finding;
use hometap::rates::{compute_rate_series, rate_csv};
use hometap::simulator::scenario_by_name;
use hometap::{
    default_scenarios, evaluate_defense, generate_trace, load_jsonl, load_pcap, run_pipeline,
    shape_constant_rate, tunnel_aggregate, AnalysisConfig, Capture, GroundTruth, Scenario,
};

/// Passive smart-home traffic analysis from the WAN side of the uplink.
#[derive(Parser)]
#[command(name = "hometap", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Subcommand)]
enum Command {
    /// Run the observer pipeline over a capture and report inferred activity
    Analyze(AnalyzeArgs),
    /// Generate a synthetic capture and its ground truth
    Simulate(SimulateArgs),
    /// Apply a traffic-shaping defense to a capture
    Shape(ShapeArgs),
    /// Compare analysis of a defended capture against the original
    Evaluate(EvaluateArgs),
    /// Validate a fingerprint database and print it back
    Fingerprints(FingerprintsArgs),
}

/// Analysis knobs accepted by every subcommand. Each can also come from a
/// `--config` JSON file with the same names in snake_case; explicit flags
/// win over the file, and anything left unset keeps its built-in default.
#[derive(Args)]
struct Tuning {
    /// Rate bin width in seconds
    #[arg(long, global = true, value_name = "SECONDS")]
    window: Option<f64>,

    /// Deviation multiplier: a bin spikes above median + k * MAD
    #[arg(long, global = true, value_name = "K")]
    spike_k: Option<f64>,

    /// Minimum rate in B/s a bin must exceed to count as spiking
    #[arg(long, global = true, value_name = "BPS")]
    spike_floor: Option<f64>,

    /// Spiking bins closer than this many seconds merge into one event
    #[arg(long, global = true, value_name = "SECONDS")]
    min_separation: Option<f64>,

    /// Cluster-mean ratio above which a stream counts as bimodal
    #[arg(long, global = true, value_name = "RATIO")]
    ratio_threshold: Option<f64>,

    /// Minimum seconds a rate-mode segment must last
    #[arg(long, global = true, value_name = "SECONDS")]
    dwell: Option<f64>,

    /// Clock interval treated as night, e.g. 20:00-12:00
    #[arg(long, global = true, value_name = "HH:MM-HH:MM")]
    night_window: Option<String>,

    /// Simulation seed; overrides the scenario's own
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Trace format when a file's extension doesn't decide it
    #[arg(long, global = true, value_enum)]
    format: Option<TraceFormat>,

    /// JSON file mirroring these flags
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TraceFormat {
    Pcap,
    Jsonl,
}

/// `--config` file contents: every tuning flag, all optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    window: Option<f64>,
    spike_k: Option<f64>,
    spike_floor: Option<f64>,
    min_separation: Option<f64>,
    ratio_threshold: Option<f64>,
    dwell: Option<f64>,
    night_window: Option<String>,
    seed: Option<u64>,
    format: Option<TraceFormat>,
}

/// Flags and config file merged, ready for the subcommands.
struct Settings {
    analysis: AnalysisConfig,
    seed: Option<u64>,
    format: Option<TraceFormat>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Capture to analyze (.pcap or .jsonl)
    #[arg(long, value_name = "FILE")]
    input: PathBuf,

    /// Addresses on the home side of the uplink, e.g. 10.0.0.0/24
    #[arg(long, value_name = "CIDR")]
    home_subnet: Option<Cidr>,

    /// Fingerprint db JSON file, or "default" for the built-in one
    #[arg(long, value_name = "FILE", default_value = "default")]
    fingerprints: String,

    /// Where to write the activity report JSON
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Where to write per-stream rate series as CSV
    #[arg(long, value_name = "FILE")]
    rates: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Name of a built-in scenario
    #[arg(long, conflicts_with = "scenario_file", required_unless_present = "scenario_file")]
    scenario: Option<String>,

    /// JSON file describing a custom scenario
    #[arg(long, value_name = "FILE")]
    scenario_file: Option<PathBuf>,

    /// Where to write the trace (.jsonl or .pcap)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Where to write the ground-truth JSON
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ShapeArgs {
    /// Capture to defend (.pcap or .jsonl)
    #[arg(long, value_name = "FILE")]
    input: PathBuf,

    #[arg(long, value_enum)]
    mode: ShapeMode,

    /// Addresses on the home side of the uplink, e.g. 10.0.0.0/24
    #[arg(long, value_name = "CIDR")]
    home_subnet: Cidr,

    /// Target bytes per second per stream direction (constant-rate mode)
    #[arg(long, value_name = "BPS", default_value_t = 10_000.0)]
    rate: f64,

    /// Largest padding packet the shaper emits (constant-rate mode)
    #[arg(long, value_name = "BYTES", default_value_t = 1400)]
    mtu: u32,

    /// Shape exactly this range as START,END in seconds, padding even where
    /// the capture is silent (constant-rate mode)
    #[arg(long, value_name = "START,END", value_parser = parse_span)]
    span: Option<(f64, f64)>,

    /// Bytes of encapsulation added per packet (tunnel mode)
    #[arg(long, value_name = "BYTES", default_value_t = 40)]
    overhead: u32,

    /// Where to write the defended capture
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Where to write the shaping summary JSON
    #[arg(long, value_name = "FILE")]
    summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ShapeMode {
    /// Pad and delay every stream direction to a fixed byte rate
    ConstantRate,
    /// Collapse all flows into a single encrypted-tunnel flow
    Tunnel,
}

#[derive(Args)]
struct EvaluateArgs {
    /// The undefended capture
    #[arg(long, value_name = "FILE")]
    original: PathBuf,

    /// The defended capture
    #[arg(long, value_name = "FILE")]
    shaped: PathBuf,

    /// Ground-truth JSON, as written by simulate
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,

    /// Addresses on the home side of the uplink, e.g. 10.0.0.0/24
    #[arg(long, value_name = "CIDR")]
    home_subnet: Option<Cidr>,

    /// Fingerprint db JSON file, or "default" for the built-in one
    #[arg(long, value_name = "FILE", default_value = "default")]
    fingerprints: String,

    /// Where to write the comparison JSON (stdout when omitted)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FingerprintsArgs {
    /// Fingerprint db JSON file, or "default" for the built-in one
    #[arg(long, value_name = "FILE", default_value = "default")]
    db: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    let settings = resolve(&cli.tuning)?;
    match cli.command {
        Command::Analyze(args) => cmd_analyze(args, &settings),
        Command::Simulate(args) => cmd_simulate(args, &settings),
        Command::Shape(args) => cmd_shape(args, &settings),
        Command::Evaluate(args) => cmd_evaluate(args, &settings),
        Command::Fingerprints(args) => cmd_fingerprints(args),
    }
}

fn resolve(tuning: &Tuning) -> Result<Settings, Box<dyn Error>> {
    let file: ConfigFile = match &tuning.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| format!("{}: {e}", path.display()))?,
        None => ConfigFile::default(),
    };

    let mut analysis = AnalysisConfig::default();
    if let Some(v) = tuning.window.or(file.window) {
        if !(v.is_finite() && v > 0.0) {
            return Err("window must be a positive number of seconds".into());
        }
        analysis.window = v;
    }
    if let Some(v) = tuning.spike_k.or(file.spike_k) {
        analysis.spike.k = v;
    }
    if let Some(v) = tuning.spike_floor.or(file.spike_floor) {
        analysis.spike.floor = v;
    }
    if let Some(v) = tuning.min_separation.or(file.min_separation) {
        analysis.spike.min_separation = v;
    }
    if let Some(v) = tuning.ratio_threshold.or(file.ratio_threshold) {
        analysis.ratio_threshold = v;
    }
    if let Some(v) = tuning.dwell.or(file.dwell) {
        analysis.dwell = v;
    }
    if let Some(s) = tuning.night_window.as_deref().or(file.night_window.as_deref()) {
        analysis.night_window = s.parse::<NightWindow>()?;
    }

    Ok(Settings {
        analysis,
        seed: tuning.seed.or(file.seed),
        format: tuning.format.or(file.format),
    })
}

fn cmd_analyze(args: AnalyzeArgs, settings: &Settings) -> Result<(), Box<dyn Error>> {
    let capture = read_capture(&args.input, settings.format)?;
    let mut config = settings.analysis.clone();
    config.home_subnet = args.home_subnet;
    config.fingerprints = load_db(&args.fingerprints)?;

    let report = run_pipeline(&capture, &config, None)?;
    for finding in &report.findings {
        emit(&finding_line(finding))?;
    }
    eprintln!(
        "{}: {}, {}, {}",
        args.input.display(),
        count(report.streams.len(), "stream"),
        count(report.findings.len(), "finding"),
        count(report.notes.len(), "note"),
    );

    if let Some(path) = &args.out {
        write_atomic(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    if let Some(path) = &args.rates {
        write_atomic(path, stream_rate_csv(&capture, &config).as_bytes())?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, settings: &Settings) -> Result<(), Box<dyn Error>> {
    let mut scenario: Scenario = match (&args.scenario, &args.scenario_file) {
        (Some(name), _) => scenario_by_name(name).ok_or_else(|| {
            let names: Vec<String> =
                default_scenarios().into_iter().map(|s| s.name).collect();
            format!("unknown scenario {:?}; available: {}", name, names.join(", "))
        })?,
        (None, Some(path)) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| format!("{}: {e}", path.display()))?,
        (None, None) => unreachable!("clap requires --scenario or --scenario-file"),
    };
    if let Some(seed) = settings.seed {
        scenario.seed = seed;
    }

    let (capture, truth) = generate_trace(&scenario)?;
    write_capture(&args.out, settings.format, &capture)?;
    if let Some(path) = &args.truth {
        write_atomic(path, serde_json::to_string_pretty(&truth)?.as_bytes())?;
    }
    eprintln!(
        "{} (seed {}): {}, {}, {}",
        scenario.name,
        scenario.seed,
        count(capture.trace.packets.len(), "packet"),
        count(capture.dns.len(), "dns answer"),
        count(truth.entries.len(), "truth entry"),
    );
    Ok(())
}

fn cmd_shape(args: ShapeArgs, settings: &Settings) -> Result<(), Box<dyn Error>> {
    let capture = read_capture(&args.input, settings.format)?;
    let capture = Capture {
        trace: tag_direction(capture.trace, args.home_subnet),
        ..capture
    };

    let summary_json = match args.mode {
        ShapeMode::ConstantRate => {
            let config = ShapeConfig {
                target_rate: args.rate,
                mtu: args.mtu,
                span: args.span,
                ..ShapeConfig::default()
            };
            let (shaped, summary) = shape_constant_rate(&capture, &config)?;
            write_capture(&args.out, settings.format, &shaped)?;
            eprintln!(
                "shaped to {} B/s: {} added ({} B), {} delayed (max {:.1}s)",
                args.rate,
                count(summary.padding_packets as usize, "padding packet"),
                summary.padding_bytes,
                count(summary.delayed_packets as usize, "packet"),
                summary.max_delay,
            );
            serde_json::to_string_pretty(&summary)?
        }
        ShapeMode::Tunnel => {
            let config = TunnelConfig {
                overhead: args.overhead,
                ..TunnelConfig::default()
            };
            let (shaped, summary) = tunnel_aggregate(&capture, &config)?;
            write_capture(&args.out, settings.format, &shaped)?;
            eprintln!(
                "tunneled {} (+{} B encapsulation)",
                count(summary.packets as usize, "packet"),
                summary.overhead_bytes,
            );
            serde_json::to_string_pretty(&summary)?
        }
    };

    if let Some(path) = &args.summary {
        write_atomic(path, summary_json.as_bytes())?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, settings: &Settings) -> Result<(), Box<dyn Error>> {
    let original = read_capture(&args.original, settings.format)?;
    let shaped = read_capture(&args.shaped, settings.format)?;
    let truth: GroundTruth = serde_json::from_str(&read_text(&args.truth)?)
        .map_err(|e| format!("{}: {e}", args.truth.display()))?;

    let mut config = settings.analysis.clone();
    config.home_subnet = args.home_subnet;
    config.fingerprints = load_db(&args.fingerprints)?;

    let report = evaluate_defense(&original, &shaped, &truth, &config)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => emit(&json)?,
    }
    Ok(())
}

fn cmd_fingerprints(args: FingerprintsArgs) -> Result<(), Box<dyn Error>> {
    let db = load_db(&args.db)?;
    emit(&serde_json::to_string_pretty(&db)?)?;
    eprintln!("{}, all valid", count(db.entries.len(), "device entry"));
    Ok(())
}

/// One human-readable line per inferred activity.
fn finding_line(finding: &Finding) -> String {
    match finding {
        Finding::Sleep { device, stream, report } => format!(
            "{device} ({stream}): bedtime {}, wake {}, {}",
            clock(report.bedtime),
            clock(report.wake_time),
            count(report.interruptions.len(), "interruption"),
        ),
        Finding::Camera { device, stream, report } => format!(
            "{device} ({stream}): {}, {}",
            count(report.streaming_intervals.len(), "streaming interval"),
            count(report.motion_events.len(), "motion event"),
        ),
        Finding::Toggle { device, stream, report } => format!(
            "{device} ({stream}): {} at t={} s",
            count(report.toggle_times.len(), "toggle"),
            report
                .toggle_times
                .iter()
                .map(|t| format!("{t:.0}"))
                .collect::<Vec<_>>()
                .join(", "),
        ),
        Finding::Interaction { device, stream, report } => format!(
            "{device} ({stream}): {}",
            count(report.interaction_times.len(), "voice interaction"),
        ),
    }
}

/// Seconds-of-day as HH:MM:SS, for times where the clock matters.
fn clock(t: f64) -> String {
    let sod = t.rem_euclid(86_400.0) as u64;
    format!("{:02}:{:02}:{:02}", sod / 3600, (sod % 3600) / 60, sod % 60)
}

/// Prints one line to stdout; a consumer that closed the pipe early is not
/// an error.
fn emit(line: &str) -> Result<(), Box<dyn Error>> {
    match writeln!(io::stdout(), "{line}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn count(n: usize, word: &str) -> String {
    if n == 1 {
        format!("1 {word}")
    } else if let Some(stem) = word.strip_suffix('y') {
        format!("{n} {stem}ies")
    } else {
        format!("{n} {word}s")
    }
}

/// Renders every stream's rate series, tagged the same way the analysis was.
fn stream_rate_csv(capture: &Capture, config: &AnalysisConfig) -> String {
    let mut trace = capture.trace.clone();
    if let Some(subnet) = config.home_subnet {
        trace = tag_direction(trace, subnet);
    }
    let separation = separate_streams(&trace);
    let series: Vec<(StreamKey, RateSeries)> = separation
        .streams
        .iter()
        .map(|s| (s.key, compute_rate_series(s, config.window, None)))
        .collect();
    rate_csv(series.iter().map(|(key, s)| (key, s)))
}

fn load_db(arg: &str) -> Result<FingerprintDb, Box<dyn Error>> {
    if arg == "default" {
        return Ok(default_fingerprints().clone());
    }
    let path = Path::new(arg);
    Ok(load_fingerprints(&read_text(path)?)
        .map_err(|e| format!("{}: {e}", path.display()))?)
}

fn parse_span(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| "expected START,END in seconds".to_string())?;
    let start: f64 = a.trim().parse().map_err(|_| format!("bad span start {a:?}"))?;
    let end: f64 = b.trim().parse().map_err(|_| format!("bad span end {b:?}"))?;
    Ok((start, end))
}

fn read_capture(path: &Path, format: Option<TraceFormat>) -> Result<Capture, Box<dyn Error>> {
    let format = match format {
        Some(f) => f,
        None => format_of(path)?,
    };
    let capture = match format {
        TraceFormat::Pcap => {
            let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
            load_pcap(&bytes).map_err(|e| format!("{}: {e}", path.display()))?
        }
        TraceFormat::Jsonl => load_jsonl(&read_text(path)?)
            .map_err(|e| format!("{}: {e}", path.display()))?,
    };
    Ok(capture)
}

fn write_capture(
    path: &Path,
    format: Option<TraceFormat>,
    capture: &Capture,
) -> Result<(), Box<dyn Error>> {
    let format = match format {
        Some(f) => f,
        None => format_of(path)?,
    };
    let bytes = match format {
        TraceFormat::Pcap => write_pcap(&capture.trace, &capture.dns)?,
        TraceFormat::Jsonl => write_jsonl(&capture.trace, &capture.dns)?.into_bytes(),
    };
    write_atomic(path, &bytes)
}

fn format_of(path: &Path) -> Result<TraceFormat, Box<dyn Error>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pcap") | Some("cap") => Ok(TraceFormat::Pcap),
        Some("jsonl") => Ok(TraceFormat::Jsonl),
        _ => Err(format!(
            "cannot tell the trace format of {}; pass --format",
            path.display()
        )
        .into()),
    }
}

fn read_text(path: &Path) -> Result<String, Box<dyn Error>> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

/// Writes next to the destination and renames over it, so a crash mid-write
/// never leaves a half-finished file under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Box<dyn Error>> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| format!("{}: {e}", tmp.display()))?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}
