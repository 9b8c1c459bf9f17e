//! Passive-observer traffic analysis for smart-home uplinks.
//!
//! A watcher on the WAN side of a home router sees only encrypted packets
//! from a single NAT address — and that is enough to read a household's
//! rhythm. This crate implements the full attack chain and its
//! countermeasures:
//!
//! - [`ingest`]: pcap and JSONL capture readers, the cleartext-DNS side
//!   channel, and direction tagging against a home subnet.
//! - [`flow`]: separating the NAT'd packet soup into per-conversation
//!   streams keyed by remote endpoint and rewritten source port.
//! - [`labeling`]: fingerprinting which device owns each stream from the
//!   DNS names it resolved, with optional reverse-DNS assist.
//! - [`rates`]: send/receive rate series, robust spike detection, and
//!   bimodal (streaming vs. idle) classification.
//! - [`profiles`]: turning per-stream events into human activities — sleep
//!   patterns, camera streaming and motion, switch toggles, assistant use.
//! - [`pipeline`]: the end-to-end analysis assembling all of the above into
//!   one report.
//! - [`simulator`]: scripted synthetic homes with exact ground truth for
//!   closed-loop scoring.
//! - [`defense`]: constant-rate shaping and tunnel aggregation, plus the
//!   before/after evaluation quantifying what each defense buys.
//!
//! ```
//! use hometap::pipeline::{run_pipeline, AnalysisConfig};
//! use hometap::simulator::{generate_trace, scenario_by_name};
//!
//! let scenario = scenario_by_name("switch-toggle").unwrap();
//! let (capture, truth) = generate_trace(&scenario).unwrap();
//! let report = run_pipeline(&capture, &AnalysisConfig::default(), None).unwrap();
//! assert_eq!(report.findings.len(), 1);
//! assert_eq!(report.findings[0].device(), "WeMo Switch");
//! assert_eq!(truth.entries.len(), 10);
//! ```

pub mod defense;
pub mod flow;
pub mod ingest;
pub mod labeling;
pub mod model;
pub mod pipeline;
pub mod profiles;
pub mod rates;
pub mod simulator;

pub use defense::{evaluate_defense, shape_constant_rate, tunnel_aggregate, DefenseReport};
pub use ingest::{load_jsonl, load_pcap, Capture};
pub use model::{Cidr, GroundTruth, Trace};
pub use pipeline::{run_pipeline, ActivityReport, AnalysisConfig};
pub use simulator::{default_scenarios, generate_trace, Scenario};
