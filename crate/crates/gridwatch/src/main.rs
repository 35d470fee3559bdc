//! Command-line front door: rule compilation, capture inspection, scenario
//! generation and alert scoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridwatch::alert::{read_stream, write_log, write_stream, AlertSink, ClockMode};
use gridwatch::engine::EngineOptions;
use gridwatch::harness::{
    generate_demo_capture, generate_scenario, replay_sharded, score, ConfusionMatrix,
    LabeledCapture, PacketLabel, ReplayStats, ScenarioId, ScenarioParams,
};
use gridwatch::model::load_model;
use gridwatch::rules::{export_rules, generate_rules, import_rules, RuleConfig};
use gridwatch::InspectionReport;

#[derive(Parser)]
#[command(
    name = "gridwatch",
    version,
    about = "Whitelist-based traffic inspection for IEC 60870-5-104 process networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile an infrastructure model and a rule configuration into a
    /// rule document.
    Rules {
        /// Infrastructure model (JSON).
        #[arg(long)]
        gim: PathBuf,
        /// Rule configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output rule document.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Replay a capture through the inspection engine and write the alert
    /// log. Alerts are data, not failures: the exit code stays 0.
    Inspect {
        /// Compiled rule document.
        #[arg(long)]
        rules: PathBuf,
        /// Capture to inspect (pcap, Ethernet link type).
        #[arg(long)]
        pcap: PathBuf,
        /// Alert log output path.
        #[arg(long)]
        log: PathBuf,
        /// Machine-readable alert stream (default: <log>.jsonl).
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Start automata in STARTED and adopt observed counters, for
        /// captures that begin mid-connection.
        #[arg(long)]
        assume_started: bool,
        /// Alert timestamp source: `wall` or `fixed:DD.MM.YYYY HH:MM:SS`.
        #[arg(long, default_value = "wall")]
        clock: String,
        /// Shard connections across N worker threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Generate a labeled scenario capture (<prefix>.pcap plus
    /// <prefix>.labels.jsonl).
    Scenario {
        /// One of: s1, s2a, s2b1, s2b2, demo.
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Infrastructure model the traffic is derived from.
        #[arg(long)]
        gim: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
        /// Background packet count.
        #[arg(long, default_value_t = 200)]
        packets: usize,
    },
    /// Score an alert stream against ground-truth labels and print the
    /// confusion matrix.
    Score {
        /// Alert stream written by `inspect`.
        #[arg(long)]
        stream: PathBuf,
        /// Label sidecar written by `scenario`.
        #[arg(long)]
        labels: PathBuf,
    },
}

enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Internal(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{context}: {e}"))
}

fn read(path: &PathBuf) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &PathBuf, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Rules { gim, config, out } => cmd_rules(gim, config, out),
        Command::Inspect {
            rules,
            pcap,
            log,
            stream,
            assume_started,
            clock,
            workers,
        } => cmd_inspect(rules, pcap, log, stream, assume_started, clock, workers),
        Command::Scenario {
            id,
            seed,
            gim,
            out_prefix,
            packets,
        } => cmd_scenario(id, seed, gim, out_prefix, packets),
        Command::Score { stream, labels } => cmd_score(stream, labels),
    }
}

fn cmd_rules(gim_path: PathBuf, config_path: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let gim = load_model(&read(&gim_path)?).map_err(input("invalid infrastructure model"))?;
    let config =
        RuleConfig::load(&read(&config_path)?).map_err(input("invalid rule configuration"))?;
    let sb = generate_rules(&gim, &config).map_err(input("rule generation failed"))?;
    write(&out, export_rules(&sb).as_bytes())?;
    println!("rules_checksum={}", sb.checksum);
    println!(
        "endpoints={} channels={} datapoints={}",
        sb.endpoints.len(),
        sb.channels.len(),
        sb.datapoints.len()
    );
    Ok(())
}

fn cmd_inspect(
    rules_path: PathBuf,
    pcap_path: PathBuf,
    log_path: PathBuf,
    stream_path: Option<PathBuf>,
    assume_started: bool,
    clock: String,
    workers: usize,
) -> Result<(), CliError> {
    let rules_doc = String::from_utf8(read(&rules_path)?)
        .map_err(|e| CliError::Input(format!("rule document is not UTF-8: {e}")))?;
    let sb = import_rules(&rules_doc).map_err(input("invalid rule document"))?;
    let packets =
        gridwatch::pcap::read_pcap(&read(&pcap_path)?).map_err(input("invalid capture"))?;
    let clock = ClockMode::parse(&clock).map_err(CliError::Input)?;

    let capture = LabeledCapture {
        labels: Vec::new(), // inspection needs no ground truth
        packets,
    };
    let mut sink = AlertSink::new(clock);
    let options = EngineOptions { assume_started };
    let (reports, stats) = replay_sharded(&sb, options, &mut sink, &capture, workers.max(1));

    let mut log_file = fs::File::create(&log_path)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", log_path.display())))?;
    write_log(sink.alerts(), &mut log_file).map_err(|e| CliError::Internal(e.to_string()))?;

    let stream_path = stream_path.unwrap_or_else(|| {
        let mut p = log_path.into_os_string();
        p.push(".jsonl");
        PathBuf::from(p)
    });
    let mut stream_file = fs::File::create(&stream_path)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", stream_path.display())))?;
    write_stream(sink.records(), &mut stream_file)
        .map_err(|e| CliError::Internal(e.to_string()))?;

    print_run_report(&reports, &stats, sink.records().len(), &sb.checksum);
    Ok(())
}

fn print_run_report(
    reports: &[InspectionReport],
    stats: &ReplayStats,
    alerts: usize,
    checksum: &str,
) {
    println!("packets={}", reports.len());
    println!("alerts_total={alerts}");

    let mut by_type: BTreeMap<&str, u64> = BTreeMap::new();
    for report in reports {
        for v in &report.violations {
            *by_type.entry(v.alert_type.as_str()).or_default() += 1;
        }
    }
    for (t, n) in by_type {
        println!("alert_count.{t}={n}");
    }

    let mut valid_us = Vec::new();
    let mut invalid_us = Vec::new();
    for (report, us) in reports.iter().zip(&stats.per_packet_us) {
        if report.violations.is_empty() {
            valid_us.push(*us as f64 / 1_000.0);
        } else {
            invalid_us.push(*us as f64 / 1_000.0);
        }
    }
    for (name, series) in [("valid", valid_us), ("invalid", invalid_us)] {
        if series.is_empty() {
            continue;
        }
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        println!("latency.{name}.mean_ms={mean:.4}");
        println!(
            "latency.{name}.p50_ms={:.4}",
            gridwatch::harness::percentile(&series, 0.50)
        );
        println!(
            "latency.{name}.p95_ms={:.4}",
            gridwatch::harness::percentile(&series, 0.95)
        );
    }
    println!("rules_checksum={checksum}");
}

fn cmd_scenario(
    id: String,
    seed: u64,
    gim_path: PathBuf,
    out_prefix: PathBuf,
    packets: usize,
) -> Result<(), CliError> {
    let gim = load_model(&read(&gim_path)?).map_err(input("invalid infrastructure model"))?;
    let capture = if id.eq_ignore_ascii_case("demo") {
        generate_demo_capture(&gim).map_err(input("scenario generation failed"))?
    } else {
        let id: ScenarioId = id.parse().map_err(CliError::Input)?;
        let params = ScenarioParams {
            packets,
            ..ScenarioParams::default()
        };
        generate_scenario(id, seed, &gim, &params).map_err(input("scenario generation failed"))?
    };

    let pcap_path = out_prefix.with_extension("pcap");
    let labels_path = out_prefix.with_extension("labels.jsonl");
    write(&pcap_path, &capture.to_pcap())?;
    write(&labels_path, capture.labels_jsonl().as_bytes())?;
    println!(
        "packets={} malicious={} pcap={} labels={}",
        capture.packets.len(),
        capture.malicious_count(),
        pcap_path.display(),
        labels_path.display()
    );
    Ok(())
}

fn cmd_score(stream_path: PathBuf, labels_path: PathBuf) -> Result<(), CliError> {
    let stream_text = String::from_utf8(read(&stream_path)?)
        .map_err(|e| CliError::Input(format!("alert stream is not UTF-8: {e}")))?;
    let records = read_stream(&stream_text).map_err(input("invalid alert stream"))?;
    let labels_text = String::from_utf8(read(&labels_path)?)
        .map_err(|e| CliError::Input(format!("label file is not UTF-8: {e}")))?;
    let labels: Vec<PacketLabel> =
        LabeledCapture::parse_labels(&labels_text).map_err(input("invalid label file"))?;
    let cm: ConfusionMatrix = score(&records, &labels).map_err(input("scoring failed"))?;
    println!("{cm}");
    Ok(())
}
