//! `smartbus`: run simulations, replay server logs, serve, run nodes, and
//! print energy and metrics reports.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 I/O, 3 validation, 64 usage.

use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use smartbus_core::energy::{self, Bound, EnergyReport};
use smartbus_core::metrics::{self, MetricsReport, FIELD_MATRIX, FIELD_REFERENCE};
use smartbus_core::netproto::RetransmitPolicy;
use smartbus_core::perception;
use smartbus_core::server::{Credentials, Store, StoreError};
use smartbus_core::simkernel::{self, RunOptions, ScenarioConfig, SimError};
use smartbus_service::busnode::{run_bus_node, BusNodeOptions};
use smartbus_service::server::{start, ServerOptions};
use smartbus_service::stopnode::{run_stop_node, StopNodeOptions};
use smartbus_service::ServiceError;

#[derive(Debug, Error)]
enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Invalid(_) => 3,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(source) | SimError::Store(StoreError::Io(source)) => CliError::Io {
                path: PathBuf::from("server log"),
                source,
            },
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Sim(e) => e.into(),
            ServiceError::Store(e @ (StoreError::Corrupt { .. } | StoreError::Rejected { .. })) => {
                CliError::Invalid(e.to_string())
            }
            ServiceError::Config(msg) => CliError::Invalid(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "smartbus", version, about = "Smart bus transit simulator and services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its event log.
    Simulate(SimulateArgs),
    /// Rebuild a server from its envelope log and print every query answer.
    Replay(ReplayArgs),
    /// Run the data server: HTTP ingestion and queries plus the stop broadcast socket.
    Serve(ServeArgs),
    /// Replay one simulated bus's traffic against a live server.
    Busnode(BusnodeArgs),
    /// Run a stop display against a live server.
    Stopnode(StopnodeArgs),
    /// Size the stop's solar panel and battery from a component profile.
    EnergyReport(EnergyArgs),
    /// Aggregate a per-frame tally log into a detection performance summary.
    MetricsReport(MetricsArgs),
    /// Check a scenario file and print every problem found.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Event log output (NDJSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-frame perception tally log here.
    #[arg(long)]
    tally_log: Option<PathBuf>,
    /// Persist the simulated server's envelope log here.
    #[arg(long, env = "SMARTBUS_SERVER_LOG")]
    server_log: Option<PathBuf>,
    /// Override the loss probability of every link.
    #[arg(long)]
    loss: Option<f64>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Server envelope log (NDJSON).
    #[arg(long, env = "SMARTBUS_SERVER_LOG")]
    log: PathBuf,
    /// Scenario supplying the route and stop topology.
    #[arg(long)]
    scenario: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Scenario supplying the route and stop topology.
    #[arg(long)]
    scenario: PathBuf,
    /// HTTP listen address.
    #[arg(long, env = "SMARTBUS_HTTP_ADDR", default_value = "127.0.0.1:8080")]
    http_addr: SocketAddr,
    /// Stop broadcast socket listen address.
    #[arg(long, env = "SMARTBUS_BROADCAST_ADDR", default_value = "127.0.0.1:8081")]
    broadcast_addr: SocketAddr,
    /// Append-only envelope log, replayed on start.
    #[arg(long, env = "SMARTBUS_SERVER_LOG", default_value = "smartbus-server.log")]
    log: PathBuf,
    /// `role:secret` lines for the report endpoint.
    #[arg(long, env = "SMARTBUS_CREDENTIALS")]
    credentials: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BusnodeArgs {
    /// Scenario the bus's traffic is taken from.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    bus: String,
    /// Server base URL.
    #[arg(long, env = "SMARTBUS_SERVER_URL", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Scenario seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    speedup: f64,
}

#[derive(Debug, Args)]
struct StopnodeArgs {
    /// Broadcast socket address of the server.
    #[arg(long, env = "SMARTBUS_BROADCAST_ADDR", default_value = "127.0.0.1:8081")]
    server: String,
    #[arg(long)]
    stop: String,
    /// Display clock offset in seconds.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    skew: i64,
    /// Hourly state-of-charge trace (`hour,soc` CSV); always powered when omitted.
    #[arg(long)]
    soc_trace: Option<PathBuf>,
    /// Wall-clock milliseconds per trace hour.
    #[arg(long, default_value_t = 3_600_000)]
    hour_ms: u64,
    /// Milliseconds between rendered frames.
    #[arg(long, default_value_t = 1_000)]
    frame_ms: u64,
    /// Exit after this many frames.
    #[arg(long)]
    frames: Option<u64>,
}

#[derive(Debug, Args)]
struct EnergyArgs {
    /// Component CSV `name,power_min_w,power_max_w,daily_usage_h`; the bundled
    /// display profile when omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value = "max", value_parser = ["min", "max"])]
    bound: String,
    #[arg(long, default_value_t = 5.0)]
    sun_hours: f64,
    /// Battery voltage.
    #[arg(long, default_value_t = 12.0)]
    voltage: f64,
    /// Daily hours of every LED row, overriding the profile.
    #[arg(long)]
    led_hours: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Tally log with `frame_id,tp,fp,fn,tn,buzzer,led` lines.
    #[arg(long, required_unless_present = "field_matrix", conflicts_with = "field_matrix")]
    tally_log: Option<PathBuf>,
    /// Report the released field-trial matrix instead of a log.
    #[arg(long)]
    field_matrix: bool,
    /// Skip the comparison against the published field figures.
    #[arg(long)]
    no_reference: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    scenario: PathBuf,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn load(path: &Path) -> Result<ScenarioConfig, CliError> {
    simkernel::load_scenario(&read(path)?).map_err(|e| CliError::Invalid(format!("{}:\n{e}", path.display())))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = load(&args.scenario)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(loss) = args.loss {
        cfg.channels.bus.loss_probability = loss;
        cfg.channels.stop.loss_probability = loss;
    }
    let result = simkernel::run_with(
        &cfg,
        &RunOptions {
            record_events: true,
            server_log: args.server_log,
        },
    )?;
    let log = result.events.to_ndjson();
    match &args.out {
        Some(path) => write(path, &log)?,
        None => io::stdout().write_all(log.as_bytes()).map_err(|source| CliError::Io {
            path: "stdout".into(),
            source,
        })?,
    }
    if let Some(path) = &args.tally_log {
        write(path, result.tally_log())?;
    }
    eprintln!("{}", result.stats);
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let cfg = load(&args.scenario)?;
    let file = fs::File::open(&args.log).map_err(|source| CliError::Io {
        path: args.log.clone(),
        source,
    })?;
    let len = file.metadata().map(|m| m.len()).unwrap_or(0);
    let mut store = Store::new(cfg.network());
    let good = store.replay(file).map_err(|e| match e {
        StoreError::Io(source) => CliError::Io {
            path: args.log.clone(),
            source,
        },
        other => CliError::Invalid(format!("{}: {other}", args.log.display())),
    })?;
    if good < len {
        eprintln!(
            "{}: ignored a torn final record ({} bytes)",
            args.log.display(),
            len - good
        );
    }
    let snapshot = serde_json::to_string_pretty(&store.snapshot()).expect("snapshot serializes");
    println!("{snapshot}");
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let cfg = load(&args.scenario)?;
    let credentials = match &args.credentials {
        Some(path) => {
            Credentials::parse(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        }
        None => Credentials::default(),
    };
    runtime()?.block_on(async {
        let server = start(ServerOptions {
            http_addr: args.http_addr,
            broadcast_addr: args.broadcast_addr,
            log_path: args.log.clone(),
            network: cfg.network(),
            credentials,
            retransmit: cfg.retransmit,
        })
        .await?;
        println!("http {}", server.http_addr);
        println!("broadcast {}", server.broadcast_addr);
        let _ = io::stdout().flush();
        eprintln!(
            "log {} ({} envelopes replayed)",
            args.log.display(),
            server.state.log_len()
        );
        server.wait().await;
        Ok(())
    })
}

fn busnode(args: BusnodeArgs) -> Result<(), CliError> {
    let cfg = load(&args.scenario)?;
    let opts = BusNodeOptions {
        server_url: args.server,
        bus_id: args.bus,
        speedup: args.speedup,
        retransmit: RetransmitPolicy::default(),
    };
    let summary = runtime()?.block_on(run_bus_node(&cfg, &opts))?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    if summary.failed > 0 {
        return Err(CliError::Runtime(format!(
            "{} envelopes were never acknowledged",
            summary.failed
        )));
    }
    Ok(())
}

fn stopnode(args: StopnodeArgs) -> Result<(), CliError> {
    let soc_trace = match &args.soc_trace {
        Some(path) => {
            energy::parse_hourly_csv(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        }
        None => Vec::new(),
    };
    let opts = StopNodeOptions {
        clock_skew_s: args.skew,
        soc_trace,
        hour_ms: args.hour_ms,
        frame_interval_ms: args.frame_ms,
        max_frames: args.frames,
        ..StopNodeOptions::new(args.server, args.stop)
    };
    run_stop_node(&opts, &mut io::stdout().lock())?;
    Ok(())
}

fn energy_report(args: EnergyArgs) -> Result<(), CliError> {
    let invalid = |e: energy::EnergyError| CliError::Invalid(e.to_string());
    let mut profile = match &args.profile {
        Some(path) => {
            energy::parse_profile(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        }
        None => energy::display_profile(),
    };
    if let Some(h) = args.led_hours {
        if !(0.0..=24.0).contains(&h) {
            return Err(CliError::Invalid(format!(
                "--led-hours must be within [0, 24], got {h}"
            )));
        }
        profile = energy::with_led_hours(&profile, h);
    }
    let bound: Bound = args.bound.parse().map_err(invalid)?;
    let report = EnergyReport::compute(&profile, bound, args.sun_hours, args.voltage).map_err(invalid)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{report}");
    }
    Ok(())
}

fn metrics_report(args: MetricsArgs) -> Result<(), CliError> {
    let matrix = match &args.tally_log {
        Some(path) => {
            let lines = perception::parse_tally_log(&read(path)?)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
            metrics::aggregate(lines.iter().map(|l| &l.tally))
        }
        None => FIELD_MATRIX,
    };
    let report = MetricsReport::new(matrix, (!args.no_reference).then_some(&FIELD_REFERENCE));
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report.to_json()).expect("report serializes")
        );
    } else {
        println!("{report}");
    }
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<(), CliError> {
    let cfg = load(&args.scenario)?;
    println!(
        "{}: ok ({} routes, {} stops, {} buses, {} passengers)",
        args.scenario.display(),
        cfg.routes.len(),
        cfg.stops.len(),
        cfg.buses.len(),
        cfg.passengers.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(64),
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Replay(a) => replay(a),
        Command::Serve(a) => serve(a),
        Command::Busnode(a) => busnode(a),
        Command::Stopnode(a) => stopnode(a),
        Command::EnergyReport(a) => energy_report(a),
        Command::MetricsReport(a) => metrics_report(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
