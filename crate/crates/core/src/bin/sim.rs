//! Simulated fleet: the four-phase case study or a long soak.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use tinyreach::server::RolloutMode;
use tinyreach::sim::scenario::{run_phases, run_soak, LinkMode, ScenarioConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scenario {
    Phases,
    Soak,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkArg {
    Sim,
    Udp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Push,
    Pull,
}

#[derive(Parser, Debug)]
#[command(name = "sim", about = "Run a simulated device fleet against the management server")]
struct Args {
    #[arg(long, default_value_t = 1)]
    devices: usize,
    #[arg(long, value_enum, default_value = "phases")]
    scenario: Scenario,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// JSON report destination.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Plot files go here; defaults to the report's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `sim` runs on a simulated clock; `udp` uses sockets and wall time.
    #[arg(long, value_enum, default_value = "sim")]
    link: LinkArg,
    #[arg(long)]
    link_seed: Option<u64>,
    /// Loss probability of the simulated link.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    /// Firmware delivery mode.
    #[arg(long, value_enum, default_value = "push")]
    mode: ModeArg,
    /// Put every device in queue mode.
    #[arg(long)]
    queue: bool,
    /// Multiplies every timer; below 1 shortens wall time on `udp`.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Simulated soak length, hours.
    #[arg(long, default_value_t = 6.0)]
    hours: f64,
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| args.report.as_ref().and_then(|r| r.parent()).map(PathBuf::from));
    let cfg = ScenarioConfig {
        devices: args.devices,
        seed: args.seed,
        loss: args.loss,
        link: match args.link {
            LinkArg::Sim => LinkMode::Sim,
            LinkArg::Udp => LinkMode::Udp,
        },
        link_seed: args.link_seed,
        rollout_mode: match args.mode {
            ModeArg::Push => RolloutMode::Push,
            ModeArg::Pull => RolloutMode::Pull,
        },
        queue_mode: args.queue,
        time_scale: args.time_scale,
        soak_duration: Duration::from_secs_f64(args.hours * 3600.0),
        out_dir,
        ..ScenarioConfig::default()
    };
    let mut rt = match cfg.link {
        LinkMode::Sim => {
            let mut b = tokio::runtime::Builder::new_current_thread();
            b.start_paused(true);
            b
        }
        LinkMode::Udp => tokio::runtime::Builder::new_multi_thread(),
    };
    let rt = rt.enable_all().build().expect("tokio runtime");
    let report = rt.block_on(async {
        match args.scenario {
            Scenario::Phases => run_phases(&cfg).await,
            Scenario::Soak => run_soak(&cfg).await,
        }
    });
    print!("{}", report.summary());
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        if let Err(e) = std::fs::write(path, json) {
            eprintln!("sim: {}: {e}", path.display());
            std::process::exit(2);
        }
    }
    std::process::exit(if report.passed { 0 } else { 1 });
}
