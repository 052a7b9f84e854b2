//! A simulated TinyML device speaking LwM2M to a management server.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use tinyreach::client::ClientConfig;
use tinyreach::coap::uri::CoapUri;
use tinyreach::coap::{LinkConfig, SimNetwork, TransmissionParams};
use tinyreach::server::{BootstrapConfig, Server, ServerConfig};
use tinyreach::sim::{build_firmware, factory_firmware, DeviceSpec, Link, Pattern, SimDevice};
use tinyreach::time::Clock;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkArg {
    Sim,
    Udp,
}

#[derive(Parser, Debug)]
#[command(name = "client", about = "Run one simulated TinyML device")]
struct Args {
    /// Endpoint client name.
    #[arg(long)]
    endpoint: String,
    /// LwM2M server URI, e.g. coap://127.0.0.1:5683.
    #[arg(long)]
    server: String,
    /// Bootstrap server URI; when given the server URI comes from it.
    #[arg(long)]
    bootstrap: Option<String>,
    /// Run in queue mode.
    #[arg(long)]
    queue: bool,
    /// Seconds asleep between wake windows in queue mode.
    #[arg(long, default_value_t = 60)]
    wake: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Registration lifetime, seconds.
    #[arg(long, default_value_t = 86_400)]
    lifetime: u32,
    /// Movement the accelerometer sees.
    #[arg(long, default_value = "idle")]
    pattern: Pattern,
    /// Model blob to flash instead of the factory model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// `sim` runs an in-process server on the simulated link.
    #[arg(long, value_enum, default_value = "udp")]
    link: LinkArg,
    #[arg(long)]
    link_seed: Option<u64>,
    /// Loss probability of the simulated link.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
}

fn firmware(args: &Args) -> Result<Vec<u8>, String> {
    match &args.model {
        Some(path) => {
            let blob = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let bundle = tinyreach::ml::model_blob_decode(&blob).map_err(|e| e.to_string())?;
            build_firmware(&bundle, &bundle.config.version, tinyreach::sim::FW1_SIZE)
        }
        None => factory_firmware(120, args.seed),
    }
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    if let Err(e) = run(args).await {
        eprintln!("client: {e}");
        std::process::exit(1);
    }
}

async fn run(args: Args) -> Result<(), String> {
    let image = firmware(&args)?;
    let mut config = ClientConfig::new(&args.endpoint, &args.server);
    config.bootstrap_uri = args.bootstrap.clone();
    config.queue_mode = args.queue;
    config.wake_interval = Duration::from_secs(args.wake);
    config.lifetime = args.lifetime;
    config.validate().map_err(|e| e.to_string())?;

    let (link, addr, _server) = match args.link {
        LinkArg::Udp => (Link::Udp, SocketAddr::from(([0, 0, 0, 0], 0)), None),
        LinkArg::Sim => {
            let net = SimNetwork::new(LinkConfig::lossy(args.loss), args.link_seed.unwrap_or(args.seed));
            let target = args.bootstrap.as_deref().unwrap_or(&args.server);
            let server_addr = CoapUri::parse(target)
                .ok()
                .and_then(|u| u.socket_addr())
                .ok_or_else(|| format!("{target}: need a literal address on the simulated link"))?;
            let (ep, rx) = tinyreach::coap::CoapEndpoint::sim(&net, server_addr, TransmissionParams::default(), args.seed);
            let server = Server::start(
                ep,
                rx,
                ServerConfig {
                    bootstrap: args.bootstrap.as_ref().map(|_| BootstrapConfig {
                        server_uri: format!("coap://{server_addr}"),
                        lifetime: None,
                        accept_unknown: true,
                        known: Vec::new(),
                    }),
                    ..ServerConfig::default()
                },
            )
            .map_err(|e| e.to_string())?;
            (Link::Sim(net), SocketAddr::from(([10, 0, 1, 1], 5683)), Some(server))
        }
    };
    let spec = DeviceSpec::new(config, addr, args.seed);
    let device = SimDevice::new(spec, &image);
    device.set_pattern(args.pattern);
    let task = tokio::spawn(device.clone().run(link, Clock::system()));
    tracing::info!(endpoint = %args.endpoint, "device running, ctrl-c to stop");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = task => return Err("device halted".into()),
    }
    if let Some(c) = device.client() {
        c.stop(true);
        tokio::time::sleep(Duration::from_secs(2)).await;
    }
    device.stop();
    let ticks = device.ticks();
    println!(
        "{}: {} windows, {} anomalous",
        args.endpoint,
        ticks.len(),
        ticks.iter().filter(|t| t.anomalous).count()
    );
    Ok(())
}
