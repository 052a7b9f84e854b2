//! LwM2M management server with the HTTP API.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use tinyreach::client::ClientConfig;
use tinyreach::coap::{LinkConfig, SimNetwork, TransmissionParams};
use tinyreach::server::{api, BootstrapConfig, Server, ServerConfig};
use tinyreach::sim::{factory_firmware, DeviceSpec, Link, Pattern, SimDevice};
use tinyreach::time::Clock;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkArg {
    Sim,
    Udp,
}

#[derive(Parser, Debug)]
#[command(name = "server", about = "Run the LwM2M management server and its HTTP API")]
struct Args {
    #[arg(long, default_value_t = 8080)]
    http_port: u16,
    #[arg(long, default_value_t = 5683)]
    coap_port: u16,
    /// Telemetry and firmware images persist here.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// `sim` serves simulated devices over the in-process link.
    #[arg(long, value_enum, default_value = "udp")]
    link: LinkArg,
    #[arg(long, default_value_t = 1)]
    link_seed: u64,
    /// Loss probability of the simulated link.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    /// Simulated devices to host with `--link sim`.
    #[arg(long, default_value_t = 1)]
    devices: usize,
    /// URI devices use to reach this server, for bootstrap and image pulls.
    #[arg(long)]
    public_uri: Option<String>,
    /// Require this bearer token on the HTTP API.
    #[arg(long, env = "TINYREACH_API_TOKEN")]
    token: Option<String>,
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    if let Err(e) = run(args).await {
        eprintln!("server: {e}");
        std::process::exit(1);
    }
}

async fn run(args: Args) -> Result<(), String> {
    let (link, coap_addr) = match args.link {
        LinkArg::Udp => (Link::Udp, SocketAddr::from(([0, 0, 0, 0], args.coap_port))),
        LinkArg::Sim => {
            let net = SimNetwork::new(LinkConfig::lossy(args.loss), args.link_seed);
            (Link::Sim(net), SocketAddr::from(([10, 0, 0, 1], args.coap_port)))
        }
    };
    let public_uri = args.public_uri.clone().unwrap_or_else(|| match args.link {
        LinkArg::Udp => format!("coap://127.0.0.1:{}", args.coap_port),
        LinkArg::Sim => format!("coap://{coap_addr}"),
    });
    let (ep, rx) = link
        .endpoint(coap_addr, TransmissionParams::default(), args.link_seed)
        .await
        .map_err(|e| e.to_string())?;
    let server = Server::start(
        ep,
        rx,
        ServerConfig {
            data_dir: args.data_dir.clone(),
            public_uri: Some(public_uri.clone()),
            bootstrap: Some(BootstrapConfig {
                server_uri: public_uri.clone(),
                lifetime: None,
                accept_unknown: true,
                known: Vec::new(),
            }),
            api_token: args.token.clone(),
            ..ServerConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    tracing::info!(coap = %server.coap_addr(), "CoAP listening");

    let mut devices = Vec::new();
    if let Link::Sim(_) = &link {
        let image = factory_firmware(120, args.link_seed)?;
        for i in 0..args.devices {
            let name = format!("tinyml-{:03}", i + 1);
            let addr = SocketAddr::from(([10, 1, (i >> 8) as u8, (i & 0xff) as u8], 5683));
            let dev = SimDevice::new(DeviceSpec::new(ClientConfig::new(&name, &public_uri), addr, args.link_seed + i as u64), &image);
            dev.set_pattern(Pattern::ALL[i % 3]);
            tokio::spawn(dev.clone().run(link.clone(), Clock::system()));
            devices.push(dev);
        }
    }

    let http = SocketAddr::from(([0, 0, 0, 0], args.http_port));
    tokio::select! {
        r = api::serve(server.clone(), http) => r.map_err(|e| e.to_string())?,
        _ = tokio::signal::ctrl_c() => {}
    }
    for d in &devices {
        d.stop();
    }
    server.shutdown();
    Ok(())
}
