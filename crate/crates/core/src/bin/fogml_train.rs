//! Train the on-device model from labelled accelerometer CSV.

use std::path::PathBuf;

use clap::Parser;
use tinyreach::ml::{section_sizes, train_bundle, Dataset};

#[derive(Parser, Debug)]
#[command(name = "fogml-train", about = "Train a classifier and anomaly model into a model blob")]
struct Args {
    /// CSV of `label,ax,ay,az` rows.
    #[arg(long)]
    data: PathBuf,
    /// Output model blob.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "MODEL")]
    name: String,
    #[arg(long, default_value = "1.0.0")]
    version: String,
    /// Samples per window.
    #[arg(long, default_value_t = 32)]
    window: usize,
}

fn run(args: &Args) -> Result<(), String> {
    let file = std::fs::File::open(&args.data).map_err(|e| format!("{}: {e}", args.data.display()))?;
    let ds = Dataset::from_csv(file, args.window).map_err(|e| e.to_string())?;
    let bundle = train_bundle(&ds, &args.name, &args.version, args.seed).map_err(|e| e.to_string())?;
    let blob = bundle.encode().map_err(|e| e.to_string())?;
    std::fs::write(&args.out, &blob).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let sizes = section_sizes(&blob).map_err(|e| e.to_string())?;
    println!(
        "{} windows, classes {:?}, threshold {:.4}",
        ds.windows.len(),
        bundle.config.class_names,
        bundle.kmeans.threshold
    );
    println!(
        "wrote {} ({} bytes: forest {}, kmeans {}, scaler {}, config {})",
        args.out.display(),
        sizes.total,
        sizes.forest,
        sizes.kmeans,
        sizes.scaler,
        sizes.config
    );
    Ok(())
}

fn main() {
    let args = Args::parse();
    if let Err(e) = run(&args) {
        eprintln!("fogml-train: {e}");
        std::process::exit(1);
    }
}
