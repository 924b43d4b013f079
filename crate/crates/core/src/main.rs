use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use attnatlas::analyze::{
    cmd_decompose, cmd_entropy, cmd_network_entropy, cmd_organize, cmd_rank_heads, DecomposeArgs, EntropyArgs,
    NetworkEntropyArgs, OrganizeArgs, RankArgs, DEFAULT_BIHAAR_M, DEFAULT_FRACTION, DEFAULT_TRIHAAR_M,
};
use attnatlas::tensor_io::CropAnchor;

#[derive(Parser)]
#[command(name = "attnatlas", version, about = "Organize attention-head tensors and measure their multiscale sparsity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Anchor {
    Topleft,
    Center,
}

impl From<Anchor> for CropAnchor {
    fn from(a: Anchor) -> Self {
        match a {
            Anchor::Topleft => CropAnchor::TopLeft,
            Anchor::Center => CropAnchor::Center,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build query/key/head trees and write the reordered tensor.
    Organize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
    /// Per-head bi-Haar l1 entropy report.
    Entropy {
        #[arg(long)]
        input: PathBuf,
        /// Directory holding tree_q.json and tree_k.json; dyadic trees otherwise.
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BIHAAR_M)]
        top_m: usize,
        #[arg(long)]
        heads_per_layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Count how often each head lands in the top or bottom entropy fraction.
    RankHeads {
        /// Entropy reports, one per batch.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FRACTION)]
        fraction: f64,
    },
    /// Tri-Haar l1 entropy of the whole tensor.
    NetworkEntropy {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRIHAAR_M)]
        top_m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Organize one head and split its softmax into approximation and residual.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        head: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, value_enum, default_value_t = Anchor::Topleft)]
        crop_anchor: Anchor,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Organize { input, .. }
            | Command::Entropy { input, .. }
            | Command::NetworkEntropy { input, .. }
            | Command::Decompose { input, .. } => vec![input],
            Command::RankHeads { inputs, .. } => inputs.iter().map(PathBuf::as_path).collect(),
        }
    }

    fn run(self) -> attnatlas::Result<()> {
        match self {
            Command::Organize { input, out_dir, iters, seed, beta } => cmd_organize(&OrganizeArgs { input, out_dir, iters, seed, beta }),
            Command::Entropy { input, trees, out_dir, top_m, heads_per_layer, seed } => cmd_entropy(&EntropyArgs {
                input,
                trees,
                out_dir,
                top_m,
                heads_per_layer,
                seed,
            }),
            Command::RankHeads { inputs, out_dir, fraction } => cmd_rank_heads(&RankArgs { reports: inputs, out_dir, fraction }).map(|_| ()),
            Command::NetworkEntropy { input, trees, out_dir, top_m, seed } => {
                cmd_network_entropy(&NetworkEntropyArgs { input, trees, out_dir, top_m, seed }).map(|_| ())
            }
            Command::Decompose { input, head, out_dir, depth, crop_anchor, iters, seed } => cmd_decompose(&DecomposeArgs {
                input,
                head,
                out_dir,
                depth,
                crop_anchor: crop_anchor.into(),
                iters,
                seed,
            })
            .map(|_| ()),
        }
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var("ATTNATLAS_THREADS") else {
        return;
    };
    match raw.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                error!("could not size thread pool: {e}");
            }
        }
        _ => error!("ignoring ATTNATLAS_THREADS={raw}: expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    if let Some(missing) = cli.command.inputs().into_iter().find(|p| !p.exists()) {
        eprintln!("error: input not found: {}", missing.display());
        return ExitCode::from(2);
    }
    match cli.command.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
