use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedbench_cli::runner::{
    cmd_aggregator, cmd_collaborator, cmd_grid, cmd_partition, cmd_run, RunOverrides,
};

/// Reproducible federated-learning experiments at desk scale.
#[derive(Parser)]
#[command(name = "fedbench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated experiment; writes metrics.csv and summary.json.
    Run {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Override federation.master_seed (reflected in the seed column).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides out_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for local training within each round.
        #[arg(long)]
        workers: Option<usize>,
        /// Run over loopback TCP with one thread per collaborator instead of
        /// in-process.
        #[arg(long)]
        net: bool,
    },
    /// Write the partition plan (client → sample indices) as JSON.
    Partition {
        #[arg(long)]
        config: PathBuf,
        /// Override the partition seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (default: <out_dir>/plan.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cartesian sweep from the [grid] section.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Override federation.master_seed for every cell.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides out_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for local training within each round.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Serve a federation over TCP and write metrics when it completes.
    Aggregator {
        #[arg(long)]
        config: PathBuf,
        /// Address to listen on, e.g. 127.0.0.1:7000 (port 0 picks a free
        /// port; the chosen address is printed on startup).
        #[arg(long)]
        bind: String,
        /// Must match the collaborators' --seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one client's shard against a remote aggregator.
    Collaborator {
        #[arg(long)]
        config: PathBuf,
        /// Aggregator address, e.g. 127.0.0.1:7000.
        #[arg(long)]
        connect: String,
        /// This client's id in [0, num_clients).
        #[arg(long)]
        client_id: usize,
        /// Must match the aggregator's --seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, workers, net } => {
            cmd_run(&config, &RunOverrides { seed, out, workers, net })
        }
        Command::Partition { config, seed, out } => cmd_partition(&config, seed, out.as_deref()),
        Command::Grid { config, seed, out, workers } => {
            cmd_grid(&config, &RunOverrides { seed, out, workers, net: false })
        }
        Command::Aggregator { config, bind, seed, out } => {
            cmd_aggregator(&config, &bind, &RunOverrides { seed, out, workers: None, net: true })
        }
        Command::Collaborator { config, connect, client_id, seed } => {
            cmd_collaborator(&config, &connect, client_id, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
