//! Client and ingestion tool.

mod common;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use oct_node::config::{resolve, NodeConfig};
use oct_node::dictionary::Dictionary;
use oct_node::NodeError;
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Parser)]
#[command(name = "octl", about = "Look up certificates privately, or ingest a log")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fetch and verify the inclusion proof for a domain.
    Lookup {
        domain: String,
        /// Data server, then index server.
        #[arg(long, value_delimiter = ',', required = true)]
        servers: Vec<String>,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 300)]
        timeout_s: u64,
    },
    /// Build the log from a record file and write both servers' states.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `state_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Deterministic seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), NodeError> {
    match cli.cmd {
        Cmd::Lookup {
            domain,
            servers,
            dict,
            timeout_s,
        } => {
            let dict = Dictionary::load(&dict)?;
            let addrs: Vec<SocketAddr> = servers.iter().map(|s| resolve(s)).collect::<Result<_, _>>()?;
            let servers: [SocketAddr; 2] = addrs
                .try_into()
                .map_err(|_| NodeError::Config("--servers takes exactly two addresses".into()))?;
            let rep = oct_node::client::lookup(&servers, &dict, &domain, Duration::from_secs(timeout_s), &mut OsRng)?;
            let r = &rep.proof.record;
            println!("domain      {}", r.domain);
            println!("leaf        {} of {}", rep.proof.proof.leaf_index, dict.size);
            println!("root        {}", rep.proof.root);
            println!("public key  {}", hex::encode(&r.public_key));
            println!("issued      {}", r.issued_at);
            println!("serial      {}", r.serial);
            println!("latency     {:.1} ms", rep.latency.as_secs_f64() * 1000.0);
            println!("verified    inclusion proof checks against the log root");
            Ok(())
        }
        Cmd::Ingest { file, config, out, seed } => {
            let cfg = NodeConfig::load(&config)?;
            let layout = cfg.layout()?;
            let out = out.unwrap_or(cfg.state_dir.clone());
            let root = match seed.or(cfg.seed) {
                Some(s) => oct_node::ingest::ingest_file(&layout, &file, &out, &mut ChaCha12Rng::seed_from_u64(s))?,
                None => oct_node::ingest::ingest_file(&layout, &file, &out, &mut OsRng)?,
            };
            println!("root {root}");
            println!("wrote index.state, data.state and dictionary.txt to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    common::init_logging();
    let cli = match common::parse_args::<Cli>() {
        Ok(c) => c,
        Err(code) => return code,
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => common::fail(&e),
    }
}
