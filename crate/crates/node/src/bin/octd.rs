//! Server daemon: runs either the data or the index server.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use oct_node::config::{resolve, NodeConfig};
use oct_node::labels::{state_file, LabelState, Role};
use oct_node::server::{ServerHandle, ServerOptions};
use oct_node::NodeError;

#[derive(Parser)]
#[command(name = "octd", about = "Run one of the two lookup servers")]
struct Cli {
    #[arg(long)]
    role: Option<Role>,
    #[arg(long)]
    config: PathBuf,
    /// Address to listen on (overrides `listen`).
    #[arg(long)]
    listen: Option<String>,
    /// Index server address, for the data server (overrides `peer`).
    #[arg(long)]
    peer: Option<String>,
    /// Deterministic seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding `<role>.state` (overrides `state_dir`).
    #[arg(long)]
    state_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), NodeError> {
    let mut cfg = NodeConfig::load(&cli.config)?;
    if let Some(r) = cli.role {
        cfg.role = Some(r);
    }
    if let Some(l) = cli.listen {
        cfg.listen = Some(l);
    }
    if let Some(p) = cli.peer {
        cfg.peer = Some(p);
    }
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(d) = cli.state_dir {
        cfg.state_dir = d;
    }
    let role = cfg.role.ok_or_else(|| NodeError::Config("no role given (--role data|index)".into()))?;
    let listen = resolve(cfg.listen.as_deref().ok_or_else(|| NodeError::Config("no listen address".into()))?)?;
    let peer = match role {
        Role::Data => Some(resolve(
            cfg.peer.as_deref().ok_or_else(|| NodeError::Config("data server needs --peer".into()))?,
        )?),
        Role::Index => None,
    };
    let state = LabelState::load(&state_file(&cfg.state_dir, role))?;
    log::info!(
        "{role} server: N = {}, epoch {}, pipeline {}, precompute {}, batch {}",
        state.layout.params.num_blocks,
        state.epoch,
        cfg.pipeline,
        cfg.precompute,
        cfg.batch.max_batch
    );

    let stop = Arc::new(AtomicBool::new(false));
    let s2 = stop.clone();
    ctrlc::set_handler(move || s2.store(true, Ordering::SeqCst))
        .map_err(|e| NodeError::Config(format!("cannot install signal handler: {e}")))?;

    let mut opts = ServerOptions::new(cfg, role, listen, peer);
    opts.persist = true;
    let h = ServerHandle::start(opts, state)?;
    while !stop.load(Ordering::SeqCst) && !h.has_stopped() {
        std::thread::sleep(Duration::from_millis(100));
    }
    if stop.load(Ordering::SeqCst) {
        log::info!("shutting down");
    }
    let state = h.stop()?;
    log::info!("stopped at epoch {}", state.epoch);
    Ok(())
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
