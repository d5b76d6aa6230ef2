//! Benchmark harness: run scenarios against in-process servers on loopback
//! and report client-side latency and throughput.
//!
//! A scenario file is flat `key = value` lines. Keys before the first
//! `[id]` header are defaults for every scenario; each section overrides
//! them. Harness keys are `baseline`, `duration_s`, `warmup_s`, `records`,
//! `clients`, `requests` and `warm`; everything else is a server key.

use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use oct_core::merkle::CertificateRecord;
use oct_core::stats::{mean, percentile};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::client;
use crate::config::NodeConfig;
use crate::ingest::{self, Ingested};
use crate::labels::Role;
use crate::layout::Layout;
use crate::server::{ServerHandle, ServerOptions};
use crate::NodeError;

pub const DEFAULT_DURATION: Duration = Duration::from_secs(30);
pub const LATENCY_NOTE: &str =
    "Latency is measured end to end at the client: from sending both envelopes until the recombined proof has verified.";

#[derive(Clone, Debug)]
pub struct Scenario {
    pub id: String,
    pub clients: usize,
    /// Fixed number of requests per client instead of a time window.
    pub requests: Option<usize>,
    /// Wait for full pools before each request (single-request latency runs).
    pub warm: bool,
    pub config: NodeConfig,
}

#[derive(Clone, Debug)]
pub struct Suite {
    pub baseline: Option<String>,
    pub duration: Duration,
    pub warmup: Duration,
    pub records: u32,
    pub scenarios: Vec<Scenario>,
}

impl Default for Suite {
    fn default() -> Self {
        Suite {
            baseline: None,
            duration: DEFAULT_DURATION,
            warmup: Duration::from_secs(2),
            records: 256,
            scenarios: Vec::new(),
        }
    }
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, NodeError> {
    v.parse().map_err(|_| NodeError::Config(format!("{k}: not a number: {v:?}")))
}

impl Suite {
    pub fn parse(text: &str) -> Result<Suite, NodeError> {
        let mut suite = Suite::default();
        let mut defaults: Vec<(String, String)> = Vec::new();
        let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(id) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let id = id.trim().to_string();
                if id.is_empty() || sections.iter().any(|(s, _)| *s == id) {
                    return Err(NodeError::Config(format!("line {}: bad or repeated section [{id}]", n + 1)));
                }
                sections.push((id, Vec::new()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NodeError::Config(format!("line {}: expected key = value", n + 1)))?;
            let kv = (k.trim().to_string(), v.trim().to_string());
            match sections.last_mut() {
                Some((_, kvs)) => kvs.push(kv),
                None => match kv.0.as_str() {
                    "baseline" => suite.baseline = Some(kv.1),
                    "duration_s" => suite.duration = Duration::from_secs_f64(num(&kv.0, &kv.1)?),
                    "warmup_s" => suite.warmup = Duration::from_secs_f64(num(&kv.0, &kv.1)?),
                    "records" => suite.records = num(&kv.0, &kv.1)?,
                    _ => defaults.push(kv),
                },
            }
        }
        if sections.is_empty() {
            return Err(NodeError::Config("scenario file defines no [scenario] sections".into()));
        }
        for (id, kvs) in sections {
            let mut s = Scenario {
                id,
                clients: 1,
                requests: None,
                warm: false,
                config: NodeConfig {
                    seed: Some(1),
                    ..NodeConfig::default()
                },
            };
            for (k, v) in defaults.iter().chain(&kvs) {
                match k.as_str() {
                    "clients" => s.clients = num(k, v)?,
                    "requests" => s.requests = Some(num(k, v)?),
                    "warm" => s.warm = matches!(v.as_str(), "on" | "true" | "1" | "yes"),
                    _ => s
                        .config
                        .set(k, v)
                        .map_err(|e| NodeError::Config(format!("[{}] {e}", s.id)))?,
                }
            }
            if s.clients == 0 {
                return Err(NodeError::Config(format!("[{}] clients must be at least 1", s.id)));
            }
            suite.scenarios.push(s);
        }
        if let Some(b) = &suite.baseline {
            if !suite.scenarios.iter().any(|s| &s.id == b) {
                return Err(NodeError::Config(format!("baseline {b:?} is not a scenario")));
            }
        }
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Suite, NodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NodeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Suite::parse(&text)
    }
}

pub fn toggles(cfg: &NodeConfig) -> String {
    let onoff = |b: bool| if b { "on" } else { "off" };
    format!(
        "pipeline={} precompute={} batch={}",
        onoff(cfg.pipeline),
        onoff(cfg.precompute),
        cfg.batch.max_batch
    )
}

#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub id: String,
    pub clients: usize,
    pub toggles: String,
    pub latencies_ms: Vec<f64>,
    pub errors: usize,
    pub window: Duration,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub throughput_rps: f64,
}

impl RunMetrics {
    pub fn new(id: &str, clients: usize, toggles: String, latencies_ms: Vec<f64>, errors: usize, window: Duration) -> Self {
        RunMetrics {
            id: id.to_string(),
            clients,
            toggles,
            mean_ms: mean(&latencies_ms),
            median_ms: percentile(&latencies_ms, 50.0),
            p95_ms: percentile(&latencies_ms, 95.0),
            throughput_rps: latencies_ms.len() as f64 / window.as_secs_f64().max(1e-9),
            latencies_ms,
            errors,
            window,
        }
    }

    /// Why the run cannot be trusted, if it cannot.
    pub fn invalid_reason(&self) -> Option<String> {
        if self.latencies_ms.is_empty() {
            return Some("no request completed".into());
        }
        if self.errors > 0 {
            return Some(format!("{} request(s) failed", self.errors));
        }
        None
    }
}

/// Synthetic certificate records for benchmarks and fixtures.
pub fn synthetic_records(n: u32) -> Vec<CertificateRecord> {
    (0..n)
        .map(|i| {
            let key: Vec<u8> = (0..32u32).map(|k| (i.wrapping_mul(131).wrapping_add(k * 7) & 0xff) as u8).collect();
            CertificateRecord::new(&format!("host{i}.bench.example"), key, 1_700_000_000 + i as u64, 10_000 + i as u64)
                .expect("synthetic record is valid")
        })
        .collect()
}

pub fn fixture(layout: &Layout, records: u32, seed: u64) -> Result<Ingested, NodeError> {
    let n = records.min(layout.capacity);
    ingest::build(layout, &synthetic_records(n), &mut ChaCha12Rng::seed_from_u64(seed))
}

/// A running pair of servers.
pub struct Deployment {
    pub index: ServerHandle,
    pub data: ServerHandle,
}

impl Deployment {
    pub fn start(ing: &Ingested, cfg: &NodeConfig) -> Result<Deployment, NodeError> {
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let index = ServerHandle::start(ServerOptions::new(cfg.clone(), Role::Index, any, None), ing.index.clone())?;
        let data = ServerHandle::start(
            ServerOptions::new(cfg.clone(), Role::Data, any, Some(index.addr)),
            ing.data.clone(),
        )?;
        data.wait_connected(Duration::from_secs(30))?;
        index.wait_connected(Duration::from_secs(30))?;
        Ok(Deployment { index, data })
    }

    pub fn servers(&self) -> [SocketAddr; 2] {
        [self.data.addr, self.index.addr]
    }

    pub fn wait_pools_full(&self, timeout: Duration) -> bool {
        self.index.wait_pools_full(timeout) && self.data.wait_pools_full(timeout)
    }

    pub fn stop(self) -> Result<(), NodeError> {
        self.index.stop()?;
        self.data.stop()?;
        Ok(())
    }
}

pub fn run_scenario(suite: &Suite, s: &Scenario) -> Result<RunMetrics, NodeError> {
    let layout = s.config.layout()?;
    let ing = fixture(&layout, suite.records, s.config.seed.unwrap_or(1))?;
    let dep = Deployment::start(&ing, &s.config)?;
    if s.config.precompute && !dep.wait_pools_full(Duration::from_secs(1800)) {
        log::warn!("[{}] pools did not fill before the run started", s.id);
    }
    let domains: Arc<Vec<String>> = Arc::new(ing.dictionary.entries.keys().cloned().collect());
    let dict = Arc::new(ing.dictionary.clone());
    let servers = dep.servers();
    let dep = Arc::new(dep);
    let start = Instant::now();
    let measure_from = start + if s.requests.is_some() { Duration::ZERO } else { suite.warmup };
    let end = measure_from + suite.duration;
    let stop = Arc::new(AtomicBool::new(false));
    let samples = Arc::new(Mutex::new((Vec::<f64>::new(), 0usize)));
    let threads: Vec<_> = (0..s.clients)
        .map(|c| {
            let (domains, dict, samples, stop, dep) = (domains.clone(), dict.clone(), samples.clone(), stop.clone(), dep.clone());
            let (requests, warm, seed) = (s.requests, s.warm, s.config.seed.unwrap_or(1));
            std::thread::spawn(move || {
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x5eed << 8) ^ c as u64);
                let mut done = 0usize;
                loop {
                    if stop.load(Ordering::Relaxed) || requests.is_some_and(|r| done >= r) {
                        break;
                    }
                    if requests.is_none() && Instant::now() >= end {
                        break;
                    }
                    if warm {
                        dep.wait_pools_full(Duration::from_secs(600));
                    }
                    let d = domains.choose(&mut rng).unwrap();
                    let t0 = Instant::now();
                    let r = client::lookup(&servers, &dict, d, Duration::from_secs(300), &mut rng);
                    let t1 = Instant::now();
                    done += 1;
                    let counted = requests.is_some() || (t0 >= measure_from && t1 <= end);
                    let mut g = samples.lock().unwrap();
                    match r {
                        Ok(_) if counted => g.0.push((t1 - t0).as_secs_f64() * 1000.0),
                        Ok(_) => {}
                        Err(e) => {
                            log::warn!("client {c}: {e}");
                            g.1 += 1;
                        }
                    }
                }
            })
        })
        .collect();
    for t in threads {
        let _ = t.join();
    }
    stop.store(true, Ordering::Relaxed);
    let window = if s.requests.is_some() { start.elapsed() } else { suite.duration };
    let (lat, errors) = samples.lock().unwrap().clone();
    Arc::try_unwrap(dep)
        .map_err(|_| NodeError::State("deployment still shared".into()))?
        .stop()?;
    Ok(RunMetrics::new(&s.id, s.clients, toggles(&s.config), lat, errors, window))
}

/// Drop invalid runs, warning about each.
pub fn valid_runs(runs: Vec<RunMetrics>) -> Vec<RunMetrics> {
    runs.into_iter()
        .filter(|r| match r.invalid_reason() {
            Some(why) => {
                log::warn!("excluding run [{}]: {why}", r.id);
                eprintln!("warning: excluding run [{}]: {why}", r.id);
                false
            }
            None => true,
        })
        .collect()
}

pub const CSV_HEADER: &str = "scenario,clients,toggles,mean_latency_ms,median_latency_ms,p95_latency_ms,throughput_rps";

pub fn write_csv<W: Write>(mut w: W, runs: &[RunMetrics]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in runs {
        writeln!(
            w,
            "{},{},{},{:.3},{:.3},{:.3},{:.4}",
            r.id, r.clients, r.toggles, r.mean_ms, r.median_ms, r.p95_ms, r.throughput_rps
        )?;
    }
    Ok(())
}

fn rel(x: f64, base: f64) -> String {
    if base == 0.0 || !base.is_finite() {
        return "n/a".into();
    }
    format!("{:+.1}%", 100.0 * (x - base) / base)
}

/// Plain-text summary with changes relative to the named baseline.
pub fn report(suite: &Suite, runs: &[RunMetrics]) -> String {
    let mut out = String::new();
    out.push_str("# Benchmark summary\n\n");
    out.push_str(LATENCY_NOTE);
    out.push('\n');
    let base = suite
        .baseline
        .as_ref()
        .and_then(|b| runs.iter().find(|r| &r.id == b));
    match (&suite.baseline, base) {
        (Some(b), Some(_)) => out.push_str(&format!("Relative changes are against [{b}].\n\n")),
        (Some(b), None) => out.push_str(&format!("Baseline [{b}] has no valid run; no relative changes.\n\n")),
        (None, _) => out.push_str("No baseline named.\n\n"),
    }
    out.push_str(&format!(
        "{:<16} {:>7} {:<36} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9}\n",
        "scenario", "clients", "toggles", "mean ms", "median ms", "p95 ms", "rps", "d rps", "d mean"
    ));
    for r in runs {
        let (dr, dm) = match base {
            Some(b) => (rel(r.throughput_rps, b.throughput_rps), rel(r.mean_ms, b.mean_ms)),
            None => ("n/a".into(), "n/a".into()),
        };
        out.push_str(&format!(
            "{:<16} {:>7} {:<36} {:>10.1} {:>10.1} {:>10.1} {:>9.3} {:>9} {:>9}\n",
            r.id, r.clients, r.toggles, r.mean_ms, r.median_ms, r.p95_ms, r.throughput_rps, dr, dm
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "baseline = serial\nduration_s = 5\ntree_capacity = 256\n\n[serial]\npipeline = off\nprecompute = off\n\n[fast]\nclients = 2\nbatch_max = 4\n";

    #[test]
    fn parse_sections_and_defaults() {
        let s = Suite::parse(SAMPLE).unwrap();
        assert_eq!(s.baseline.as_deref(), Some("serial"));
        assert_eq!(s.duration, Duration::from_secs(5));
        assert_eq!(s.scenarios.len(), 2);
        assert!(!s.scenarios[0].config.pipeline);
        assert_eq!(s.scenarios[1].clients, 2);
        assert_eq!(s.scenarios[1].config.batch.max_batch, 4);
        assert_eq!(s.scenarios[1].config.tree_capacity, 256);
        assert!(Suite::parse("baseline = nope\n[a]\n").is_err());
        assert!(Suite::parse("[a]\nbogus = 1\n").is_err());
        assert_eq!(Suite::default().duration, Duration::from_secs(30));
    }

    #[test]
    fn invalid_runs_are_dropped_and_baseline_is_relative() {
        let ok = RunMetrics::new("serial", 1, "t".into(), vec![10.0, 20.0], 0, Duration::from_secs(1));
        let fast = RunMetrics::new("fast", 1, "t".into(), vec![5.0, 5.0, 5.0, 5.0], 0, Duration::from_secs(1));
        let bad = RunMetrics::new("bad", 1, "t".into(), vec![1.0], 3, Duration::from_secs(1));
        let runs = valid_runs(vec![ok, fast, bad]);
        assert_eq!(runs.len(), 2);
        let suite = Suite::parse(SAMPLE).unwrap();
        let rep = report(&suite, &runs);
        assert!(rep.contains("end to end"));
        assert!(rep.contains("+100.0%"), "{rep}");
        let mut csv = Vec::new();
        write_csv(&mut csv, &runs).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
