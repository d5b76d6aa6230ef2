//! Acceptance gate. Every criterion runs in sequence inside one test so the
//! timing checks are not disturbed by other tests sharing the CPU, and each
//! prints a single PASS/FAIL line.

mod common;

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use oct_core::merkle::{parse_ingest, verify_proof, CertificateRecord, MerkleLog};
use oct_core::mpc::{decode, evaluate, garble, ot_transfer, BoolCircuit, Gate, GateOp};
use oct_core::oram::{self, Op, OramParams};
use oct_core::stats::{byte_histogram, chi_square_two_sample, chi_square_uniform, mean, welch_lower_bound};
use oct_node::bench::{run_scenario, Deployment, Scenario, Suite};
use oct_node::client::{self, prepare, PreparedQuery};
use oct_node::config::NodeConfig;
use oct_node::ingest::{self, Ingested};
use oct_node::labels::{decode_pair, LabelState};
use oct_node::local::LocalPair;
use oct_node::session::TraceEvent;
use oct_node::templates::gadgets;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Written to the raw stderr handle so the lines survive output capture.
fn say(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn oram_oracle() -> Verdict {
    let start = Instant::now();
    let p = OramParams::new(256, 3, 64).unwrap();
    let mut r = rng(101);
    let (mut t, mut pm) = oram::init(p, &mut r).unwrap();
    let mut oracle = vec![vec![0u8; 64]; 256];
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let id = r.gen_range(0..256u32);
        if r.gen_bool(0.5) {
            let mut data = vec![0u8; 64];
            r.fill(&mut data[..]);
            let out = t.access(&mut pm, id, Op::Write(&data), &mut r).unwrap();
            mismatches += usize::from(out.payload != oracle[id as usize]);
            oracle[id as usize] = data;
        } else {
            let out = t.access(&mut pm, id, Op::Read, &mut r).unwrap();
            mismatches += usize::from(out.payload != oracle[id as usize]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(mismatches == 0 && secs < 60.0, format!("{mismatches} mismatches in 10000 ops, {secs:.2} s"))
}

fn stash_bound() -> Verdict {
    let p = OramParams::new(1024, 3, 8).unwrap().with_stash(64).unwrap();
    let mut r = rng(102);
    let (mut t, mut pm) = oram::init(p, &mut r).unwrap();
    let mut max = 0;
    for i in 0..100_000u32 {
        let id = r.gen_range(0..1024);
        let res = if i % 2 == 0 {
            t.access(&mut pm, id, Op::Write(&[i as u8; 8]), &mut r)
        } else {
            t.access(&mut pm, id, Op::Read, &mut r)
        };
        if let Err(e) = res {
            return verdict(false, format!("access {i} failed: {e}"));
        }
        max = max.max(t.stash_occupancy());
    }
    say(format!("  max stash occupancy over 100000 accesses: {max}"));
    verdict(max <= 64, format!("max stash occupancy {max}"))
}

fn leaf_record(i: u64) -> CertificateRecord {
    CertificateRecord::new(&format!("leaf{i}.example"), i.to_be_bytes().to_vec(), i, i).unwrap()
}

fn merkle() -> Verdict {
    let mut log = MerkleLog::new(4096).unwrap();
    let leaves: Vec<_> = (0..4096).map(|i| leaf_record(i).leaf_digest()).collect();
    let mut bad = 0u64;
    for size in 1..=4096u64 {
        log.append_leaf(leaves[size as usize - 1]).unwrap();
        let root = log.root();
        for i in 0..size {
            if !verify_proof(&leaves[i as usize], &log.inclusion_proof(i).unwrap(), &root) {
                bad += 1;
            }
        }
    }
    let mut small = MerkleLog::new(16).unwrap();
    for l in &leaves[..16] {
        small.append_leaf(*l).unwrap();
    }
    let root = small.root();
    let mut accepted = 0;
    for i in 0..16u64 {
        let leaf = leaves[i as usize];
        let p = small.inclusion_proof(i).unwrap();
        for s in 0..p.siblings.len() {
            for byte in 0..32 {
                for bit in 0..8 {
                    let mut q = p.clone();
                    q.siblings[s].0 .0[byte] ^= 1 << bit;
                    accepted += usize::from(verify_proof(&leaf, &q, &root));
                }
            }
        }
        for byte in 0..32 {
            let (mut l2, mut r2) = (leaf, root);
            l2.0[byte] ^= 1;
            r2.0[byte] ^= 1;
            accepted += usize::from(verify_proof(&l2, &p, &root));
            accepted += usize::from(verify_proof(&leaf, &p, &r2));
        }
    }
    verdict(
        bad == 0 && accepted == 0,
        format!("{bad} failed round trips over sizes 1..4096, {accepted} tampered proofs accepted"),
    )
}

fn bits(v: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| (v >> i) & 1 == 1).collect()
}

fn garbled_eval(c: &BoolCircuit, a: &[bool], b: &[bool], r: &mut ChaCha8Rng) -> Vec<bool> {
    let (gc, pairs, dec) = garble(c, r);
    let inputs: Vec<_> = a.iter().chain(b).zip(&pairs).map(|(v, p)| if *v { p.1 } else { p.0 }).collect();
    decode(&evaluate(&gc, &inputs).unwrap(), &dec)
}

fn garbling() -> Verdict {
    let mut r = rng(104);
    let mut wrong = 0;
    let mut checked = 0;
    for (name, c) in gadgets() {
        let (na, nb) = (c.num_inputs_a as usize, c.num_inputs_b as usize);
        assert!(na + nb <= 8, "{name} has too many inputs");
        for v in 0..1u64 << (na + nb) {
            let x = bits(v, na + nb);
            let (a, b) = x.split_at(na);
            wrong += usize::from(garbled_eval(&c, a, b, &mut r) != c.eval(a, b).unwrap());
            checked += 1;
        }
    }
    for _ in 0..100 {
        let mut g = Vec::new();
        for i in 0..64u32 {
            let w = 16 + i;
            let op = [GateOp::And, GateOp::Xor, GateOp::Not][r.gen_range(0..3)];
            g.push(Gate { op, a: r.gen_range(0..w), b: r.gen_range(0..w), out: w });
        }
        let c = BoolCircuit::new(8, 8, 8, g).unwrap();
        let (gc, pairs, dec) = garble(&c, &mut r);
        for _ in 0..100 {
            let a: Vec<bool> = (0..8).map(|_| r.gen()).collect();
            let b: Vec<bool> = (0..8).map(|_| r.gen()).collect();
            let inputs: Vec<_> = a.iter().chain(&b).zip(&pairs).map(|(v, p)| if *v { p.1 } else { p.0 }).collect();
            wrong += usize::from(decode(&evaluate(&gc, &inputs).unwrap(), &dec) != c.eval(&a, &b).unwrap());
            checked += 1;
        }
    }
    verdict(wrong == 0, format!("{wrong} wrong outputs in {checked} evaluations"))
}

fn oblivious_transfer() -> Verdict {
    let mut r = rng(105);
    let mut views = [Vec::new(), Vec::new()];
    let mut wrong = 0;
    for choice in [false, true] {
        for _ in 0..10_000 {
            let (mut m0, mut m1) = (vec![0u8; 16], vec![0u8; 16]);
            r.fill(&mut m0[..]);
            r.fill(&mut m1[..]);
            let (got, view) = ot_transfer(&m0, &m1, choice, &mut r).unwrap();
            wrong += usize::from(got != if choice { m1 } else { m0 });
            views[choice as usize].extend(view.to_bytes());
        }
    }
    let p = chi_square_two_sample(&byte_histogram(&views[0]), &byte_histogram(&views[1]));
    verdict(p > 0.01 && wrong == 0, format!("p = {p:.4}, {wrong} wrong transfers"))
}

/// Leaf paths the data server reads and the data shares it returns.
fn data_view(ing: &Ingested, queries: &[PreparedQuery], seed: u64) -> (Vec<u32>, Vec<u8>) {
    let mut pair = LocalPair::new(ing.index.clone(), ing.data.clone(), ing.dictionary.clone(), seed).unwrap();
    let mut shares = Vec::new();
    for chunk in queries.chunks(8) {
        for res in pair.run_batch(chunk).unwrap() {
            assert!(res.verified.is_ok(), "{:?}", res.verified);
            shares.extend(res.data_share.unwrap());
        }
    }
    (pair.data.trace.path_reads(), shares)
}

fn privacy() -> Verdict {
    let ing = ingested(1024, 100, 106);
    let mut r = rng(106);
    let domains: Vec<String> = ing.dictionary.entries.keys().cloned().collect();
    let fixed = &domains[0];
    let qa: Vec<_> = (0..1000).map(|_| prepare(&ing.dictionary, fixed, &mut r).unwrap()).collect();
    let qb: Vec<_> = (0..1000)
        .map(|_| prepare(&ing.dictionary, domains.choose(&mut r).unwrap(), &mut r).unwrap())
        .collect();
    let (la, sa) = data_view(&ing, &qa, 1);
    let (lb, _) = data_view(&ing, &qb, 2);
    let leaves = ing.index.layout.params.num_leaves() as usize;
    let hist = |ls: &[u32]| {
        let mut h = vec![0u64; leaves];
        for l in ls {
            h[*l as usize] += 1;
        }
        h
    };
    let p_paths = chi_square_two_sample(&hist(&la), &hist(&lb));
    let p_bytes = chi_square_uniform(&byte_histogram(&sa));
    verdict(
        p_paths > 0.01 && p_bytes > 0.01,
        format!(
            "paths p = {p_paths:.4} ({} vs {} reads), share bytes p = {p_bytes:.4} over {} bytes",
            la.len(),
            lb.len(),
            sa.len()
        ),
    )
}

struct BatchRun {
    index: LabelState,
    data: LabelState,
    shares: Vec<(Option<Vec<u8>>, Option<Vec<u8>>)>,
    max_writes: usize,
}

fn batched(ing: &Ingested, queries: &[PreparedQuery], batch: usize) -> BatchRun {
    let mut pair = LocalPair::new(ing.index.clone(), ing.data.clone(), ing.dictionary.clone(), 7).unwrap();
    let mut shares = Vec::new();
    for chunk in queries.chunks(batch) {
        for res in pair.run_batch(chunk).unwrap() {
            shares.push((res.data_share, res.index_share));
        }
    }
    let max_writes = pair
        .index
        .trace
        .events()
        .iter()
        .filter_map(|e| match e {
            TraceEvent::BatchApplied { max_writes_per_slot, .. } => Some(*max_writes_per_slot),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    BatchRun {
        index: pair.index.state.clone(),
        data: pair.data.state.clone(),
        shares,
        max_writes,
    }
}

fn batching() -> Verdict {
    let ing = ingested(256, 24, 107);
    let mut r = rng(107);
    let domains: Vec<String> = ing.dictionary.entries.keys().cloned().collect();
    let queries: Vec<_> = (0..32)
        .map(|_| prepare(&ing.dictionary, domains.choose(&mut r).unwrap(), &mut r).unwrap())
        .collect();
    let serial = batched(&ing, &queries, 1);
    let want = decode_pair(&serial.index, &serial.data).unwrap();
    let mut differing = Vec::new();
    let mut worst = serial.max_writes;
    for b in 2..=16 {
        let run = batched(&ing, &queries, b);
        let same = run.index.tree == serial.index.tree
            && run.index.posmap == serial.index.posmap
            && run.data.tree == serial.data.tree
            && run.data.posmap == serial.data.posmap
            && decode_pair(&run.index, &run.data).unwrap() == want
            && run.shares == serial.shares;
        if !same {
            differing.push(b);
        }
        worst = worst.max(run.max_writes);
    }
    verdict(
        differing.is_empty() && worst <= 1,
        format!("batch sizes differing from serial: {differing:?}, max writes per slot {worst}"),
    )
}

fn arm(id: &str, clients: usize, pipeline: bool, precompute: bool, batch: usize) -> Scenario {
    let mut config = NodeConfig { seed: Some(1), pipeline, precompute, ..Default::default() };
    config.batch.max_batch = batch;
    Scenario { id: id.into(), clients, requests: None, warm: false, config }
}

fn throughput() -> Verdict {
    let suite = Suite::default();
    let mut tp = Vec::new();
    for s in [
        arm("serial-2", 2, false, false, 1),
        arm("pipelined-2", 2, true, true, 2),
        arm("serial-1", 1, false, false, 1),
        arm("pipelined-1", 1, true, false, 1),
    ] {
        let m = run_scenario(&suite, &s).unwrap();
        say(format!(
            "  [{}] {} clients, {}: {:.3} req/s, mean {:.0} ms, {} errors",
            m.id, m.clients, m.toggles, m.throughput_rps, m.mean_ms, m.errors
        ));
        if let Some(why) = m.invalid_reason() {
            return verdict(false, format!("run [{}] invalid: {why}", m.id));
        }
        tp.push(m.throughput_rps);
    }
    let (two, one) = (tp[1] / tp[0], tp[3] / tp[2]);
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    verdict(
        two >= 1.10 && (one - 1.0).abs() <= 0.10,
        format!("2 clients {two:.3}x serial, 1 client {one:.3}x serial ({cores} core(s) available)"),
    )
}

fn precompute() -> Verdict {
    let suite = Suite::default();
    let mut cold = arm("cold", 1, true, false, 1);
    cold.requests = Some(30);
    let mut warm = arm("warm", 1, true, true, 1);
    warm.requests = Some(30);
    warm.warm = true;
    warm.config.pool_exponentiations = warm.config.pool_exponentiations.max(100);
    warm.config.pool_circuits = warm.config.pool_circuits.max(100);
    let c = run_scenario(&suite, &cold).unwrap();
    let w = run_scenario(&suite, &warm).unwrap();
    if c.errors + w.errors > 0 || c.latencies_ms.len() < 30 || w.latencies_ms.len() < 30 {
        return verdict(false, format!("incomplete arms: cold {} ok, warm {} ok", c.latencies_ms.len(), w.latencies_ms.len()));
    }
    let lb = welch_lower_bound(&c.latencies_ms, &w.latencies_ms, 0.95);
    verdict(
        lb > 0.0,
        format!(
            "cold mean {:.0} ms, warm mean {:.0} ms, 95% lower bound on the gain {lb:.1} ms",
            mean(&c.latencies_ms),
            mean(&w.latencies_ms)
        ),
    )
}

fn sweep() -> Verdict {
    let start = Instant::now();
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/domains256.txt");
    let records = parse_ingest(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap();
    assert_eq!(records.len(), 256);
    let base = NodeConfig { seed: Some(3), ..Default::default() };
    let ing = ingest::build(&base.layout().unwrap(), &records, &mut rng(110)).unwrap();
    // Clients verify against the dictionary's root, which is the published one.
    assert_eq!(ing.dictionary.root, MerkleLog::from_records(256, &records).unwrap().capacity_root());
    let domains: Arc<Vec<String>> = Arc::new(records.iter().map(|r| r.domain.clone()).collect());
    let dict = Arc::new(ing.dictionary.clone());
    let mut failures = Vec::new();
    for pipeline in [false, true] {
        for precompute in [false, true] {
            for batch in [1usize, 4] {
                let mut cfg = base.clone();
                cfg.pipeline = pipeline;
                cfg.precompute = precompute;
                cfg.batch.max_batch = batch;
                let t0 = Instant::now();
                let dep = Deployment::start(&ing, &cfg).unwrap();
                let servers = dep.servers();
                // Four concurrent clients so that batches actually form.
                let workers: Vec<_> = (0..4)
                    .map(|w| {
                        let (domains, dict) = (domains.clone(), dict.clone());
                        std::thread::spawn(move || {
                            let mut r = ChaCha8Rng::seed_from_u64(w);
                            let mut bad = 0;
                            for d in domains.iter().skip(w as usize).step_by(4) {
                                match client::lookup(&servers, &dict, d, Duration::from_secs(300), &mut r) {
                                    Ok(rep) if rep.proof.record.domain == *d => {}
                                    Ok(_) => bad += 1,
                                    Err(e) => {
                                        say(format!("lookup {d}: {e}"));
                                        bad += 1;
                                    }
                                }
                            }
                            bad
                        })
                    })
                    .collect();
                let bad: usize = workers.into_iter().map(|h| h.join().unwrap()).sum();
                dep.stop().unwrap();
                say(format!(
                    "  pipeline={pipeline} precompute={precompute} batch={batch}: {} of 256 verified in {:.0} s",
                    256 - bad,
                    t0.elapsed().as_secs_f64()
                ));
                if bad > 0 {
                    failures.push(format!("{bad} failed with pipeline={pipeline} precompute={precompute} batch={batch}"));
                }
            }
        }
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    verdict(
        failures.is_empty() && mins < 30.0,
        format!("{} failing combinations, {mins:.1} min total {failures:?}", failures.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("1 oram matches array oracle", oram_oracle),
        ("2 stash stays bounded", stash_bound),
        ("3 merkle round trip and tamper", merkle),
        ("4 garbled circuits match plaintext", garbling),
        ("5 oblivious transfer hides the choice", oblivious_transfer),
        ("6 data server view is query independent", privacy),
        ("7 batches equal serial execution", batching),
        ("8 pipelining throughput trend", throughput),
        ("9 warm pools cut latency", precompute),
        ("10 end-to-end 256-domain sweep", sweep),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let t = Instant::now();
        let v = f();
        say(format!(
            "{} criterion {name}: {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        ));
        if !v.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
