use std::time::{Duration, Instant};

use anyhow::Result;
use clap::Args;
use hdrhistogram::Histogram;
use lsmgraph::hash::mix64;
use lsmgraph::{analytics, Engine, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetArgs, Edge};
use crate::report::Report;
use crate::store::{self, StoreArgs};

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Insertions per deletion; 0 disables deletions.
    #[arg(long, default_value_t = 0)]
    pub delete_ratio: u64,
}

/// One writer's share of a workload. Each source vertex belongs to exactly one
/// writer, so the final graph does not depend on thread interleaving.
pub struct Writer {
    rng: ChaCha8Rng,
    inserted: Vec<(u64, u64)>,
    since_delete: u64,
    pub inserts: u64,
    pub deletes: u64,
    pub delete_misses: u64,
    pub latency: Histogram<u64>,
}

impl Writer {
    pub fn team(n: usize, seed: u64) -> Vec<Writer> {
        (0..n)
            .map(|i| Writer {
                rng: ChaCha8Rng::seed_from_u64(mix64(seed ^ (i as u64) << 32)),
                inserted: Vec::new(),
                since_delete: 0,
                inserts: 0,
                deletes: 0,
                delete_misses: 0,
                latency: Histogram::new(3).expect("valid precision"),
            })
            .collect()
    }

    fn step(&mut self, e: &Engine, edge: &Edge, delete_ratio: u64, timed: bool) -> lsmgraph::Result<()> {
        let t = Instant::now();
        e.insert_edge(edge.src, edge.dst, edge.prop())?;
        if timed {
            self.latency.saturating_record(t.elapsed().as_nanos().max(1) as u64);
        }
        self.inserts += 1;
        self.inserted.push((edge.src, edge.dst));
        self.since_delete += 1;
        if delete_ratio > 0 && self.since_delete >= delete_ratio {
            self.since_delete = 0;
            let (s, d) = self.inserted.swap_remove(self.rng.gen_range(0..self.inserted.len()));
            match e.delete_edge(s, d) {
                Ok(_) => self.deletes += 1,
                Err(Error::NotFound) => self.delete_misses += 1,
                Err(err) => return Err(err),
            }
        }
        Ok(())
    }
}

fn owner(src: u64, writers: usize) -> usize {
    (mix64(src) % writers as u64) as usize
}

/// Applies `edges` with one thread per writer.
pub fn apply(e: &Engine, edges: &[Edge], team: &mut [Writer], delete_ratio: u64, timed: bool) -> Result<Duration> {
    let n = team.len();
    let start = Instant::now();
    std::thread::scope(|sc| {
        let handles: Vec<_> = team
            .iter_mut()
            .enumerate()
            .map(|(i, w)| {
                sc.spawn(move || {
                    for edge in edges.iter().filter(|x| owner(x.src, n) == i) {
                        w.step(e, edge, delete_ratio, timed)?;
                    }
                    Ok::<_, Error>(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("writer thread panicked"))
    })?;
    Ok(start.elapsed())
}

pub fn merged_latency(team: &[Writer]) -> Histogram<u64> {
    let mut h = Histogram::new(3).expect("valid precision");
    for w in team {
        h.add(&w.latency).expect("same precision");
    }
    h
}

pub fn push_totals(r: &mut Report, team: &[Writer]) {
    r.push("inserted", team.iter().map(|w| w.inserts).sum::<u64>());
    r.push("deleted", team.iter().map(|w| w.deletes).sum::<u64>());
    r.push("delete_misses", team.iter().map(|w| w.delete_misses).sum::<u64>());
}

pub fn run(store: &StoreArgs, args: &IngestArgs) -> Result<bool> {
    let edges = args.data.load()?;
    let e = store.open()?;
    let warm = args.data.warmup_len(edges.len());
    let mut team = Writer::team(store.threads.max(1), args.data.seed);
    apply(&e, &edges[..warm], &mut team, args.delete_ratio, false)?;
    let io_before = e.io_counters();
    let elapsed = apply(&e, &edges[warm..], &mut team, args.delete_ratio, true)?;
    e.flush()?;

    let mut r = Report::default();
    let timed = edges.len() - warm;
    r.push("edges", edges.len());
    r.push("warmup_edges", warm);
    r.push("timed_edges", timed);
    push_totals(&mut r, &team);
    r.push("timed_seconds", format!("{:.6}", elapsed.as_secs_f64()));
    let rate = if timed == 0 { 0.0 } else { timed as f64 / elapsed.as_secs_f64() };
    r.push("edges_per_sec", format!("{rate:.1}"));
    let h = merged_latency(&team);
    r.push("p50_ns", if h.is_empty() { 0 } else { h.value_at_quantile(0.5) });
    r.push("p99_ns", if h.is_empty() { 0 } else { h.value_at_quantile(0.99) });
    r.push("timed_bytes_written", (e.io_counters() - io_before).bytes_written);
    let scan = analytics::scan_all(&e, &e.snapshot())?;
    r.push("live_edges", scan.edges);
    r.push("checksum", format!("{:#018x}", scan.checksum));
    store::push_engine_stats(&mut r, &e);
    e.close()?;
    r.print();
    Ok(true)
}
