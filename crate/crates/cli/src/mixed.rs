use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{anyhow, Result};
use clap::Args;
use lsmgraph::analytics;

use crate::dataset::DatasetArgs;
use crate::ingest::{self, Writer};
use crate::report::Report;
use crate::store::{self, StoreArgs};

#[derive(Args, Debug)]
pub struct MixedArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value_t = 8)]
    pub readers: usize,
    #[arg(long, default_value_t = 8)]
    pub writers: usize,
    /// Insertions per deletion; 0 disables deletions.
    #[arg(long, default_value_t = 20)]
    pub delete_ratio: u64,
    /// SSSP source.
    #[arg(long, default_value_t = 0)]
    pub src: u64,
}

pub fn run(store: &StoreArgs, args: &MixedArgs) -> Result<bool> {
    let edges = args.data.load()?;
    let e = store.open()?;
    let warm = args.data.warmup_len(edges.len());
    let mut team = Writer::team(args.writers.max(1), args.data.seed);
    ingest::apply(&e, &edges[..warm], &mut team, args.delete_ratio, false)?;

    let writers_done = AtomicBool::new(args.writers == 0);
    let runs = AtomicU64::new(0);
    let unstable = AtomicU64::new(0);
    let sssp_nanos = AtomicU64::new(0);
    let reader_error = Mutex::new(None);
    let write_time = std::thread::scope(|sc| {
        for _ in 0..args.readers {
            sc.spawn(|| loop {
                // every reader completes at least one run, even with no writers
                let snap = e.snapshot();
                let first = analytics::sssp(&e, &snap, args.src);
                let again = analytics::sssp(&e, &snap, args.src);
                match (first, again) {
                    (Ok(a), Ok(b)) => {
                        runs.fetch_add(1, Ordering::Relaxed);
                        sssp_nanos.fetch_add(a.elapsed.as_nanos() as u64, Ordering::Relaxed);
                        if a.checksum != b.checksum {
                            unstable.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    (Err(err), _) | (_, Err(err)) => {
                        reader_error.lock().unwrap().get_or_insert(err.to_string());
                        return;
                    }
                }
                if writers_done.load(Ordering::Relaxed) {
                    return;
                }
            });
        }
        if args.writers > 0 {
            let t = ingest::apply(&e, &edges[warm..], &mut team, args.delete_ratio, true);
            writers_done.store(true, Ordering::Relaxed);
            t
        } else {
            Ok(Duration::ZERO)
        }
    })?;
    if let Some(err) = reader_error.into_inner().unwrap() {
        return Err(anyhow!("sssp failed: {err}"));
    }

    let mut r = Report::default();
    let timed = if args.writers > 0 { edges.len() - warm } else { 0 };
    r.push("readers", args.readers);
    r.push("writers", args.writers);
    r.push("timed_edges", timed);
    ingest::push_totals(&mut r, &team);
    r.push("write_seconds", format!("{:.6}", write_time.as_secs_f64()));
    let rate = if timed == 0 { 0.0 } else { timed as f64 / write_time.as_secs_f64() };
    r.push("write_edges_per_sec", format!("{rate:.1}"));
    let h = ingest::merged_latency(&team);
    r.push("p99_ns", if h.is_empty() { 0 } else { h.value_at_quantile(0.99) });
    let n = runs.load(Ordering::Relaxed);
    r.push("sssp_runs", n);
    let mean = if n == 0 { 0.0 } else { sssp_nanos.load(Ordering::Relaxed) as f64 / n as f64 / 1e6 };
    r.push("sssp_mean_ms", format!("{mean:.3}"));
    let bad = unstable.load(Ordering::Relaxed);
    r.push("stability_failures", bad);
    store::push_engine_stats(&mut r, &e);
    e.close()?;
    r.print();
    Ok(bad == 0)
}
