#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use bytes::Bytes;
use lsmgraph::{Engine, EngineConfig, Snapshot};

/// Timestamp-keyed history of every edge write, evaluated naively at any `tau`.
#[derive(Default, Clone)]
pub struct Oracle {
    history: BTreeMap<(u64, u64), Vec<(u64, Option<Bytes>)>>,
}

impl Oracle {
    pub fn insert(&mut self, src: u64, dst: u64, ts: u64, prop: Bytes) {
        self.history.entry((src, dst)).or_default().push((ts, Some(prop)));
    }

    pub fn delete(&mut self, src: u64, dst: u64, ts: u64) {
        self.history.entry((src, dst)).or_default().push((ts, None));
    }

    fn at(h: &[(u64, Option<Bytes>)], tau: u64) -> Option<&(u64, Option<Bytes>)> {
        h.iter().filter(|r| r.0 <= tau).max_by_key(|r| r.0)
    }

    pub fn get(&self, src: u64, dst: u64, tau: u64) -> Option<Bytes> {
        self.history
            .get(&(src, dst))
            .and_then(|h| Self::at(h, tau))
            .and_then(|r| r.1.clone())
    }

    /// Visible `(dst, ts, prop)` of `src` at `tau`, ascending by dst.
    pub fn scan(&self, src: u64, tau: u64) -> Vec<(u64, u64, Bytes)> {
        self.history
            .range((src, 0)..=(src, u64::MAX))
            .filter_map(|(&(_, d), h)| {
                let (ts, p) = Self::at(h, tau)?;
                p.as_ref().map(|p| (d, *ts, p.clone()))
            })
            .collect()
    }

    pub fn sources(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.history.keys().map(|k| k.0).collect();
        s.dedup();
        s
    }

    pub fn live_dsts(&self, src: u64) -> Vec<u64> {
        self.scan(src, u64::MAX).into_iter().map(|r| r.0).collect()
    }
}

pub fn engine_scan(e: &Engine, src: u64, snap: &Snapshot) -> Vec<(u64, u64, Bytes)> {
    e.scan_neighbors(src, snap, true)
        .unwrap()
        .into_iter()
        .map(|n| (n.dst, n.ts, n.prop))
        .collect()
}

/// Every source the oracle knows, compared at the snapshot. Returns the first divergence.
pub fn diverges(e: &Engine, o: &Oracle, snap: &Snapshot) -> Option<(u64, Vec<(u64, u64, Bytes)>, Vec<(u64, u64, Bytes)>)> {
    for src in o.sources() {
        let got = engine_scan(e, src, snap);
        let want = o.scan(src, snap.tau());
        if got != want {
            return Some((src, got, want));
        }
    }
    None
}

/// Tiny budgets so a few thousand writes exercise flush and several levels.
pub fn small_config(dir: &Path) -> EngineConfig {
    let mut c = EngineConfig::new(dir);
    c.memgraph_bytes = 32 << 10;
    c.l0_limit = 2;
    c.level_factor = 3;
    c.max_levels = 3;
    c.segment_target_bytes = 4 << 10;
    c.background_threads = 0;
    c
}

pub fn prop_for(i: u64) -> Bytes {
    match i % 3 {
        0 => Bytes::new(),
        1 => Bytes::copy_from_slice(&i.to_le_bytes()),
        _ => Bytes::from(format!("p{i}")),
    }
}

pub struct ConcurrentReport {
    pub scans: u64,
    pub writes: u64,
    pub duplicates: u64,
    pub failures: u64,
    pub first_failure: Option<String>,
}

/// Writers own disjoint sources (`src % writers`) and hold their oracle's lock
/// across each engine write, so a reader that locks it after scanning at `tau`
/// sees every write of that writer with `ts <= tau`.
pub fn run_concurrent(
    e: &Engine,
    readers: usize,
    writers: usize,
    vertices: u64,
    duration: std::time::Duration,
    min_scans: u64,
    seed: u64,
) -> ConcurrentReport {
    use rand::{Rng, SeedableRng};
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use parking_lot::{Mutex, MutexGuard};
    use std::sync::Mutex as StdMutex;

    let oracles: Vec<Mutex<Oracle>> = (0..writers).map(|_| Mutex::new(Oracle::default())).collect();
    let stop = AtomicBool::new(false);
    let (scans, writes, dups, fails) = (AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0));
    let first = StdMutex::new(None);
    std::thread::scope(|sc| {
        for w in 0..writers {
            let (oracles, stop, writes) = (&oracles, &stop, &writes);
            sc.spawn(move || {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((w as u64 + 1) * 0x9e37));
                let mut i = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    let s = rng.gen_range(0..vertices / writers as u64) * writers as u64 + w as u64;
                    let mut o = oracles[w].lock();
                    if rng.gen_ratio(1, 21) {
                        let live = o.live_dsts(s);
                        if !live.is_empty() {
                            let d = live[rng.gen_range(0..live.len())];
                            let ts = e.delete_edge(s, d).unwrap();
                            o.delete(s, d, ts);
                            MutexGuard::unlock_fair(o);
                            continue;
                        }
                    }
                    let d = rng.gen_range(0..vertices);
                    let p = prop_for(i);
                    let ts = e.insert_edge(s, d, p.clone()).unwrap();
                    o.insert(s, d, ts, p);
                    // hand the lock to a waiting reader instead of re-taking it
                    MutexGuard::unlock_fair(o);
                    writes.fetch_add(1, Ordering::Relaxed);
                    i += 1;
                }
            });
        }
        for r in 0..readers {
            let (oracles, stop, scans, dups, fails, first) = (&oracles, &stop, &scans, &dups, &fails, &first);
            sc.spawn(move || {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((r as u64 + 101) * 0x51ed));
                while !stop.load(Ordering::Relaxed) {
                    let s = rng.gen_range(0..vertices);
                    let snap = e.snapshot();
                    let got = engine_scan(e, s, &snap);
                    let want = oracles[(s % writers as u64) as usize].lock().scan(s, snap.tau());
                    scans.fetch_add(1, Ordering::Relaxed);
                    if got.windows(2).any(|w| w[0].0 >= w[1].0) {
                        dups.fetch_add(1, Ordering::Relaxed);
                    }
                    if got != want {
                        fails.fetch_add(1, Ordering::Relaxed);
                        first.lock().unwrap().get_or_insert_with(|| {
                            format!("src {s} tau {}: got {got:?} want {want:?}", snap.tau())
                        });
                    }
                }
            });
        }
        // run for `duration`, then keep going (up to 3x) until enough scans were validated
        let start = std::time::Instant::now();
        std::thread::sleep(duration);
        while scans.load(Ordering::Relaxed) < min_scans && start.elapsed() < duration * 3 {
            std::thread::sleep(std::time::Duration::from_millis(100));
        }
        stop.store(true, Ordering::Relaxed);
    });
    ConcurrentReport {
        scans: scans.into_inner(),
        writes: writes.into_inner(),
        duplicates: dups.into_inner(),
        failures: fails.into_inner(),
        first_failure: first.into_inner().unwrap(),
    }
}
