//! Differential check of the store against an in-memory oracle.
//!
//! The workload is a pure function of `(seed, vertices, delete_ratio)`: op `i`
//! is the same no matter how many ops or checkpoints a run uses, so a failing
//! run can be replayed exactly with a shorter `--ops`.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use bytes::Bytes;
use clap::Args;
use lsmgraph::{Engine, EngineConfig, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::Oracle;
use crate::report::Report;
use crate::store::StoreArgs;

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100_000)]
    pub ops: u64,
    /// Random points at which a snapshot is taken, the store flushed and compacted, and the snapshot compared.
    #[arg(long, default_value_t = 10)]
    pub snapshots: usize,
    #[arg(long, default_value_t = 1000)]
    pub vertices: u64,
    /// Insertions per deletion on average; 0 disables deletions.
    #[arg(long, default_value_t = 20)]
    pub delete_ratio: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug)]
struct Divergence {
    op_index: u64,
    src: u64,
    tau: u64,
    expected: String,
    got: String,
}

#[derive(Debug, Default)]
struct Totals {
    inserts: u64,
    deletes: u64,
}

fn render(v: &[(u64, Bytes)]) -> String {
    let mut s = String::from("[");
    for (i, (d, p)) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{d}");
        if !p.is_empty() {
            let _ = write!(s, ":{}", p.iter().map(|b| format!("{b:02x}")).collect::<String>());
        }
    }
    s.push(']');
    s
}

fn prop_for(i: u64) -> Bytes {
    if i % 2 == 0 {
        Bytes::new()
    } else {
        Bytes::copy_from_slice(&i.to_le_bytes())
    }
}

fn compare(e: &Engine, o: &Oracle, snap: &lsmgraph::Snapshot, vertices: u64, op_index: u64) -> Result<Option<Divergence>> {
    for src in 0..vertices {
        let got: Vec<(u64, Bytes)> = e
            .scan_neighbors(src, snap, true)?
            .into_iter()
            .map(|n| (n.dst, n.prop))
            .collect();
        let want = o.scan(src, snap.tau());
        if got != want {
            return Ok(Some(Divergence {
                op_index,
                src,
                tau: snap.tau(),
                expected: render(&want),
                got: render(&got),
            }));
        }
    }
    Ok(None)
}

/// Replays the first `ops` operations. Checkpoints are op indices after which
/// the store is compared; the final state is always compared.
fn replay(cfg: EngineConfig, args: &VerifyArgs, ops: u64, checkpoints: &[u64]) -> Result<(Option<Divergence>, Totals)> {
    let e = Engine::open(cfg)?;
    let mut o = Oracle::default();
    let mut t = Totals::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut next_cp = checkpoints.iter().copied().peekable();
    for i in 0..ops {
        let src = rng.gen_range(0..args.vertices);
        let delete = args.delete_ratio > 0 && rng.gen_ratio(1, args.delete_ratio as u32 + 1);
        let live = if delete { o.live_dsts(src) } else { Vec::new() };
        if !live.is_empty() {
            let dst = live[rng.gen_range(0..live.len())];
            match e.delete_edge(src, dst) {
                Ok(ts) => o.delete(src, dst, ts),
                Err(Error::NotFound) => {
                    let d = Divergence {
                        op_index: i,
                        src,
                        tau: u64::MAX,
                        expected: format!("edge {src}->{dst} present"),
                        got: "NotFound".into(),
                    };
                    return Ok((Some(d), t));
                }
                Err(err) => return Err(err.into()),
            }
            t.deletes += 1;
        } else {
            let dst = rng.gen_range(0..args.vertices);
            let ts = e.insert_edge(src, dst, prop_for(i))?;
            o.insert(src, dst, ts, prop_for(i));
            t.inserts += 1;
        }
        while next_cp.peek() == Some(&i) {
            next_cp.next();
            let snap = e.snapshot();
            // move the snapshot's data through flush and compaction before reading it
            e.flush()?;
            e.compact_until_idle()?;
            if let Some(d) = compare(&e, &o, &snap, args.vertices, i)? {
                return Ok((Some(d), t));
            }
        }
    }
    e.flush()?;
    e.compact_until_idle()?;
    let d = compare(&e, &o, &e.snapshot(), args.vertices, ops.saturating_sub(1))?;
    Ok((d, t))
}

pub fn run(store: &StoreArgs, args: &VerifyArgs) -> Result<bool> {
    if args.vertices == 0 {
        bail!("--vertices must be positive");
    }
    let scratch = tempfile::tempdir()?;
    let base = match &store.data_dir {
        Some(d) => {
            if d.exists() && std::fs::read_dir(d)?.next().is_some() {
                bail!("{} is not empty; verify needs a fresh store", d.display());
            }
            d.clone()
        }
        None => scratch.path().to_path_buf(),
    };
    let mut cp_rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x5eed_c0de);
    let mut checkpoints: Vec<u64> = if args.ops == 0 {
        Vec::new()
    } else {
        (0..args.snapshots).map(|_| cp_rng.gen_range(0..args.ops)).collect()
    };
    checkpoints.sort_unstable();

    let mut cfg = store.config(&base.join("run"));
    cfg.background_threads = 0;
    let (div, totals) = replay(cfg.clone(), args, args.ops, &checkpoints)?;
    let mut r = Report::default();
    r.push("seed", args.seed);
    r.push("ops", args.ops);
    r.push("snapshots", checkpoints.len());
    r.push("inserts", totals.inserts);
    r.push("deletes", totals.deletes);
    let Some(d) = div else {
        r.push("result", "PASS");
        r.print();
        return Ok(true);
    };

    // shortest prefix whose final state already diverges
    let (mut lo, mut hi) = (1, d.op_index + 1);
    let mut n = 0;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        n += 1;
        let mut c = cfg.clone();
        c.data_dir = base.join(format!("shrink{n}"));
        if replay(c, args, mid, &[])?.0.is_some() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut c = cfg.clone();
    c.data_dir = base.join("minimal");
    let minimal = replay(c, args, hi, &[])?.0;
    r.push("result", "FAIL");
    r.push("op_index", d.op_index);
    r.push("src", d.src);
    r.push("tau", d.tau);
    r.push("expected", &d.expected);
    r.push("got", &d.got);
    // the shortened prefix only counts when its final state reproduces the failure
    let (replay_ops, replay_snaps) = match minimal {
        Some(m) => {
            r.push("minimal_ops", hi);
            r.push("minimal_src", m.src);
            r.push("minimal_expected", m.expected);
            r.push("minimal_got", m.got);
            (hi, 0)
        }
        None => (args.ops, args.snapshots),
    };
    r.push(
        "replay",
        format!(
            "lsmgraph verify --seed {} --ops {replay_ops} --vertices {} --delete-ratio {} --snapshots {replay_snaps} {}",
            args.seed,
            args.vertices,
            args.delete_ratio,
            store.flags()
        ),
    );
    r.print();
    Ok(false)
}
