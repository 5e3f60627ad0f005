use anyhow::Result;
use clap::{Args, ValueEnum};
use lsmgraph::analytics::{self, AnalysisResult, Values};
use lsmgraph::{Engine, Snapshot};

use crate::report::Report;
use crate::store::StoreArgs;

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Bfs,
    Sssp,
    Cc,
    Scan,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub algo: Algo,
    /// Source vertex for bfs and sssp.
    #[arg(long, default_value_t = 0)]
    pub src: u64,
}

pub fn execute(e: &Engine, snap: &Snapshot, algo: Algo, src: u64) -> lsmgraph::Result<AnalysisResult> {
    match algo {
        Algo::Bfs => analytics::bfs(e, snap, src),
        Algo::Sssp => analytics::sssp(e, snap, src),
        Algo::Cc => analytics::cc(e, snap),
        Algo::Scan => analytics::scan_all(e, snap),
    }
}

pub fn run(store: &StoreArgs, args: &AnalyzeArgs) -> Result<bool> {
    let mut s = store.clone();
    // no background work, so the I/O delta belongs to the algorithm alone
    s.background_threads = 0;
    let e = s.open()?;
    let snap = e.snapshot();
    let res = execute(&e, &snap, args.algo, args.src)?;

    let mut r = Report::default();
    r.push("algo", format!("{:?}", args.algo).to_lowercase());
    if matches!(args.algo, Algo::Bfs | Algo::Sssp) {
        r.push("src", args.src);
    }
    r.push("snapshot", snap.tau());
    r.push("vertices", snap.vertex_bound());
    r.push("visited", res.visited);
    r.push("edges", res.edges);
    if let Values::Labels(l) = &res.values {
        r.push("components", analytics::component_count(l));
    }
    r.push("runtime_ms", format!("{:.3}", res.elapsed.as_secs_f64() * 1e3));
    r.push("bytes_read", res.io.bytes_read);
    r.push("blocks_read", res.io.blocks_read);
    r.push("read_calls", res.io.read_calls);
    r.push("checksum", format!("{:#018x}", res.checksum));
    r.print();
    Ok(true)
}
