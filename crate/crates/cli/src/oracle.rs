use std::collections::BTreeMap;

use bytes::Bytes;

/// Every write ever made, keyed by edge, evaluated naively at a timestamp.
#[derive(Debug, Default)]
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

    /// Visible `(dst, prop)` of `src` at `tau`, ascending by dst.
    pub fn scan(&self, src: u64, tau: u64) -> Vec<(u64, Bytes)> {
        self.history
            .range((src, 0)..=(src, u64::MAX))
            .filter_map(|(&(_, d), h)| {
                let (_, p) = h.iter().filter(|r| r.0 <= tau).max_by_key(|r| r.0)?;
                p.as_ref().map(|p| (d, p.clone()))
            })
            .collect()
    }

    pub fn live_dsts(&self, src: u64) -> Vec<u64> {
        self.scan(src, u64::MAX).into_iter().map(|r| r.0).collect()
    }
}
