//! Partial states: copy-on-write page tables, sealed snapshots, and the
//! visited set used to detect repeated (block, state) pairs.
//!
//! Pages are immutable once shared. Forking a snapshot clones one `Arc`;
//! the first write to a page in a working state copies it and logs the old
//! page handle, which is exactly what the incremental fingerprint update
//! needs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::fingerprint::{Fingerprint, FingerprintContext};
use crate::ir::{Program, NUM_REGS, PAGE_WORDS};

pub type StateId = u64;
pub type Regs = [u64; NUM_REGS];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("address {0} is outside every declared region")]
    OutOfRegion(u64),
    #[error("binding of {len} words at {base} extends outside declared regions")]
    BindingOutsideRegions { base: u64, len: usize },
}

#[derive(Default, Debug)]
struct PageCounters {
    live: AtomicU64,
    max_live: AtomicU64,
    total: AtomicU64,
    /// Copy-on-write faults, including those of states never sealed.
    faults: AtomicU64,
}

/// One 512-word page. Dropping the last handle releases it from the live count.
pub struct Page {
    words: Box<[u64]>,
    counters: Arc<PageCounters>,
}

impl Page {
    fn alloc(counters: &Arc<PageCounters>, words: Box<[u64]>) -> Arc<Page> {
        counters.total.fetch_add(1, Ordering::Relaxed);
        let live = counters.live.fetch_add(1, Ordering::Relaxed) + 1;
        counters.max_live.fetch_max(live, Ordering::Relaxed);
        Arc::new(Page {
            words,
            counters: counters.clone(),
        })
    }

    fn zeroed(counters: &Arc<PageCounters>) -> Arc<Page> {
        Self::alloc(counters, vec![0; PAGE_WORDS as usize].into_boxed_slice())
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

impl Drop for Page {
    fn drop(&mut self) {
        self.counters.live.fetch_sub(1, Ordering::Relaxed);
    }
}

impl std::fmt::Debug for Page {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nonzero = self.words.iter().filter(|w| **w != 0).count();
        write!(f, "Page({nonzero} nonzero words)")
    }
}

/// Page index to shared page; absent pages read as zero.
pub type PageTable = BTreeMap<u64, Arc<Page>>;

fn page_of(addr: u64) -> (u64, usize) {
    (addr / PAGE_WORDS, (addr % PAGE_WORDS) as usize)
}

fn read_table(table: &PageTable, addr: u64) -> u64 {
    let (idx, off) = page_of(addr);
    table.get(&idx).map_or(0, |p| p.words[off])
}

/// An immutable partial state.
#[derive(Debug)]
pub struct Snapshot {
    pub id: StateId,
    table: Arc<PageTable>,
    /// Supplied registers; registers holding delayed values are zero.
    pub regs: Regs,
    /// Present only when fingerprinting is enabled.
    pub fp: Option<Fingerprint>,
    pub parent: Option<StateId>,
}

impl Snapshot {
    pub fn read_word(&self, addr: u64) -> u64 {
        read_table(&self.table, addr)
    }

    /// Materialized pages in index order.
    pub fn pages(&self) -> impl Iterator<Item = (u64, &[u64])> {
        self.table.iter().map(|(i, p)| (*i, p.words()))
    }

    pub fn page_count(&self) -> usize {
        self.table.len()
    }

    fn page(&self, idx: u64) -> Option<&Arc<Page>> {
        self.table.get(&idx)
    }
}

/// A working copy opened from a snapshot.
pub struct MutableState {
    table: Arc<PageTable>,
    pub regs: Regs,
    parent: Option<Arc<Snapshot>>,
    /// First-write log: page index to the pre-image handle (None if the page was absent).
    dirty: BTreeMap<u64, Option<Arc<Page>>>,
    layout: Arc<Layout>,
    counters: Arc<PageCounters>,
    cow: bool,
    cow_faults: u64,
}

impl MutableState {
    pub fn read_word(&self, addr: u64) -> u64 {
        read_table(&self.table, addr)
    }

    pub fn write_word(&mut self, addr: u64, value: u64) -> Result<(), StoreError> {
        if !self.layout.contains(addr) {
            return Err(StoreError::OutOfRegion(addr));
        }
        let (idx, off) = page_of(addr);
        let table = Arc::make_mut(&mut self.table);
        if !self.dirty.contains_key(&idx) {
            let old = table.get(&idx).cloned();
            let words = match &old {
                Some(p) => p.words.clone(),
                None => vec![0; PAGE_WORDS as usize].into_boxed_slice(),
            };
            table.insert(idx, Page::alloc(&self.counters, words));
            self.dirty.insert(idx, old);
            // Without CoW the copy is the eager per-state copy, not a fault.
            if self.cow {
                self.cow_faults += 1;
                self.counters.faults.fetch_add(1, Ordering::Relaxed);
            }
        }
        let page = table.get_mut(&idx).expect("dirty page is present");
        let page = Arc::get_mut(page).expect("dirty page is private");
        page.words[off] = value;
        Ok(())
    }

    /// Page indices written since the fork, ascending.
    pub fn dirty_pages(&self) -> impl Iterator<Item = u64> + '_ {
        self.dirty.keys().copied()
    }

    pub fn cow_faults(&self) -> u64 {
        self.cow_faults
    }
}

/// Declared memory geometry shared by all states of one program.
#[derive(Debug)]
struct Layout {
    ranges: Vec<(u64, u64)>,
    mapped_pages: Vec<u64>,
    reg_page: u64,
}

impl Layout {
    fn contains(&self, addr: u64) -> bool {
        self.ranges.iter().any(|(lo, hi)| addr >= *lo && addr < *hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreConfig {
    pub cow: bool,
    pub fingerprint: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            cow: true,
            fingerprint: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Metrics {
    pub states_visited: u64,
    pub enqueues: u64,
    pub dedup_hits: u64,
    pub pages_allocated_total: u64,
    pub live_pages_max: u64,
    pub pages_hashed: u64,
    pub words_compared: u64,
    pub cow_faults: u64,
    pub wall_ms: u64,
}

impl Metrics {
    pub const KEYS: [&'static str; 9] = [
        "states_visited",
        "enqueues",
        "dedup_hits",
        "pages_allocated_total",
        "live_pages_max",
        "pages_hashed",
        "words_compared",
        "cow_faults",
        "wall_ms",
    ];

    pub fn get(&self, key: &str) -> Option<u64> {
        Some(match key {
            "states_visited" => self.states_visited,
            "enqueues" => self.enqueues,
            "dedup_hits" => self.dedup_hits,
            "pages_allocated_total" => self.pages_allocated_total,
            "live_pages_max" => self.live_pages_max,
            "pages_hashed" => self.pages_hashed,
            "words_compared" => self.words_compared,
            "cow_faults" => self.cow_faults,
            "wall_ms" => self.wall_ms,
            _ => return None,
        })
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).unwrap_or_default());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Fresh { id: StateId, tag: u128 },
    Duplicate { id: StateId, tag: u128 },
}

impl Admission {
    pub fn is_fresh(self) -> bool {
        matches!(self, Admission::Fresh { .. })
    }

    /// Residual label tag of the canonical state.
    pub fn tag(self) -> u128 {
        match self {
            Admission::Fresh { tag, .. } | Admission::Duplicate { tag, .. } => tag,
        }
    }
}

/// Owns page accounting, fingerprinting and the visited set for one run.
pub struct StateStore {
    cfg: StoreConfig,
    ctx: Option<FingerprintContext>,
    layout: Arc<Layout>,
    counters: Arc<PageCounters>,
    next_id: StateId,
    visited_fp: HashMap<(usize, Fingerprint), StateId>,
    visited_full: HashMap<usize, Vec<Arc<Snapshot>>>,
    pub metrics: Metrics,
}

impl StateStore {
    pub fn new(p: &Program, cfg: StoreConfig) -> Self {
        let ctx = cfg.fingerprint.then(FingerprintContext::standard);
        Self::build(p, cfg, ctx)
    }

    fn build(p: &Program, cfg: StoreConfig, ctx: Option<FingerprintContext>) -> Self {
        let layout = Layout {
            ranges: p.regions.iter().map(|r| (r.base, r.end())).collect(),
            mapped_pages: p.mapped_pages().into_iter().collect(),
            reg_page: p.total_pages(),
        };
        StateStore {
            cfg,
            ctx,
            layout: Arc::new(layout),
            counters: Arc::default(),
            next_id: 0,
            visited_fp: HashMap::new(),
            visited_full: HashMap::new(),
            metrics: Metrics::default(),
        }
    }

    pub fn config(&self) -> StoreConfig {
        self.cfg
    }

    pub fn context(&self) -> Option<&FingerprintContext> {
        self.ctx.as_ref()
    }

    /// Index of the register pseudo-page, one past the last memory page.
    pub fn reg_page_index(&self) -> u64 {
        self.layout.reg_page
    }

    pub fn live_pages(&self) -> u64 {
        self.counters.live.load(Ordering::Relaxed)
    }

    /// Counters with page accounting filled in.
    pub fn metrics(&self) -> Metrics {
        Metrics {
            pages_allocated_total: self.counters.total.load(Ordering::Relaxed),
            live_pages_max: self.counters.max_live.load(Ordering::Relaxed),
            cow_faults: self.counters.faults.load(Ordering::Relaxed),
            ..self.metrics.clone()
        }
    }

    fn fresh_id(&mut self) -> StateId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Zero state overlaid with `regs` and `(base, words)` region contents.
    /// Only pages holding a nonzero word are allocated and hashed.
    pub fn create_initial(&mut self, regs: Regs, regions: &[(u64, &[u64])]) -> Result<Arc<Snapshot>, StoreError> {
        let mut table = PageTable::new();
        for &(base, words) in regions {
            let last = base + words.len().max(1) as u64 - 1;
            if !words.is_empty() && !(self.layout.contains(base) && self.layout.contains(last)) {
                return Err(StoreError::BindingOutsideRegions { base, len: words.len() });
            }
            for (i, &w) in words.iter().enumerate() {
                if w == 0 {
                    continue;
                }
                let (idx, off) = page_of(base + i as u64);
                let page = table.entry(idx).or_insert_with(|| Page::zeroed(&self.counters));
                Arc::get_mut(page).expect("fresh page is private").words[off] = w;
            }
        }
        let fp = match &self.ctx {
            Some(ctx) => {
                let mut fp = ctx.page_term(self.layout.reg_page, &regs);
                for (idx, page) in &table {
                    fp = ctx.add(fp, ctx.page_term(*idx, page.words()));
                }
                self.metrics.pages_hashed += table.len() as u64 + 1;
                Some(fp)
            }
            None => None,
        };
        let id = self.fresh_id();
        Ok(Arc::new(Snapshot {
            id,
            table: Arc::new(table),
            regs,
            fp,
            parent: None,
        }))
    }

    /// Opens a working copy sharing every page with `s`.
    pub fn fork(&self, s: &Arc<Snapshot>) -> MutableState {
        MutableState {
            table: s.table.clone(),
            regs: s.regs,
            parent: Some(s.clone()),
            dirty: BTreeMap::new(),
            layout: self.layout.clone(),
            counters: self.counters.clone(),
            cow: self.cfg.cow,
            cow_faults: 0,
        }
    }

    /// Same as [`fork`](Self::fork); resuming a snapshot never copies.
    pub fn restore(&self, s: &Arc<Snapshot>) -> MutableState {
        self.fork(s)
    }

    /// Freezes a working state into a snapshot, updating its fingerprint
    /// from the dirty log.
    pub fn seal(&mut self, mut m: MutableState) -> Arc<Snapshot> {
        let parent = m.parent.take();

        if !self.cfg.cow {
            // Give the new state a private copy of every declared page.
            let table = Arc::make_mut(&mut m.table);
            for &idx in &self.layout.mapped_pages {
                if m.dirty.contains_key(&idx) {
                    continue;
                }
                let words = match table.get(&idx) {
                    Some(p) => p.words.clone(),
                    None => vec![0; PAGE_WORDS as usize].into_boxed_slice(),
                };
                table.insert(idx, Page::alloc(&self.counters, words));
            }
        }

        let fp = match (&self.ctx, &parent) {
            (Some(ctx), Some(parent)) => {
                let base = parent.fp.expect("parent sealed with fingerprinting");
                let zero = [0u64; 0];
                let mut changes: Vec<(u64, &[u64], &[u64])> = Vec::with_capacity(m.dirty.len() + 1);
                for (idx, old) in &m.dirty {
                    let old = old.as_ref().map_or(&zero[..], |p| p.words());
                    let new = m.table.get(idx).map_or(&zero[..], |p| p.words());
                    changes.push((*idx, old, new));
                }
                changes.push((self.layout.reg_page, &parent.regs, &m.regs));
                self.metrics.pages_hashed += 2 * changes.len() as u64;
                Some(
                    ctx.incremental_update(base, &changes)
                        .expect("dirty log has unique indices"),
                )
            }
            (Some(ctx), None) => {
                let pages = m.table.iter().map(|(i, p)| (*i, p.words()));
                let all = pages.chain(std::iter::once((self.layout.reg_page, &m.regs[..])));
                self.metrics.pages_hashed += m.table.len() as u64 + 1;
                Some(ctx.full_hash(all).expect("page table has unique indices"))
            }
            (None, _) => None,
        };

        let id = self.fresh_id();
        Arc::new(Snapshot {
            id,
            table: m.table,
            regs: m.regs,
            fp,
            parent: parent.map(|p| p.id),
        })
    }

    /// Looks up `(block, s)` in the visited set, inserting it if new.
    pub fn check_and_insert(&mut self, block: usize, s: &Arc<Snapshot>) -> Admission {
        if self.ctx.is_some() {
            let fp = s.fp.expect("fingerprinted snapshot");
            let tag = fp.0;
            return match self.visited_fp.get(&(block, fp)) {
                Some(&id) => {
                    self.metrics.dedup_hits += 1;
                    Admission::Duplicate { id, tag }
                }
                None => {
                    self.visited_fp.insert((block, fp), s.id);
                    Admission::Fresh { id: s.id, tag }
                }
            };
        }

        let retained = self.visited_full.entry(block).or_default();
        let mut words = 0u64;
        let mut found = None;
        for other in retained.iter() {
            if states_equal(s, other, &mut words) {
                found = Some(other.id);
                break;
            }
        }
        self.metrics.words_compared += words;
        match found {
            Some(id) => {
                self.metrics.dedup_hits += 1;
                Admission::Duplicate { id, tag: id as u128 }
            }
            None => {
                retained.push(s.clone());
                Admission::Fresh {
                    id: s.id,
                    tag: s.id as u128,
                }
            }
        }
    }
}

/// Word-by-word comparison, registers first, then pages in index order.
/// Shared or jointly absent pages are skipped; `words` counts words read.
pub fn states_equal(a: &Snapshot, b: &Snapshot, words: &mut u64) -> bool {
    for (x, y) in a.regs.iter().zip(&b.regs) {
        *words += 1;
        if x != y {
            return false;
        }
    }
    let mut indices: Vec<u64> = a.table.keys().chain(b.table.keys()).copied().collect();
    indices.sort_unstable();
    indices.dedup();
    let zero = [0u64; PAGE_WORDS as usize];
    for idx in indices {
        let (pa, pb) = (a.page(idx), b.page(idx));
        if let (Some(x), Some(y)) = (pa, pb) {
            if Arc::ptr_eq(x, y) {
                continue;
            }
        }
        let wa = pa.map_or(&zero[..], |p| p.words());
        let wb = pb.map_or(&zero[..], |p| p.words());
        for (x, y) in wa.iter().zip(wb) {
            *words += 1;
            if x != y {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
    use proptest::prelude::*;

    fn program(pages: u64) -> Program {
        parse_program(&format!(
            "program t\nregion mem scratch words={}\nblock L1:\n  halt\n",
            pages * PAGE_WORDS
        ))
        .unwrap()
    }

    fn store(pages: u64, cow: bool, fingerprint: bool) -> (Program, StateStore) {
        let p = program(pages);
        let s = StateStore::new(&p, StoreConfig { cow, fingerprint });
        (p, s)
    }

    /// Fingerprint recomputed from scratch over the materialized state.
    fn oracle_fp(st: &StateStore, s: &Snapshot) -> Fingerprint {
        let ctx = st.context().unwrap();
        let regs = std::iter::once((st.reg_page_index(), &s.regs[..]));
        ctx.full_hash(s.pages().chain(regs)).unwrap()
    }

    #[test]
    fn initial_state_without_inputs_hashes_registers_only() {
        let (_, mut st) = store(4, true, true);
        let s = st.create_initial([0; NUM_REGS], &[]).unwrap();
        assert_eq!(s.fp, Some(Fingerprint::ZERO));
        assert_eq!(st.metrics().pages_allocated_total, 0);
        assert_eq!(st.metrics.pages_hashed, 1);

        let mut regs = [0; NUM_REGS];
        regs[1] = 100;
        let s = st.create_initial(regs, &[]).unwrap();
        let ctx = st.context().unwrap();
        assert_eq!(s.fp, Some(ctx.page_term(st.reg_page_index(), &regs)));
    }

    #[test]
    fn initial_state_touches_nonzero_pages_only() {
        let (p, mut st) = store(8, true, true);
        let base = p.regions[0].base;
        let s = st.create_initial([0; NUM_REGS], &[(base, &[104, 97, 116, 0])]).unwrap();
        assert_eq!(s.page_count(), 1);
        assert_eq!(st.metrics.pages_hashed, 2);
        assert_eq!(s.fp, Some(oracle_fp(&st, &s)));
        let err = st
            .create_initial([0; NUM_REGS], &[(base + 8 * PAGE_WORDS - 1, &[1, 2])])
            .unwrap_err();
        assert!(matches!(err, StoreError::BindingOutsideRegions { .. }));
    }

    #[test]
    fn fork_and_seal_without_writes_keeps_fingerprint() {
        let (p, mut st) = store(2, true, true);
        let s = st.create_initial([7; NUM_REGS], &[(p.regions[0].base, &[1])]).unwrap();
        let m = st.fork(&s);
        let t = st.seal(m);
        assert_eq!(t.fp, s.fp);
        assert_eq!(t.parent, Some(s.id));
        assert_eq!(st.metrics().cow_faults, 0);
    }

    #[test]
    fn single_write_faults_once_and_leaves_parent_intact() {
        let (p, mut st) = store(2, true, true);
        let base = p.regions[0].base;
        let s = st.create_initial([0; NUM_REGS], &[(base, &[1])]).unwrap();
        let before = st.metrics();
        let mut m = st.fork(&s);
        m.write_word(base, 9).unwrap();
        m.write_word(base + 1, 10).unwrap();
        assert_eq!(m.cow_faults(), 1);
        let hashed = st.metrics.pages_hashed;
        let t = st.seal(m);
        assert_eq!(st.metrics.pages_hashed - hashed, 2 * (1 + 1));
        assert_eq!(st.metrics().pages_allocated_total - before.pages_allocated_total, 1);
        assert_eq!(s.read_word(base), 1);
        assert_eq!(t.read_word(base), 9);
        assert_eq!(t.fp, Some(oracle_fp(&st, &t)));
    }

    #[test]
    fn rewrite_of_original_value_still_dirty() {
        let (p, mut st) = store(1, true, true);
        let base = p.regions[0].base;
        let s = st.create_initial([0; NUM_REGS], &[(base, &[5])]).unwrap();
        let mut m = st.fork(&s);
        m.write_word(base, 6).unwrap();
        m.write_word(base, 5).unwrap();
        assert_eq!(m.dirty_pages().collect::<Vec<_>>(), vec![1]);
        let t = st.seal(m);
        assert_eq!(t.fp, s.fp);
    }

    #[test]
    fn two_forks_share_untouched_pages() {
        let (p, mut st) = store(4, true, false);
        let base = p.regions[0].base;
        let init: Vec<u64> = vec![1; (4 * PAGE_WORDS) as usize];
        let s = st.create_initial([0; NUM_REGS], &[(base, &init)]).unwrap();
        assert_eq!(st.live_pages(), 4);
        let mut a = st.fork(&s);
        let mut b = st.fork(&s);
        a.write_word(base, 2).unwrap();
        b.write_word(base + PAGE_WORDS, 3).unwrap();
        assert_eq!(st.live_pages(), 4 + 2);
        let (_sa, _sb) = (st.seal(a), st.seal(b));
        assert_eq!(st.live_pages(), 6);
    }

    #[test]
    fn reads_never_allocate_and_faults_are_reported() {
        let (p, mut st) = store(2, true, true);
        let s = st.create_initial([0; NUM_REGS], &[]).unwrap();
        let mut m = st.fork(&s);
        assert_eq!(m.read_word(p.regions[0].base + 700), 0);
        assert_eq!(st.live_pages(), 0);
        assert_eq!(m.write_word(3, 1), Err(StoreError::OutOfRegion(3)));
        assert_eq!(
            m.write_word(p.regions[0].end(), 1),
            Err(StoreError::OutOfRegion(p.regions[0].end()))
        );
    }

    #[test]
    fn no_cow_seal_copies_every_page() {
        let (p, mut st) = store(5, false, true);
        let base = p.regions[0].base;
        let s = st.create_initial([0; NUM_REGS], &[(base, &[1])]).unwrap();
        let before = st.metrics().pages_allocated_total;
        let mut m = st.fork(&s);
        m.write_word(base + 3 * PAGE_WORDS, 4).unwrap();
        let t = st.seal(m);
        assert_eq!(st.metrics().pages_allocated_total - before, 5);
        assert_eq!(t.fp, Some(oracle_fp(&st, &t)));
    }

    #[test]
    fn garbage_collected_when_snapshots_drop() {
        let (p, mut st) = store(2, true, true);
        let base = p.regions[0].base;
        let s = st.create_initial([0; NUM_REGS], &[(base, &[1])]).unwrap();
        let mut m = st.fork(&s);
        m.write_word(base, 2).unwrap();
        let t = st.seal(m);
        assert_eq!(st.live_pages(), 2);
        drop(t);
        assert_eq!(st.live_pages(), 1);
        assert_eq!(st.metrics().live_pages_max, 2);
    }

    #[test]
    fn duplicates_detected_in_both_modes() {
        for fingerprint in [true, false] {
            let (p, mut st) = store(2, true, fingerprint);
            let base = p.regions[0].base;
            let s = st.create_initial([0; NUM_REGS], &[(base, &[1])]).unwrap();
            assert!(st.check_and_insert(0, &s).is_fresh());
            assert!(!st.check_and_insert(0, &s).is_fresh());
            assert!(st.check_and_insert(1, &s).is_fresh(), "key includes block");

            let mut m = st.fork(&s);
            m.write_word(base + 600, 1).unwrap();
            let t = st.seal(m);
            let words = st.metrics.words_compared;
            assert!(st.check_and_insert(0, &t).is_fresh());
            if !fingerprint {
                assert!(st.metrics.words_compared > words);
            } else {
                assert_eq!(st.metrics.words_compared, 0);
            }

            // Same content reached through a different write history.
            let mut m = st.fork(&s);
            m.write_word(base + 600, 1).unwrap();
            m.write_word(base + 5, 0).unwrap();
            let u = st.seal(m);
            assert_eq!(
                st.check_and_insert(0, &u),
                Admission::Duplicate {
                    id: t.id,
                    tag: if fingerprint { t.fp.unwrap().0 } else { t.id as u128 },
                }
            );
            assert_eq!(st.metrics.dedup_hits, 2);
        }
    }

    #[test]
    fn metrics_render_stable_keys() {
        let m = Metrics {
            dedup_hits: 3,
            ..Metrics::default()
        };
        let text = m.to_kv();
        assert_eq!(text.lines().count(), 9);
        assert!(text.contains("dedup_hits=3\n"));
        assert_eq!(m.get("nope"), None);
    }

    #[derive(Clone, Debug)]
    enum Op {
        Write { state: usize, addr: u64, value: u64 },
        SetReg { state: usize, reg: usize, value: u64 },
        Seal { state: usize },
        Restore { snap: usize, state: usize },
    }

    fn ops(words: u64) -> impl Strategy<Value = Vec<Op>> {
        let op = prop_oneof![
            6 => (0..2usize, 0..words, prop_oneof![Just(0u64), any::<u64>()])
                .prop_map(|(state, addr, value)| Op::Write { state, addr, value }),
            1 => (0..2usize, 0..NUM_REGS, 0..4u64).prop_map(|(state, reg, value)| Op::SetReg { state, reg, value }),
            2 => (0..2usize).prop_map(|state| Op::Seal { state }),
            2 => (0..64usize, 0..2usize).prop_map(|(snap, state)| Op::Restore { snap, state }),
        ];
        prop::collection::vec(op, 1..80)
    }

    proptest! {
        // Two interleaved working states against flat-array oracles; every
        // sealed fingerprint checked against a from-scratch hash, and every
        // snapshot re-read after later mutations elsewhere.
        #[test]
        fn cow_transparency_and_fingerprint_oracle(seq in ops(3 * PAGE_WORDS), cow in any::<bool>()) {
            let (p, mut st) = store(3, cow, true);
            let base = p.regions[0].base;
            let init = st.create_initial([0; NUM_REGS], &[]).unwrap();
            let mut snaps: Vec<(Arc<Snapshot>, Vec<u64>, Regs)> =
                vec![(init.clone(), vec![0; (3 * PAGE_WORDS) as usize], [0; NUM_REGS])];
            let mut live: Vec<(MutableState, Vec<u64>)> =
                (0..2).map(|_| (st.fork(&init), vec![0; (3 * PAGE_WORDS) as usize])).collect();
            let mut discarded_faults = 0;

            for op in seq {
                match op {
                    Op::Write { state, addr, value } => {
                        let (m, flat) = &mut live[state];
                        m.write_word(base + addr, value).unwrap();
                        flat[addr as usize] = value;
                    }
                    Op::SetReg { state, reg, value } => live[state].0.regs[reg] = value,
                    Op::Seal { state } => {
                        let (m, flat) = std::mem::replace(&mut live[state], (st.fork(&init), vec![0; (3 * PAGE_WORDS) as usize]));
                        let regs = m.regs;
                        let s = st.seal(m);
                        prop_assert_eq!(s.fp, Some(oracle_fp(&st, &s)));
                        live[state] = (st.fork(&s), flat.clone());
                        snaps.push((s, flat, regs));
                    }
                    Op::Restore { snap, state } => {
                        let (s, flat, _) = &snaps[snap % snaps.len()];
                        let old = std::mem::replace(&mut live[state], (st.restore(s), flat.clone()));
                        discarded_faults += old.0.cow_faults();
                    }
                }
                for (m, flat) in &live {
                    for a in [0u64, 1, 511, 512, 1000, 1535] {
                        prop_assert_eq!(m.read_word(base + a), flat[a as usize]);
                    }
                }
            }
            for (s, flat, regs) in &snaps {
                prop_assert_eq!(&s.regs, regs);
                for (a, w) in flat.iter().enumerate() {
                    prop_assert_eq!(s.read_word(base + a as u64), *w);
                }
                prop_assert_eq!(s.fp, Some(oracle_fp(&st, s)));
            }
            if cow {
                let m = st.metrics();
                prop_assert!(m.pages_allocated_total <= m.cow_faults);
                let pending: u64 = live.iter().map(|(m, _)| m.cow_faults()).sum();
                prop_assert!(pending + discarded_faults <= m.cow_faults);
            }
        }

        // Bitwise-equal states are duplicates in both modes, and the two
        // modes agree on every decision.
        #[test]
        fn modes_agree_on_duplicate_decisions(
            writes in prop::collection::vec(prop::collection::vec((0..8u64, 0..3u64), 0..4), 1..24),
        ) {
            let (p, mut fps) = store(2, true, true);
            let (_, mut full) = store(2, true, false);
            let base = p.regions[0].base;
            let a0 = fps.create_initial([0; NUM_REGS], &[]).unwrap();
            let b0 = full.create_initial([0; NUM_REGS], &[]).unwrap();
            for w in writes {
                let mut ma = fps.fork(&a0);
                let mut mb = full.fork(&b0);
                for (addr, v) in w {
                    let addr = base + addr * 140;
                    ma.write_word(addr, v).unwrap();
                    mb.write_word(addr, v).unwrap();
                }
                let sa = fps.seal(ma);
                let sb = full.seal(mb);
                prop_assert_eq!(fps.check_and_insert(0, &sa).is_fresh(), full.check_and_insert(0, &sb).is_fresh());
            }
            prop_assert_eq!(fps.metrics.dedup_hits, full.metrics.dedup_hits);
        }
    }
}
