//! Pair samplers and the observation store they fill.
//!
//! URS-1 draws pairs uniformly with replacement, URS-2 sweeps every pair `m`
//! times and spends the remainder on distinct pairs, and
//! [`adaptive_query`] is the budget-metered oracle used by adaptive
//! strategies. All of them write into an [`ObservationStore`], which keeps
//! per-pair tallies keyed by the canonical pair `(v, w)` with `v < w`.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pair_count, SbmInstance};
use crate::rng::{rng_from_seed, SimRng};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairTally {
    pub samples: u64,
    pub positives: u64,
}

/// Decodes a linear pair index in `0..n(n-1)/2` into `(v, w)` with `v < w`.
/// Pairs are enumerated column-wise: index `w(w-1)/2 + v`.
pub fn decode_pair(index: u64) -> (usize, usize) {
    let mut w = ((1.0 + (1.0 + 8.0 * index as f64).sqrt()) / 2.0).floor() as u64;
    while w * (w - 1) / 2 > index {
        w -= 1;
    }
    while (w + 1) * w / 2 <= index {
        w += 1;
    }
    let v = index - w * (w - 1) / 2;
    (v as usize, w as usize)
}

pub fn encode_pair(v: usize, w: usize) -> u64 {
    let (v, w) = canonical(v, w);
    (w as u64) * (w as u64 - 1) / 2 + v as u64
}

fn canonical(v: usize, w: usize) -> (usize, usize) {
    if v < w {
        (v, w)
    } else {
        (w, v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStore {
    n: usize,
    tallies: HashMap<(usize, usize), PairTally>,
    total_used: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreRow {
    v: usize,
    w: usize,
    m: u64,
    s: u64,
}

impl ObservationStore {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            tallies: HashMap::new(),
            total_used: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn total_used(&self) -> u64 {
        self.total_used
    }

    /// Number of distinct pairs sampled at least once.
    pub fn len(&self) -> usize {
        self.tallies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tallies.is_empty()
    }

    pub fn record(&mut self, v: usize, w: usize, positive: bool) -> Result<()> {
        self.record_many(v, w, 1, u64::from(positive))
    }

    /// Records `samples` observations of one pair, `positives` of them positive.
    pub fn record_many(&mut self, v: usize, w: usize, samples: u64, positives: u64) -> Result<()> {
        if v == w || v >= self.n || w >= self.n {
            return Err(Error::InvalidPair { v, w, n: self.n });
        }
        if positives > samples {
            return Err(Error::InvalidParams(format!(
                "{positives} positives exceed {samples} samples on ({v}, {w})"
            )));
        }
        if samples == 0 {
            return Ok(());
        }
        let t = self.tallies.entry(canonical(v, w)).or_default();
        t.samples += samples;
        t.positives += positives;
        self.total_used += samples;
        Ok(())
    }

    pub fn tally(&self, v: usize, w: usize) -> PairTally {
        self.tallies
            .get(&canonical(v, w))
            .copied()
            .unwrap_or_default()
    }

    /// Sampled pairs in ascending `(v, w)` order.
    pub fn sorted_entries(&self) -> Vec<((usize, usize), PairTally)> {
        let mut entries: Vec<_> = self.tallies.iter().map(|(k, t)| (*k, *t)).collect();
        entries.sort_unstable_by_key(|e| e.0);
        entries
    }

    /// Writes the replay fixture: header `v,w,m,s`, one row per sampled pair.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for ((v, w), t) in self.sorted_entries() {
            wtr.serialize(StoreRow {
                v,
                w,
                m: t.samples,
                s: t.positives,
            })?;
        }
        if self.tallies.is_empty() {
            wtr.write_record(["v", "w", "m", "s"])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, n: usize) -> Result<Self> {
        let mut store = Self::new(n);
        let mut rdr = csv::Reader::from_reader(input);
        for row in rdr.deserialize() {
            let row: StoreRow = row?;
            store.record_many(row.v, row.w, row.m, row.s)?;
        }
        Ok(store)
    }
}

/// Budget ledger: `consumed <= total` at all times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetLedger {
    total: u64,
    consumed: u64,
}

impl BudgetLedger {
    pub fn new(total: u64) -> Self {
        Self { total, consumed: 0 }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.consumed
    }

    pub fn try_consume(&mut self) -> Result<()> {
        if self.consumed >= self.total {
            return Err(Error::BudgetExhausted { total: self.total });
        }
        self.consumed += 1;
        Ok(())
    }
}

fn require_pairs(inst: &SbmInstance) -> Result<u64> {
    if inst.n() < 2 {
        return Err(Error::InvalidParams("sampling needs at least two nodes".into()));
    }
    Ok(pair_count(inst.n()))
}

/// URS-1: `budget` pairs drawn uniformly with replacement.
pub fn urs1_run(inst: &SbmInstance, budget: u64, seed: u64) -> Result<ObservationStore> {
    let pairs = require_pairs(inst)?;
    let mut rng = rng_from_seed(seed);
    let mut store = ObservationStore::new(inst.n());
    for _ in 0..budget {
        let (v, w) = decode_pair(rng.random_range(0..pairs));
        let x = inst.interact(v, w, &mut rng);
        store.record(v, w, x)?;
    }
    Ok(store)
}

/// Partial Fisher-Yates over `0..population`: the first `count` entries of a
/// uniform shuffle, tracking only displaced slots.
pub fn sample_distinct(population: u64, count: u64, rng: &mut SimRng) -> Vec<u64> {
    assert!(count <= population);
    let mut displaced: HashMap<u64, u64> = HashMap::new();
    let mut picked = Vec::with_capacity(count as usize);
    for i in 0..count {
        let j = rng.random_range(i..population);
        let at_j = *displaced.get(&j).unwrap_or(&j);
        let at_i = *displaced.get(&i).unwrap_or(&i);
        displaced.insert(j, at_i);
        picked.push(at_j);
    }
    picked
}

/// URS-2: with `budget = m * n(n-1)/2 + r`, every pair is observed `m`
/// times and `r` distinct pairs, drawn without replacement, once more.
pub fn urs2_run(inst: &SbmInstance, budget: u64, seed: u64) -> Result<ObservationStore> {
    let pairs = require_pairs(inst)?;
    let (m, r) = (budget / pairs, budget % pairs);
    let mut rng = rng_from_seed(seed);
    let mut store = ObservationStore::new(inst.n());
    if m > 0 {
        for index in 0..pairs {
            let (v, w) = decode_pair(index);
            let positives = (0..m).filter(|_| inst.interact(v, w, &mut rng)).count() as u64;
            store.record_many(v, w, m, positives)?;
        }
    }
    for index in sample_distinct(pairs, r, &mut rng) {
        let (v, w) = decode_pair(index);
        let x = inst.interact(v, w, &mut rng);
        store.record(v, w, x)?;
    }
    Ok(store)
}

/// One budget-metered observation: charges the ledger, samples the pair and
/// records the outcome. Fails with [`Error::BudgetExhausted`] once the
/// ledger is spent, leaving the store untouched.
pub fn adaptive_query(
    inst: &SbmInstance,
    v: usize,
    w: usize,
    ledger: &mut BudgetLedger,
    store: &mut ObservationStore,
    rng: &mut SimRng,
) -> Result<bool> {
    let n = inst.n();
    if v == w || v >= n || w >= n {
        return Err(Error::InvalidPair { v, w, n });
    }
    ledger.try_consume()?;
    let x = inst.interact(v, w, rng);
    store.record(v, w, x)?;
    Ok(x)
}
