//! Partitioned open-addressing probe table.
//!
//! Entries map a join key to a tuple reference, never to a payload copy.
//! Partition `p` belongs to worker `p % workers`; each worker builds its
//! partitions through its own [`TableShard`] without synchronization.

use thiserror::Error;

use crate::tuple::fmix64;

const EMPTY: u64 = u64::MAX;
const SALT: u64 = 0x2545_f491_4f6c_dd1d;

/// Inserts stop once a partition is this full.
pub const MAX_LOAD: f64 = 0.75;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("partition {partition} would exceed its load bound of {max} entries")]
    TableFull { partition: usize, max: usize },
    #[error("partition {partition} is owned by worker {owner}, not {worker}")]
    OwnershipViolation {
        partition: usize,
        owner: usize,
        worker: usize,
    },
}

/// Points at a tuple in receiver-side storage.
pub fn tref(chunk: u32, index: u32) -> u64 {
    (chunk as u64) << 32 | index as u64
}

pub fn tref_parts(t: u64) -> (u32, u32) {
    ((t >> 32) as u32, t as u32)
}

fn hash(key: u64) -> u64 {
    fmix64(key ^ SALT)
}

pub fn table_partition(key: u64, partitions: usize) -> usize {
    (hash(key) % partitions as u64) as usize
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    key: u64,
    tref: u64,
}

#[derive(Debug)]
struct Partition {
    slots: Vec<Slot>,
    len: usize,
    max: usize,
}

impl Partition {
    fn new(capacity: usize) -> Partition {
        let size = ((capacity as f64 / MAX_LOAD).ceil() as usize).max(2).next_power_of_two();
        Partition {
            slots: vec![Slot { key: 0, tref: EMPTY }; size],
            len: 0,
            max: (size as f64 * MAX_LOAD) as usize,
        }
    }

    fn mask(&self) -> usize {
        self.slots.len() - 1
    }

    fn insert_at(&mut self, mut i: usize, key: u64, tref: u64) {
        let mask = self.mask();
        while self.slots[i].tref != EMPTY {
            i = (i + 1) & mask;
        }
        self.slots[i] = Slot { key, tref };
        self.len += 1;
    }

    fn find(&self, key: u64, out: &mut Vec<u64>) {
        let mask = self.mask();
        let mut i = (hash(key) >> 32) as usize & mask;
        loop {
            let s = self.slots[i];
            if s.tref == EMPTY {
                return;
            }
            if s.key == key {
                out.push(s.tref);
            }
            i = (i + 1) & mask;
        }
    }
}

#[derive(Debug)]
pub struct TableShard {
    worker: usize,
    workers: usize,
    partitions: usize,
    /// Owned partitions, `local[i]` is global partition `worker + i * workers`.
    local: Vec<Partition>,
    scratch: Vec<(usize, usize)>,
    pending: Vec<usize>,
}

impl TableShard {
    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn len(&self) -> usize {
        self.local.iter().map(|p| p.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn owns(&self, key: u64) -> bool {
        table_partition(key, self.partitions) % self.workers == self.worker
    }

    /// Inserts `(key, tref)` pairs in two passes: slots for the whole batch
    /// are computed and checked first, then written. A failing batch inserts
    /// nothing.
    pub fn probe_insert_batch(&mut self, batch: &[(u64, u64)]) -> Result<(), TableError> {
        self.scratch.clear();
        for &(key, _) in batch {
            let h = hash(key);
            let p = (h % self.partitions as u64) as usize;
            if p % self.workers != self.worker {
                return Err(TableError::OwnershipViolation {
                    partition: p,
                    owner: p % self.workers,
                    worker: self.worker,
                });
            }
            let li = p / self.workers;
            let home = (h >> 32) as usize & self.local[li].mask();
            self.scratch.push((li, home));
        }
        let mut full = None;
        for &(li, _) in &self.scratch {
            self.pending[li] += 1;
            let part = &self.local[li];
            if full.is_none() && part.len + self.pending[li] > part.max {
                full = Some(li);
            }
        }
        for &(li, _) in &self.scratch {
            self.pending[li] = 0;
        }
        if let Some(li) = full {
            return Err(TableError::TableFull {
                partition: self.worker + li * self.workers,
                max: self.local[li].max,
            });
        }
        for (&(li, home), &(key, tref)) in self.scratch.iter().zip(batch) {
            self.local[li].insert_at(home, key, tref);
        }
        Ok(())
    }

    pub fn insert(&mut self, key: u64, tref: u64) -> Result<(), TableError> {
        self.probe_insert_batch(&[(key, tref)])
    }

    /// Appends the references stored under `key` to `out`.
    pub fn lookup(&self, key: u64, out: &mut Vec<u64>) {
        let p = table_partition(key, self.partitions);
        if p % self.workers == self.worker {
            self.local[p / self.workers].find(key, out);
        }
    }
}

/// All shards of one node's table, reassembled after the build.
#[derive(Debug)]
pub struct ProbeTable {
    shards: Vec<TableShard>,
}

impl ProbeTable {
    /// Splits `partitions` partitions of `capacity` entries each over `workers`.
    pub fn shards(partitions: usize, workers: usize, capacity: usize) -> Vec<TableShard> {
        assert!(workers >= 1 && partitions >= workers);
        (0..workers)
            .map(|w| {
                let owned = (w..partitions).step_by(workers).count();
                TableShard {
                    worker: w,
                    workers,
                    partitions,
                    local: (0..owned).map(|_| Partition::new(capacity)).collect(),
                    scratch: Vec::new(),
                    pending: vec![0; owned],
                }
            })
            .collect()
    }

    pub fn from_shards(mut shards: Vec<TableShard>) -> ProbeTable {
        shards.sort_by_key(|s| s.worker);
        ProbeTable { shards }
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, key: u64) -> Vec<u64> {
        let mut out = Vec::new();
        for s in &self.shards {
            s.lookup(key, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn batch_of_one_matches_single_insert() {
        let mut a = ProbeTable::shards(1, 1, 16).pop().unwrap();
        let mut b = ProbeTable::shards(1, 1, 16).pop().unwrap();
        a.insert(5, tref(1, 2)).unwrap();
        b.probe_insert_batch(&[(5, tref(1, 2))]).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.lookup(5, &mut x);
        b.lookup(5, &mut y);
        assert_eq!(x, vec![tref(1, 2)]);
        assert_eq!(x, y);
        assert_eq!(tref_parts(tref(1, 2)), (1, 2));
    }

    #[test]
    fn batched_inserts_match_map_oracle() {
        let workers = 4;
        let mut shards = ProbeTable::shards(32, workers, 100_000 / 32 * 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut oracle: HashMap<u64, Vec<u64>> = HashMap::new();
        let mut batches: Vec<Vec<(u64, u64)>> = vec![Vec::new(); workers];
        for i in 0..100_000u64 {
            // A small key domain forces duplicate keys.
            let key = rng.gen_range(0..60_000u64);
            let t = tref((i / 1000) as u32, (i % 1000) as u32);
            oracle.entry(key).or_default().push(t);
            let w = shards.iter().position(|s| s.owns(key)).unwrap();
            batches[w].push((key, t));
            if batches[w].len() == 64 {
                shards[w].probe_insert_batch(&batches[w]).unwrap();
                batches[w].clear();
            }
        }
        for (w, b) in batches.iter().enumerate() {
            shards[w].probe_insert_batch(b).unwrap();
        }
        let table = ProbeTable::from_shards(shards);
        assert_eq!(table.len(), 100_000);
        for key in 0..60_000u64 {
            let mut got = table.lookup(key);
            got.sort_unstable();
            let mut want = oracle.get(&key).cloned().unwrap_or_default();
            want.sort_unstable();
            assert_eq!(got, want, "key {key}");
        }
    }

    #[test]
    fn foreign_partition_is_rejected() {
        let mut shards = ProbeTable::shards(8, 2, 16);
        let key = (0..).find(|&k| !shards[0].owns(k)).unwrap();
        let err = shards[0].insert(key, 0).unwrap_err();
        assert!(matches!(err, TableError::OwnershipViolation { worker: 0, owner: 1, .. }));
        assert!(shards[0].is_empty());
    }

    #[test]
    fn full_partition_rejects_whole_batch() {
        let mut shard = ProbeTable::shards(1, 1, 6).pop().unwrap();
        // Capacity 6 at load 0.75 gives 8 slots and a bound of 6 entries.
        let batch: Vec<(u64, u64)> = (0..5).map(|k| (k, k)).collect();
        shard.probe_insert_batch(&batch).unwrap();
        let more: Vec<(u64, u64)> = (5..7).map(|k| (k, k)).collect();
        assert_eq!(
            shard.probe_insert_batch(&more),
            Err(TableError::TableFull { partition: 0, max: 6 })
        );
        assert_eq!(shard.len(), 5);
        shard.insert(5, 5).unwrap();
        assert_eq!(shard.len(), 6);
    }
}
