//! Work distribution: workers claim fixed-size tuple ranges from a shared cursor.

use std::sync::atomic::{AtomicU64, Ordering};

pub const DEFAULT_MORSEL: u64 = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Morsel {
    pub start: u64,
    pub len: u64,
}

impl Morsel {
    pub fn range(&self) -> std::ops::Range<u64> {
        self.start..self.start + self.len
    }
}

#[derive(Debug)]
pub struct MorselSource {
    cursor: AtomicU64,
    total: u64,
    morsel: u64,
}

impl MorselSource {
    pub fn new(total: u64, morsel: u64) -> MorselSource {
        assert!(morsel > 0);
        MorselSource {
            cursor: AtomicU64::new(0),
            total,
            morsel,
        }
    }

    /// Claims the next range, or `None` once the input is exhausted.
    pub fn next(&self) -> Option<Morsel> {
        let start = self.cursor.fetch_add(self.morsel, Ordering::Relaxed);
        if start >= self.total {
            return None;
        }
        Some(Morsel {
            start,
            len: self.morsel.min(self.total - start),
        })
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(total: u64, morsel: u64, threads: usize) -> Vec<Morsel> {
        let src = MorselSource::new(total, morsel);
        let mut all: Vec<Morsel> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..threads)
                .map(|_| {
                    s.spawn(|| {
                        let mut got = Vec::new();
                        while let Some(m) = src.next() {
                            got.push(m);
                        }
                        got
                    })
                })
                .collect();
            hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        all.sort_by_key(|m| m.start);
        all
    }

    #[test]
    fn empty_input() {
        assert!(MorselSource::new(0, 16).next().is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn disjoint_cover(total in 0u64..200_000, morsel in 1u64..20_000, threads in 1usize..5) {
            let all = trace(total, morsel, threads);
            let mut next = 0;
            for m in &all {
                prop_assert_eq!(m.start, next);
                prop_assert!(m.len >= 1 && m.len <= morsel);
                next = m.start + m.len;
            }
            prop_assert_eq!(next, total);
        }
    }
}
