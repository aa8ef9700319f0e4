//! Tuple generation, partitioning and order-independent checksums.

use serde::{Deserialize, Serialize};

/// Every tuple starts with its 8-byte little-endian join key.
pub const KEY_LEN: usize = 8;

pub fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Node owning `key`. Stable across processes and builds.
pub fn partition_of(key: u64, nodes: usize) -> usize {
    assert!(nodes >= 1);
    (fmix64(key) % nodes as u64) as usize
}

pub fn key_of(tuple: &[u8]) -> u64 {
    u64::from_le_bytes(tuple[..KEY_LEN].try_into().unwrap())
}

/// Join key of tuple `index` of `node`'s input.
pub fn key_at(seed: u64, node: usize, index: u64) -> u64 {
    fmix64(seed ^ fmix64(((node as u64) << 48) ^ index))
}

/// Fills `out` with tuple `index` of `node`'s input.
pub fn generate(seed: u64, node: usize, index: u64, out: &mut [u8]) {
    fill(key_at(seed, node, index), out)
}

/// Writes the tuple for `key`: the key followed by key-derived filler.
pub fn fill(key: u64, out: &mut [u8]) {
    let mut chunks = out.chunks_exact_mut(8);
    let mut w = key;
    for (j, c) in (&mut chunks).enumerate() {
        c.copy_from_slice(&w.to_le_bytes());
        w = key ^ (j as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
    let tail = chunks.into_remainder();
    let n = tail.len();
    tail.copy_from_slice(&w.to_le_bytes()[..n]);
}

/// Hash over all bytes of one tuple.
pub fn digest(tuple: &[u8]) -> u64 {
    const K: u64 = 0x517c_c1b7_2722_0a95;
    let mut h = 0u64;
    let mut chunks = tuple.chunks_exact(8);
    for c in &mut chunks {
        let w = u64::from_le_bytes(c.try_into().unwrap());
        h = (h.rotate_left(5) ^ w).wrapping_mul(K);
    }
    let mut tail = [0u8; 8];
    let rem = chunks.remainder();
    tail[..rem.len()].copy_from_slice(rem);
    h = (h.rotate_left(5) ^ u64::from_le_bytes(tail)).wrapping_mul(K);
    fmix64(h ^ tuple.len() as u64)
}

/// Multiset fingerprint: insensitive to tuple order, sensitive to any lost,
/// duplicated or altered tuple.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksum {
    pub tuples: u64,
    pub sum: u64,
}

impl Checksum {
    pub fn add(&mut self, tuple: &[u8]) {
        self.tuples += 1;
        self.sum = self.sum.wrapping_add(digest(tuple));
    }

    pub fn add_all(&mut self, payload: &[u8], width: usize) {
        for t in payload.chunks_exact(width) {
            self.add(t);
        }
    }

    pub fn merge(&mut self, other: &Checksum) {
        self.tuples += other.tuples;
        self.sum = self.sum.wrapping_add(other.sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_node_is_always_zero() {
        for k in [0, 1, u64::MAX, 12345] {
            assert_eq!(partition_of(k, 1), 0);
        }
    }

    #[test]
    fn partition_is_stable() {
        // Frozen values: a change here breaks mixed-version clusters.
        assert_eq!(fmix64(1), 0xb456_bcfc_34c2_cb2c);
        assert_eq!(partition_of(1, 6), 2);
        assert_eq!(partition_of(42, 7), partition_of(42, 7));
    }

    #[test]
    fn six_way_split_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0u64; 6];
        let n = 1_000_000;
        for _ in 0..n {
            counts[partition_of(rng.gen(), 6)] += 1;
        }
        let expect = n as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 99.9th percentile of chi-square with 5 degrees of freedom.
        assert!(chi2 < 20.52, "chi2 {chi2} counts {counts:?}");
        for c in counts {
            assert!((c as f64 / expect - 1.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn generated_tuples_carry_their_key() {
        for width in [64, 100, 4096] {
            let mut t = vec![0u8; width];
            generate(9, 2, 17, &mut t);
            let key = key_of(&t);
            let mut again = vec![0u8; width];
            generate(9, 2, 17, &mut again);
            assert_eq!(t, again);
            generate(9, 2, 18, &mut again);
            assert_ne!(key_of(&again), key);
            generate(9, 3, 17, &mut again);
            assert_ne!(key_of(&again), key);
        }
    }

    #[test]
    fn checksum_ignores_order_but_not_content() {
        let tuples: Vec<Vec<u8>> = (0..50)
            .map(|i| {
                let mut t = vec![0u8; 72];
                generate(1, 0, i, &mut t);
                t
            })
            .collect();
        let mut fwd = Checksum::default();
        tuples.iter().for_each(|t| fwd.add(t));
        let mut rev = Checksum::default();
        tuples.iter().rev().for_each(|t| rev.add(t));
        assert_eq!(fwd, rev);

        let mut dup = Checksum::default();
        tuples.iter().skip(1).for_each(|t| dup.add(t));
        dup.add(&tuples[2]);
        assert_eq!(dup.tuples, fwd.tuples);
        assert_ne!(dup.sum, fwd.sum);

        let mut flipped = tuples[7].clone();
        flipped[70] ^= 1;
        assert_ne!(digest(&flipped), digest(&tuples[7]));
    }
}
