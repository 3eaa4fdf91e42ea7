//! Authenticated key/value state tree.
//!
//! Leaves are `(key, value)` digest pairs sorted by key and laid out in a
//! complete binary tree; the leaf row is padded to the next power of two
//! with [`empty_root`] so the root does not depend on insertion order.
//!
//! * leaf digest: `H(Leaf, key || value)`
//! * node digest: `H(Node, left || right)`
//! * empty tree: `H(Node, "")`
//!
//! Changing the value of an existing key rehashes one root path. Inserting
//! or removing a key shifts the sorted positions after it, so those
//! operations rehash the suffix of the tree to the right of the change.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::ledger::{hash, hash_parts, Digest, DomainTag};

/// Root of the empty tree, also used as the padding leaf.
pub fn empty_root() -> Digest {
    hash(DomainTag::Node, &[])
}

pub fn leaf_digest(key: &Digest, value: &Digest) -> Digest {
    hash_parts(DomainTag::Leaf, &[&key.0, &value.0])
}

fn node_digest(left: &Digest, right: &Digest) -> Digest {
    hash_parts(DomainTag::Node, &[&left.0, &right.0])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("duplicate key {0:?}")]
    DuplicateKey(Digest),
    #[error("key {0:?} is not in the tree")]
    KeyAbsent(Digest),
}

/// Which side of the running digest the sibling sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleProof {
    pub key: Digest,
    pub value: Digest,
    pub path: Vec<(Digest, Side)>,
    /// Root the proof was generated against.
    pub root_binding: Digest,
}

/// Fold the proof path from the leaf and compare with `root`.
pub fn verify(root: &Digest, proof: &MerkleProof) -> bool {
    let mut acc = leaf_digest(&proof.key, &proof.value);
    for (sibling, side) in &proof.path {
        acc = match side {
            Side::Left => node_digest(sibling, &acc),
            Side::Right => node_digest(&acc, sibling),
        };
    }
    acc == *root
}

/// Sorted binary Merkle tree with cached interior digests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateTree {
    keys: Vec<Digest>,
    values: Vec<Digest>,
    /// `levels[0]` is the padded leaf row, the last level holds the root.
    levels: Vec<Vec<Digest>>,
}

impl Default for StateTree {
    fn default() -> Self {
        Self::empty()
    }
}

impl StateTree {
    pub fn empty() -> Self {
        StateTree {
            keys: Vec::new(),
            values: Vec::new(),
            levels: Vec::new(),
        }
    }

    pub fn build(leaves: impl IntoIterator<Item = (Digest, Digest)>) -> Result<Self, MerkleError> {
        let mut pairs: Vec<(Digest, Digest)> = leaves.into_iter().collect();
        pairs.sort_by_key(|p| p.0);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(MerkleError::DuplicateKey(w[0].0));
            }
        }
        let (keys, values) = pairs.into_iter().unzip();
        let mut t = StateTree {
            keys,
            values,
            levels: Vec::new(),
        };
        t.rehash_from(0);
        Ok(t)
    }

    pub fn root(&self) -> Digest {
        match self.levels.last() {
            Some(top) => top[0],
            None => empty_root(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Number of siblings in a proof; `0` for a single leaf.
    pub fn height(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn get(&self, key: &Digest) -> Option<Digest> {
        self.keys.binary_search(key).ok().map(|i| self.values[i])
    }

    pub fn leaves(&self) -> impl Iterator<Item = (Digest, Digest)> + '_ {
        self.keys.iter().copied().zip(self.values.iter().copied())
    }

    pub fn prove(&self, key: &Digest) -> Result<MerkleProof, MerkleError> {
        let pos = self.keys.binary_search(key).map_err(|_| MerkleError::KeyAbsent(*key))?;
        let mut idx = pos;
        let mut path = Vec::with_capacity(self.height());
        for level in &self.levels[..self.height()] {
            let sib = idx ^ 1;
            let side = if sib < idx { Side::Left } else { Side::Right };
            path.push((level[sib], side));
            idx >>= 1;
        }
        Ok(MerkleProof {
            key: *key,
            value: self.values[pos],
            path,
            root_binding: self.root(),
        })
    }

    /// Copy-on-write update; inserts the key when absent.
    pub fn update(&self, key: Digest, value: Digest) -> StateTree {
        let mut next = self.clone();
        next.update_in_place(key, value);
        next
    }

    pub fn update_in_place(&mut self, key: Digest, value: Digest) {
        match self.keys.binary_search(&key) {
            Ok(i) => {
                if self.values[i] == value {
                    return;
                }
                self.values[i] = value;
                self.rehash_path(i);
            }
            Err(i) => {
                self.keys.insert(i, key);
                self.values.insert(i, value);
                self.rehash_from(i);
            }
        }
    }

    pub fn remove_in_place(&mut self, key: &Digest) -> Option<Digest> {
        let i = self.keys.binary_search(key).ok()?;
        self.keys.remove(i);
        let v = self.values.remove(i);
        self.rehash_from(i);
        Some(v)
    }

    fn padded_width(n: usize) -> usize {
        n.next_power_of_two()
    }

    fn rehash_path(&mut self, mut idx: usize) {
        self.levels[0][idx] = leaf_digest(&self.keys[idx], &self.values[idx]);
        for l in 1..self.levels.len() {
            idx >>= 1;
            let (lo, hi) = self.levels.split_at_mut(l);
            let below = &lo[l - 1];
            hi[0][idx] = node_digest(&below[2 * idx], &below[2 * idx + 1]);
        }
    }

    /// Recompute every digest covering leaf positions `>= start`.
    fn rehash_from(&mut self, start: usize) {
        let n = self.keys.len();
        if n == 0 {
            self.levels.clear();
            return;
        }
        let width = Self::padded_width(n);
        let depth = width.trailing_zeros() as usize + 1;
        let reshaped = self.levels.first().map(|r| r.len()) != Some(width);
        let start = if reshaped { 0 } else { start };
        if reshaped {
            self.levels = (0..depth).map(|l| vec![Digest::ZERO; width >> l]).collect();
        }
        let pad = empty_root();
        for i in start..width {
            self.levels[0][i] = if i < n {
                leaf_digest(&self.keys[i], &self.values[i])
            } else {
                pad
            };
        }
        let mut from = start;
        for l in 1..depth {
            from >>= 1;
            let (lo, hi) = self.levels.split_at_mut(l);
            let below = &lo[l - 1];
            for (i, slot) in hi[0].iter_mut().enumerate().skip(from) {
                *slot = node_digest(&below[2 * i], &below[2 * i + 1]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{Encoder, ObjectKind};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(n: u64) -> Digest {
        let mut e = Encoder::new(ObjectKind::AccountKey);
        e.u64(n);
        e.hash(DomainTag::Msg)
    }

    /// Independent recomputation: straightforward recursive root over the
    /// sorted, padded leaf row.
    fn naive_root(pairs: &[(Digest, Digest)]) -> Digest {
        if pairs.is_empty() {
            return empty_root();
        }
        let mut sorted = pairs.to_vec();
        sorted.sort();
        let mut row: Vec<Digest> = sorted.iter().map(|(k, v)| leaf_digest(k, v)).collect();
        while !row.len().is_power_of_two() {
            row.push(empty_root());
        }
        while row.len() > 1 {
            row = row.chunks(2).map(|c| node_digest(&c[0], &c[1])).collect();
        }
        row[0]
    }

    #[test]
    fn empty_and_single() {
        assert_eq!(StateTree::build([]).unwrap().root(), empty_root());
        assert_eq!(empty_root(), hash(DomainTag::Node, &[]));
        let t = StateTree::build([(d(1), d(2))]).unwrap();
        assert_eq!(t.root(), hash_parts(DomainTag::Leaf, &[&d(1).0, &d(2).0]));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = StateTree::build([(d(1), d(2)), (d(1), d(3))]).unwrap_err();
        assert_eq!(err, MerkleError::DuplicateKey(d(1)));
    }

    #[test]
    fn root_is_order_independent() {
        let pairs: Vec<_> = (0..8).map(|i| (d(i), d(100 + i))).collect();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        shuffled.swap(1, 5);
        let a = StateTree::build(pairs.clone()).unwrap();
        let b = StateTree::build(shuffled).unwrap();
        assert_eq!(a.root(), b.root());
        assert_eq!(a.root(), naive_root(&pairs));
    }

    #[test]
    fn prove_verify_round_trip_and_tamper() {
        let t = StateTree::build((0..16).map(|i| (d(i), d(i * 7)))).unwrap();
        let p = t.prove(&d(5)).unwrap();
        assert_eq!(p.path.len(), t.height());
        assert!(verify(&t.root(), &p));

        let mut bad = p.clone();
        bad.path[2].0 .0[0] ^= 1;
        assert!(!verify(&t.root(), &bad));

        let other = StateTree::build((0..16).map(|i| (d(i), d(i * 9)))).unwrap();
        assert!(!verify(&other.root(), &p));

        let mut short = p.clone();
        short.path.pop();
        assert!(!verify(&t.root(), &short));

        assert_eq!(t.prove(&d(99)).unwrap_err(), MerkleError::KeyAbsent(d(99)));
    }

    #[test]
    fn every_key_of_random_tree_proves() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let pairs: Vec<_> = (0..64).map(|_| (d(rng.random()), d(rng.random()))).collect();
        let t = StateTree::build(pairs.clone()).unwrap();
        for (k, _) in &pairs {
            assert!(verify(&t.root(), &t.prove(k).unwrap()));
        }
    }

    #[test]
    fn update_cases() {
        let t = StateTree::build((0..5).map(|i| (d(i), d(i)))).unwrap();
        assert_eq!(t.update(d(3), d(3)).root(), t.root());
        assert_eq!(StateTree::empty().update(d(1), d(2)).root(), leaf_digest(&d(1), &d(2)));
    }

    #[test]
    fn hundred_random_mutations_match_rebuild() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = StateTree::empty();
        let mut model: Vec<(Digest, Digest)> = Vec::new();
        for _ in 0..100 {
            let k = d(rng.random_range(0..40));
            let v = d(rng.random());
            t.update_in_place(k, v);
            match model.iter_mut().find(|(mk, _)| *mk == k) {
                Some(slot) => slot.1 = v,
                None => model.push((k, v)),
            }
            model.shuffle(&mut rng);
            assert_eq!(t.root(), StateTree::build(model.clone()).unwrap().root());
            assert_eq!(t.root(), naive_root(&model));
        }
    }

    #[test]
    fn perturbed_value_never_verifies() {
        let pairs: Vec<_> = (0..6).map(|i| (d(i), d(i + 50))).collect();
        let t = StateTree::build(pairs.clone()).unwrap();
        for (k, _) in &pairs {
            let p = t.prove(k).unwrap();
            for alt in 0..32 {
                let mut forged = p.clone();
                forged.value = d(1000 + alt);
                assert!(!verify(&t.root(), &forged));
            }
        }
    }

    #[test]
    fn remove_matches_rebuild() {
        let mut t = StateTree::build((0..9).map(|i| (d(i), d(i)))).unwrap();
        t.remove_in_place(&d(4));
        let expect = StateTree::build((0..9).filter(|&i| i != 4).map(|i| (d(i), d(i)))).unwrap();
        assert_eq!(t.root(), expect.root());
        assert_eq!(t.height(), 3);
    }
}
