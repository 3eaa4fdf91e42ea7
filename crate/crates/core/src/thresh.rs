//! Simulated t-of-n threshold signatures.
//!
//! A partial signature is a keyed hash of the signer's secret share and the
//! message digest. Verification recomputes it from the registry, which
//! plays the role of a trusted oracle: only code holding the
//! [`ShareRegistry`] (or a [`Signer`] handed out from it) can produce valid
//! partials. Adversary code is only ever given the signers of corrupt
//! parties, so honest shares are out of its reach by construction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::ledger::{hash, hash_parts, Digest, DomainTag, Encoder, ObjectKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SignerId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ThreshError {
    #[error("threshold {t} invalid for {n} signers")]
    BadThreshold { n: usize, t: usize },
    #[error("unknown signer {0:?}")]
    UnknownSigner(SignerId),
    #[error("only {valid} valid partials, {needed} needed")]
    InsufficientShares { valid: usize, needed: usize },
    #[error("partials cover more than one message")]
    MixedMessages,
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Share([u8; 32]);

impl fmt::Debug for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Share(<redacted>)")
    }
}

fn share_commitment(share: &Share) -> Digest {
    hash(DomainTag::Share, &share.0)
}

fn partial_sig(share: &Share, msg: &Digest) -> Digest {
    hash_parts(DomainTag::Share, &[&share.0, &msg.0])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareRegistry {
    pub group_id: u64,
    t: usize,
    seed: u64,
    shares: BTreeMap<SignerId, Share>,
    commitments: BTreeMap<SignerId, Digest>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartialSignature {
    pub signer: SignerId,
    pub message_digest: Digest,
    pub sig: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ThresholdSignatureValue {
    pub message_digest: Digest,
    pub signer_set: Vec<SignerId>,
    pub agg: Digest,
}

/// Signing capability for exactly one party.
#[derive(Clone, PartialEq, Eq)]
pub struct Signer {
    id: SignerId,
    share: Share,
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signer").field("id", &self.id).finish_non_exhaustive()
    }
}

impl Signer {
    pub fn id(&self) -> SignerId {
        self.id
    }

    pub fn sign(&self, message_digest: Digest) -> PartialSignature {
        PartialSignature {
            signer: self.id,
            message_digest,
            sig: partial_sig(&self.share, &message_digest),
        }
    }
}

fn derive_share(group_id: u64, seed: u64, id: SignerId) -> Share {
    let mut e = Encoder::new(ObjectKind::ShareSeed);
    e.u64(group_id).u64(seed).u32(id.0);
    Share(e.hash(DomainTag::Share).0)
}

impl ShareRegistry {
    /// Shares for signers `0..n`, derived deterministically from `seed`.
    pub fn keygen(group_id: u64, n: usize, t: usize, seed: u64) -> Result<Self, ThreshError> {
        let ids: Vec<SignerId> = (0..n as u32).map(SignerId).collect();
        Self::keygen_for(group_id, &ids, t, seed)
    }

    pub fn keygen_for(group_id: u64, ids: &[SignerId], t: usize, seed: u64) -> Result<Self, ThreshError> {
        let n = ids.iter().collect::<BTreeSet<_>>().len();
        if t == 0 || t > n || n != ids.len() {
            return Err(ThreshError::BadThreshold { n: ids.len(), t });
        }
        let mut reg = ShareRegistry {
            group_id,
            t,
            seed,
            shares: BTreeMap::new(),
            commitments: BTreeMap::new(),
        };
        for &id in ids {
            reg.enroll(id);
        }
        Ok(reg)
    }

    /// Add a signer whose share follows from the registry seed. Idempotent.
    pub fn enroll(&mut self, id: SignerId) {
        let share = derive_share(self.group_id, self.seed, id);
        self.commitments.insert(id, share_commitment(&share));
        self.shares.insert(id, share);
    }

    pub fn n(&self) -> usize {
        self.shares.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn contains(&self, id: SignerId) -> bool {
        self.shares.contains_key(&id)
    }

    pub fn signer_ids(&self) -> impl Iterator<Item = SignerId> + '_ {
        self.shares.keys().copied()
    }

    pub fn commitment(&self, id: SignerId) -> Option<Digest> {
        self.commitments.get(&id).copied()
    }

    /// Hand out one party's signing capability.
    pub fn signer(&self, id: SignerId) -> Option<Signer> {
        self.shares.get(&id).map(|&share| Signer { id, share })
    }

    pub fn partial_sign(&self, signer: SignerId, message_digest: Digest) -> Result<PartialSignature, ThreshError> {
        self.signer(signer)
            .map(|s| s.sign(message_digest))
            .ok_or(ThreshError::UnknownSigner(signer))
    }

    pub fn verify_partial(&self, p: &PartialSignature) -> bool {
        match self.shares.get(&p.signer) {
            Some(share) => {
                share_commitment(share) == self.commitments[&p.signer] && partial_sig(share, &p.message_digest) == p.sig
            }
            None => false,
        }
    }

    /// Combine using the registry threshold over all enrolled signers.
    pub fn combine(&self, partials: &[PartialSignature]) -> Result<ThresholdSignatureValue, ThreshError> {
        self.combine_with(partials, self.t, None)
    }

    /// Combine with an explicit threshold, optionally restricted to an
    /// eligible signer set (partials from others are dropped).
    pub fn combine_with(
        &self,
        partials: &[PartialSignature],
        threshold: usize,
        eligible: Option<&BTreeSet<SignerId>>,
    ) -> Result<ThresholdSignatureValue, ThreshError> {
        let Some(first) = partials.first() else {
            return Err(ThreshError::InsufficientShares {
                valid: 0,
                needed: threshold,
            });
        };
        let msg = first.message_digest;
        if partials.iter().any(|p| p.message_digest != msg) {
            return Err(ThreshError::MixedMessages);
        }
        let valid: BTreeMap<SignerId, Digest> = partials
            .iter()
            .filter(|p| eligible.is_none_or(|e| e.contains(&p.signer)))
            .filter(|p| self.verify_partial(p))
            .map(|p| (p.signer, p.sig))
            .collect();
        if valid.len() < threshold.max(1) {
            return Err(ThreshError::InsufficientShares {
                valid: valid.len(),
                needed: threshold,
            });
        }
        let sigs: Vec<&Digest> = valid.values().collect();
        Ok(ThresholdSignatureValue {
            message_digest: msg,
            signer_set: valid.keys().copied().collect(),
            agg: aggregate(sigs),
        })
    }

    pub fn verify_threshold(&self, sigma: &ThresholdSignatureValue) -> bool {
        self.verify_threshold_with(sigma, self.t, None)
    }

    pub fn verify_threshold_with(
        &self,
        sigma: &ThresholdSignatureValue,
        threshold: usize,
        eligible: Option<&BTreeSet<SignerId>>,
    ) -> bool {
        if sigma.signer_set.len() < threshold.max(1) {
            return false;
        }
        if sigma.signer_set.windows(2).any(|w| w[0] >= w[1]) {
            return false;
        }
        let mut sigs = Vec::with_capacity(sigma.signer_set.len());
        for id in &sigma.signer_set {
            if eligible.is_some_and(|e| !e.contains(id)) {
                return false;
            }
            match self.shares.get(id) {
                Some(share) => sigs.push(partial_sig(share, &sigma.message_digest)),
                None => return false,
            }
        }
        aggregate(sigs.iter()) == sigma.agg
    }
}

fn aggregate<'a>(sigs: impl IntoIterator<Item = &'a Digest>) -> Digest {
    let mut e = Encoder::new(ObjectKind::ShareSeed);
    for s in sigs {
        e.digest(s);
    }
    e.hash(DomainTag::Share)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn msg(n: u8) -> Digest {
        hash(DomainTag::Tx, &[n])
    }

    #[test]
    fn keygen_is_deterministic_and_committed() {
        let a = ShareRegistry::keygen(9, 5, 3, 42).unwrap();
        let b = ShareRegistry::keygen(9, 5, 3, 42).unwrap();
        assert_eq!(a, b);
        for (id, share) in &a.shares {
            assert_eq!(a.commitments[id], hash(DomainTag::Share, &share.0));
        }
        assert_eq!(
            ShareRegistry::keygen(9, 3, 4, 42).unwrap_err(),
            ThreshError::BadThreshold { n: 3, t: 4 }
        );
        assert!(ShareRegistry::keygen(9, 3, 0, 42).is_err());
    }

    #[test]
    fn partial_round_trip() {
        let r = ShareRegistry::keygen(1, 5, 3, 7).unwrap();
        let p = r.partial_sign(SignerId(2), msg(1)).unwrap();
        assert!(r.verify_partial(&p));
        let q = r.partial_sign(SignerId(2), msg(2)).unwrap();
        assert_ne!(p.sig, q.sig);
        assert_eq!(
            r.partial_sign(SignerId(9), msg(1)).unwrap_err(),
            ThreshError::UnknownSigner(SignerId(9))
        );
        let mut tampered = p;
        tampered.message_digest = msg(3);
        assert!(!r.verify_partial(&tampered));
        let mut stranger = p;
        stranger.signer = SignerId(77);
        assert!(!r.verify_partial(&stranger));
    }

    #[test]
    fn random_forgeries_fail() {
        let r = ShareRegistry::keygen(1, 5, 3, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let forged = PartialSignature {
                signer: SignerId(rng.random_range(0..5)),
                message_digest: msg(1),
                sig: Digest(rng.random()),
            };
            let genuine = r.partial_sign(forged.signer, msg(1)).unwrap();
            assert_eq!(r.verify_partial(&forged), forged.sig == genuine.sig);
            assert!(!r.verify_partial(&forged));
        }
    }

    #[test]
    fn combine_threshold_cases() {
        let r = ShareRegistry::keygen(1, 5, 3, 7).unwrap();
        let ps: Vec<_> = (0..3).map(|i| r.partial_sign(SignerId(i), msg(5)).unwrap()).collect();
        let sigma = r.combine(&ps).unwrap();
        assert!(r.verify_threshold(&sigma));

        assert_eq!(
            r.combine(&ps[..2]).unwrap_err(),
            ThreshError::InsufficientShares { valid: 2, needed: 3 }
        );

        let mut with_forgery = ps[..2].to_vec();
        with_forgery.push(PartialSignature {
            signer: SignerId(4),
            message_digest: msg(5),
            sig: Digest([7; 32]),
        });
        assert_eq!(
            r.combine(&with_forgery).unwrap_err(),
            ThreshError::InsufficientShares { valid: 2, needed: 3 }
        );

        let mixed = vec![ps[0], r.partial_sign(SignerId(1), msg(6)).unwrap()];
        assert_eq!(r.combine(&mixed).unwrap_err(), ThreshError::MixedMessages);
    }

    #[test]
    fn duplicate_signer_counts_once() {
        let r = ShareRegistry::keygen(1, 5, 3, 7).unwrap();
        let p = r.partial_sign(SignerId(0), msg(1)).unwrap();
        let q = r.partial_sign(SignerId(1), msg(1)).unwrap();
        assert!(r.combine(&[p, p, q, q]).is_err());
    }

    #[test]
    fn verify_threshold_rejects_shrunk_or_retargeted() {
        let r = ShareRegistry::keygen(1, 5, 3, 7).unwrap();
        let ps: Vec<_> = (0..3).map(|i| r.partial_sign(SignerId(i), msg(5)).unwrap()).collect();
        let sigma = r.combine(&ps).unwrap();

        let mut short = sigma.clone();
        short.signer_set.pop();
        assert!(!r.verify_threshold(&short));

        let mut other = sigma.clone();
        other.message_digest = msg(6);
        assert!(!r.verify_threshold(&other));

        let mut unsorted = sigma.clone();
        unsorted.signer_set.swap(0, 1);
        assert!(!r.verify_threshold(&unsorted));
    }

    #[test]
    fn combine_is_order_independent() {
        let r = ShareRegistry::keygen(1, 5, 3, 7).unwrap();
        let mut ps: Vec<_> = (0..5).map(|i| r.partial_sign(SignerId(i), msg(5)).unwrap()).collect();
        let a = r.combine(&ps).unwrap();
        ps.reverse();
        ps.swap(0, 3);
        assert_eq!(a, r.combine(&ps).unwrap());
    }

    #[test]
    fn eligible_set_restricts_signers() {
        let r = ShareRegistry::keygen(1, 5, 1, 7).unwrap();
        let ps: Vec<_> = (0..2).map(|i| r.partial_sign(SignerId(i), msg(5)).unwrap()).collect();
        let only: BTreeSet<_> = [SignerId(3), SignerId(4)].into_iter().collect();
        assert!(r.combine_with(&ps, 2, Some(&only)).is_err());
        let both: BTreeSet<_> = [SignerId(0), SignerId(1)].into_iter().collect();
        let sigma = r.combine_with(&ps, 2, Some(&both)).unwrap();
        assert!(r.verify_threshold_with(&sigma, 2, Some(&both)));
        assert!(!r.verify_threshold_with(&sigma, 2, Some(&only)));
    }

    #[test]
    fn debug_never_prints_shares() {
        let r = ShareRegistry::keygen(1, 2, 1, 7).unwrap();
        let text = alloc::format!("{r:?} {:?}", r.signer(SignerId(0)).unwrap());
        let share_hex = alloc::format!("{:?}", Digest(r.shares[&SignerId(0)].0));
        assert!(text.contains("redacted"));
        assert!(!text.contains(share_hex.trim_end_matches("..")));
    }
}
