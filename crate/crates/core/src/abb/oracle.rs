//! Cleartext backend: computes on the plaintext ring elements directly.
//! Truncation is deterministic floor division. Shuffles compose the same
//! seed-derived permutations as the replicated backend.

use super::{kernels, Backend, BackendKind, MatDims, Repr, Result};
use crate::numerics::Ring;
use crate::rep3::PrfSetup;
use crate::transport::PartyId;

#[derive(Debug)]
pub struct OracleBackend {
    ring: Ring,
    prf: PrfSetup,
    shuffle_ctr: u64,
    identity_shuffle: bool,
}

impl OracleBackend {
    pub fn new(ring: Ring, seed: u64, identity_shuffle: bool) -> Self {
        Self {
            ring,
            prf: PrfSetup::from_master(seed),
            shuffle_ctr: 0,
            identity_shuffle,
        }
    }
}

fn plain(a: &Repr) -> &[u128] {
    match a {
        Repr::Plain(v) => v,
        Repr::Rep3(_) => panic!("replicated value passed to the oracle backend"),
    }
}

impl Backend for OracleBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }

    fn ring(&self) -> Ring {
        self.ring
    }

    fn input(&mut self, items: Vec<(Vec<u128>, PartyId)>, _label: &str) -> Result<Vec<Repr>> {
        Ok(items.into_iter().map(|(v, _)| Repr::Plain(v)).collect())
    }

    fn constant(&self, values: Vec<u128>) -> Repr {
        Repr::Plain(values)
    }

    fn linear(&self, a: &Repr, f: &dyn Fn(&[u128]) -> Vec<u128>) -> Repr {
        Repr::Plain(f(plain(a)))
    }

    fn linear2(&self, a: &Repr, b: &Repr, f: &dyn Fn(&[u128], &[u128]) -> Vec<u128>) -> Repr {
        Repr::Plain(f(plain(a), plain(b)))
    }

    fn add_public(&self, a: &Repr, c: &[u128]) -> Repr {
        Repr::Plain(kernels::add(self.ring, plain(a), c))
    }

    fn mul(&mut self, a: &Repr, b: &Repr, _label: &str) -> Result<Repr> {
        Ok(Repr::Plain(kernels::mul(self.ring, plain(a), plain(b))))
    }

    fn matmul(&mut self, a: &Repr, b: &Repr, d: MatDims, _label: &str) -> Result<Repr> {
        Ok(Repr::Plain(kernels::matmul(
            self.ring,
            plain(a),
            plain(b),
            d.m,
            d.k,
            d.n,
            d.batch,
        )))
    }

    fn trunc(&mut self, a: &Repr, shift: u32, _label: &str) -> Result<Repr> {
        let r = self.ring;
        Ok(Repr::Plain(
            plain(a).iter().map(|&x| r.shr_signed(x, shift)).collect(),
        ))
    }

    fn ltz(&mut self, a: &Repr, _label: &str) -> Result<Repr> {
        let r = self.ring;
        Ok(Repr::Plain(
            plain(a).iter().map(|&x| u128::from(r.to_signed(x) < 0)).collect(),
        ))
    }

    fn shuffle_rows(&mut self, a: &Repr, rows: usize, cols: usize, _label: &str) -> Result<Repr> {
        let mut cur = plain(a).to_vec();
        for phase in 0..3 {
            if self.identity_shuffle {
                continue;
            }
            let perm = self.prf.permutation(phase, self.shuffle_ctr, rows);
            cur = crate::rep3::permute_rows(&cur, &perm, cols);
        }
        self.shuffle_ctr += 1;
        Ok(Repr::Plain(cur))
    }

    fn open(&mut self, a: &Repr, _to: Option<PartyId>, _label: &str) -> Result<Vec<u128>> {
        Ok(plain(a).to_vec())
    }

    fn probe(&self, a: &Repr) -> Option<Vec<u128>> {
        Some(plain(a).to_vec())
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
