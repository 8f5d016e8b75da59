//! Replicated three-party secret sharing over `Z_{2^k}` (semi-honest, one corruption).
//!
//! A secret `x = x_0 + x_1 + x_2`. Party `P_i` holds the two shares it is
//! not named after: `prev = x_{i-1}` and `next = x_{i+1}` (indices mod 3).
//! Seed `s_j` is known to every party except `P_j`; it drives zero-sharings,
//! resharing masks and shuffle permutations.
//!
//! Every message is serialized to bytes and moved through the transport, so
//! byte and round counts can be checked against the analytic schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::abb::{AbbError, Backend, BackendKind, CohortOptions, MatDims, Repr, Result};
use crate::abb::{cost, kernels};
use crate::numerics::Ring;
use crate::transport::{EndpointKey, Network, PartyId};

/// One party's two shares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartyView {
    pub prev: Vec<u128>,
    pub next: Vec<u128>,
}

/// All three parties' views of one secret vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rep3Share {
    pub views: [PartyView; 3],
}

impl Rep3Share {
    pub fn len(&self) -> usize {
        self.views[0].prev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Build from the three single shares.
    pub fn from_parts(x: [Vec<u128>; 3]) -> Self {
        let view = |i: usize| PartyView {
            prev: x[(i + 2) % 3].clone(),
            next: x[(i + 1) % 3].clone(),
        };
        Self {
            views: [view(0), view(1), view(2)],
        }
    }

    fn map(&self, f: &dyn Fn(&[u128]) -> Vec<u128>) -> Self {
        let v = |p: &PartyView| PartyView {
            prev: f(&p.prev),
            next: f(&p.next),
        };
        Self {
            views: [v(&self.views[0]), v(&self.views[1]), v(&self.views[2])],
        }
    }

    fn zip(&self, o: &Self, f: &dyn Fn(&[u128], &[u128]) -> Vec<u128>) -> Self {
        let v = |p: &PartyView, q: &PartyView| PartyView {
            prev: f(&p.prev, &q.prev),
            next: f(&p.next, &q.next),
        };
        Self {
            views: [
                v(&self.views[0], &o.views[0]),
                v(&self.views[1], &o.views[1]),
                v(&self.views[2], &o.views[2]),
            ],
        }
    }
}

fn random_vec(ring: Ring, rng: &mut impl RngCore, n: usize) -> Vec<u128> {
    (0..n)
        .map(|_| {
            let v = if ring.bits() <= 64 {
                rng.next_u64() as u128
            } else {
                ((rng.next_u64() as u128) << 64) | rng.next_u64() as u128
            };
            ring.reduce(v)
        })
        .collect()
}

/// Fresh replicated sharing with two uniformly random single shares.
pub fn share(values: &[u128], ring: Ring, rng: &mut impl RngCore) -> Rep3Share {
    let x0 = random_vec(ring, rng, values.len());
    let x1 = random_vec(ring, rng, values.len());
    let x2 = values
        .iter()
        .zip(x0.iter().zip(&x1))
        .map(|(&v, (&a, &b))| ring.sub(ring.sub(v, a), b))
        .collect();
    Rep3Share::from_parts([x0, x1, x2])
}

/// Sum of the three single shares, after checking both copies of each agree.
pub fn reconstruct(s: &Rep3Share, ring: Ring) -> Result<Vec<u128>> {
    // x_j is held as next by P_{j-1} and as prev by P_{j+1}.
    for j in 0..3 {
        let a = &s.views[(j + 2) % 3].next;
        let b = &s.views[(j + 1) % 3].prev;
        if let Some(pos) = a.iter().zip(b).position(|(x, y)| x != y) {
            return Err(AbbError::Inconsistent(pos));
        }
    }
    let x0 = &s.views[1].prev;
    let x1 = &s.views[0].next;
    let x2 = &s.views[0].prev;
    Ok((0..s.len())
        .map(|i| ring.add(ring.add(x0[i], x1[i]), x2[i]))
        .collect())
}

/// `out[r] = data[perm[r]]` on rows of width `cols`.
pub fn permute_rows(data: &[u128], perm: &[usize], cols: usize) -> Vec<u128> {
    let mut out = Vec::with_capacity(data.len());
    for &p in perm {
        out.extend_from_slice(&data[p * cols..(p + 1) * cols]);
    }
    out
}

const DOMAIN_PERM: u64 = 1 << 56;
const DOMAIN_ZERO: u64 = 2 << 56;
const DOMAIN_MASK: u64 = 3 << 56;

/// Pairwise-replicated PRF seeds. `seeds[j]` is withheld from `P_j`.
#[derive(Debug, Clone)]
pub struct PrfSetup {
    seeds: [[u8; 32]; 3],
}

impl PrfSetup {
    pub fn from_master(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0x5eed);
        let mut seeds = [[0u8; 32]; 3];
        for s in &mut seeds {
            rng.fill_bytes(s);
        }
        Self { seeds }
    }

    /// Whether party `party` knows seed `j`.
    pub fn knows(party: usize, j: usize) -> bool {
        party != j
    }

    fn stream(&self, j: usize, id: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seeds[j]);
        rng.set_stream(id);
        rng
    }

    /// `n` pseudorandom ring elements from seed `j`.
    pub fn values(&self, j: usize, id: u64, n: usize, ring: Ring) -> Vec<u128> {
        random_vec(ring, &mut self.stream(j, id), n)
    }

    /// `P_i`'s share of a zero-sharing: `F(s_{i+1}) - F(s_{i-1})`.
    pub fn zero_share(&self, party: usize, ctr: u64, n: usize, ring: Ring) -> Vec<u128> {
        let a = self.values((party + 1) % 3, DOMAIN_ZERO | ctr, n, ring);
        let b = self.values((party + 2) % 3, DOMAIN_ZERO | ctr, n, ring);
        kernels::sub(ring, &a, &b)
    }

    /// Permutation of `n` rows derived from seed `j` (known to the two parties other than `P_j`).
    pub fn permutation(&self, j: usize, ctr: u64, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.stream(j, DOMAIN_PERM | ctr));
        perm
    }
}

fn to_bytes(ring: Ring, parts: &[&[u128]]) -> Vec<u8> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(n * ring.byte_len());
    for p in parts {
        for &x in *p {
            ring.to_le_bytes(x, &mut out);
        }
    }
    out
}

fn from_bytes(ring: Ring, bytes: &[u8]) -> Vec<u128> {
    bytes
        .chunks(ring.byte_len())
        .map(|c| ring.from_le_bytes(c))
        .collect()
}

fn rep(a: &Repr) -> &Rep3Share {
    match a {
        Repr::Rep3(s) => s,
        Repr::Plain(_) => panic!("oracle value passed to the replicated backend"),
    }
}

/// Three server state machines driven round by round over a simulated network.
pub struct Rep3Engine {
    ring: Ring,
    net: Network,
    servers: [EndpointKey; 3],
    clients: BTreeMap<u16, EndpointKey>,
    prf: PrfSetup,
    ctr: u64,
    shuffle_ctr: u64,
    identity_shuffle: bool,
    trusted_dealer: bool,
    dealer: ChaCha20Rng,
    local: BTreeMap<PartyId, ChaCha20Rng>,
    seed: u64,
    bits_left: Option<u64>,
}

impl std::fmt::Debug for Rep3Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rep3Engine")
            .field("ring_bits", &self.ring.bits())
            .field("round", &self.net.round())
            .finish()
    }
}

impl Rep3Engine {
    pub fn new(ring: Ring, opts: &CohortOptions) -> Result<Self> {
        if ring.bits() < 8 {
            return Err(AbbError::Unsupported("rep3 needs a ring of at least 8 bits".into()));
        }
        let mut net = if opts.record_transcript {
            Network::new()
        } else {
            Network::without_transcript()
        };
        let servers = [
            net.register(PartyId::Server(0))?,
            net.register(PartyId::Server(1))?,
            net.register(PartyId::Server(2))?,
        ];
        let mut clients = BTreeMap::new();
        for c in 0..opts.n_clients {
            clients.insert(c, net.register(PartyId::Client(c))?);
        }
        let mut dealer = ChaCha20Rng::seed_from_u64(opts.seed);
        dealer.set_stream(0xdea1);
        Ok(Self {
            ring,
            net,
            servers,
            clients,
            prf: PrfSetup::from_master(opts.seed),
            ctr: 0,
            shuffle_ctr: 0,
            identity_shuffle: opts.identity_shuffle,
            trusted_dealer: opts.trusted_dealer,
            dealer,
            local: BTreeMap::new(),
            seed: opts.seed,
            bits_left: opts.bit_budget,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Whether preprocessing comes from the modeled trusted dealer.
    pub fn trusted_dealer(&self) -> bool {
        self.trusted_dealer
    }

    fn next_ctr(&mut self) -> u64 {
        self.ctr += 1;
        self.ctr
    }

    fn local_rng(&mut self, p: PartyId) -> &mut ChaCha20Rng {
        let seed = self.seed;
        self.local.entry(p).or_insert_with(|| {
            let tag = match p {
                PartyId::Server(i) => 0x100 + i as u64,
                PartyId::Client(i) => 0x10000 + i as u64,
            };
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            r.set_stream(tag);
            r
        })
    }

    fn key(&self, p: PartyId) -> Result<&EndpointKey> {
        match p {
            PartyId::Server(i) => Ok(&self.servers[i as usize]),
            PartyId::Client(c) => self.clients.get(&c).ok_or(AbbError::Transport(
                crate::transport::TransportError::UnknownEndpoint(p),
            )),
        }
    }

    fn send(&mut self, from: PartyId, to: PartyId, parts: &[&[u128]], label: &str) -> Result<()> {
        let bytes = to_bytes(self.ring, parts);
        let key = match from {
            PartyId::Server(i) => &self.servers[i as usize],
            PartyId::Client(c) => self.clients.get(&c).ok_or(AbbError::Transport(
                crate::transport::TransportError::UnknownEndpoint(from),
            ))?,
        };
        self.net.send(key, to, bytes, label)?;
        Ok(())
    }

    fn recv(&mut self, me: PartyId, from: PartyId) -> Result<Vec<u128>> {
        let bytes = {
            let key = match me {
                PartyId::Server(i) => &self.servers[i as usize],
                PartyId::Client(c) => self.clients.get(&c).ok_or(AbbError::Transport(
                    crate::transport::TransportError::UnknownEndpoint(me),
                ))?,
            };
            self.net.recv(key, from)?
        };
        Ok(from_bytes(self.ring, &bytes))
    }

    fn s(i: usize) -> PartyId {
        PartyId::Server(i as u8)
    }

    fn consume_bits(&mut self, n: u64) -> Result<()> {
        if let Some(left) = self.bits_left.as_mut() {
            if *left < n {
                return Err(AbbError::PreprocessingExhausted { needed: n, left: *left });
            }
            *left -= n;
        }
        Ok(())
    }

    /// Each party masks its cross terms with a zero-share and forwards the
    /// result to its predecessor: one round, one element per party per output.
    fn reshare(&mut self, mut z: [Vec<u128>; 3], label: &str) -> Result<Rep3Share> {
        let ring = self.ring;
        let ctr = self.next_ctr();
        let n = z[0].len();
        for (i, zi) in z.iter_mut().enumerate() {
            let alpha = self.prf.zero_share(i, ctr, n, ring);
            *zi = kernels::add(ring, zi, &alpha);
        }
        for (j, zj) in z.iter().enumerate() {
            self.send(Self::s(j), Self::s((j + 2) % 3), &[zj], label)?;
        }
        self.net.advance_round();
        let mut views = Vec::with_capacity(3);
        for (i, zi) in z.into_iter().enumerate() {
            let prev = self.recv(Self::s(i), Self::s((i + 1) % 3))?;
            views.push(PartyView { prev, next: zi });
        }
        let views: [PartyView; 3] = views.try_into().expect("three views");
        Ok(Rep3Share { views })
    }

    /// Replicated product; `prod` is an elementwise or matrix kernel.
    fn mul_with(
        &mut self,
        a: &Rep3Share,
        b: &Rep3Share,
        prod: &dyn Fn(&[u128], &[u128]) -> Vec<u128>,
        label: &str,
    ) -> Result<Rep3Share> {
        let ring = self.ring;
        let cross = |i: usize| {
            let (a, b) = (&a.views[i], &b.views[i]);
            let t1 = prod(&a.next, &b.next);
            let t2 = prod(&a.next, &b.prev);
            let t3 = prod(&a.prev, &b.next);
            kernels::add(ring, &kernels::add(ring, &t1, &t2), &t3)
        };
        let z = [cross(0), cross(1), cross(2)];
        self.reshare(z, label)
    }

    fn mul_elem(&mut self, a: &Rep3Share, b: &Rep3Share, label: &str) -> Result<Rep3Share> {
        let ring = self.ring;
        self.mul_with(a, b, &|x, y| kernels::mul(ring, x, y), label)
    }

    fn constant_share(&self, values: Vec<u128>) -> Rep3Share {
        let n = values.len();
        Rep3Share::from_parts([values, vec![0; n], vec![0; n]])
    }

    fn add_pub(&self, a: &Rep3Share, c: &[u128]) -> Rep3Share {
        // The public value joins share x_0, held by P_1 (prev) and P_2 (next).
        let ring = self.ring;
        let mut out = a.clone();
        out.views[1].prev = kernels::add(ring, &out.views[1].prev, c);
        out.views[2].next = kernels::add(ring, &out.views[2].next, c);
        out
    }

    /// Shares of `count` uniformly random bits.
    fn random_bits(&mut self, count: usize, label: &str) -> Result<Rep3Share> {
        self.consume_bits(count as u64)?;
        let ring = self.ring;
        if self.trusted_dealer {
            let bits: Vec<u128> = (0..count).map(|_| self.dealer.random::<bool>() as u128).collect();
            return Ok(share(&bits, ring, &mut self.dealer));
        }
        // Each server inputs a private random bit vector; the cohort XORs them.
        let items: Vec<(Vec<u128>, PartyId)> = (0..3)
            .map(|i| {
                let rng = self.local_rng(Self::s(i));
                let v: Vec<u128> = (0..count).map(|_| rng.random::<bool>() as u128).collect();
                (v, Self::s(i))
            })
            .collect();
        let mut shared = self.input_items(items, label)?;
        let b2 = shared.pop().expect("3");
        let b1 = shared.pop().expect("3");
        let b0 = shared.pop().expect("3");
        let x = self.xor(&b0, &b1, label)?;
        self.xor(&x, &b2, label)
    }

    /// `a + b - 2ab` on shared bits.
    fn xor(&mut self, a: &Rep3Share, b: &Rep3Share, label: &str) -> Result<Rep3Share> {
        let ring = self.ring;
        let ab = self.mul_elem(a, b, label)?;
        let two = ring.from_signed(-2);
        let s = a.zip(b, &|x, y| kernels::add(ring, x, y));
        let t = ab.map(&|x| kernels::scale_int(ring, x, two));
        Ok(s.zip(&t, &|x, y| kernels::add(ring, x, y)))
    }

    /// Bits laid out bit-major (`bits[j * n + i]`) recombined into `Σ_j w_j b_j` per element.
    fn weighted_sum(&self, bits: &Rep3Share, n: usize, weights: &[u128]) -> Rep3Share {
        let ring = self.ring;
        bits.map(&|x| {
            let mut out = vec![0u128; n];
            for (j, &w) in weights.iter().enumerate() {
                if w == 0 {
                    continue;
                }
                for i in 0..n {
                    out[i] = ring.add(out[i], ring.mul(x[j * n + i], w));
                }
            }
            out
        })
    }

    fn input_items(&mut self, items: Vec<(Vec<u128>, PartyId)>, label: &str) -> Result<Vec<Rep3Share>> {
        let ring = self.ring;
        let mut out = Vec::with_capacity(items.len());
        let mut deliveries = Vec::new();
        for (idx, (vals, owner)) in items.into_iter().enumerate() {
            let s = share(&vals, ring, self.local_rng(owner));
            match owner {
                PartyId::Client(_) => {
                    for i in 0..3 {
                        let v = &s.views[i];
                        self.send(owner, Self::s(i), &[&v.prev, &v.next], label)?;
                        deliveries.push((idx, i, owner));
                    }
                }
                PartyId::Server(j) => {
                    let j = j as usize;
                    for i in [(j + 1) % 3, (j + 2) % 3] {
                        let v = &s.views[i];
                        self.send(owner, Self::s(i), &[&v.prev, &v.next], label)?;
                        deliveries.push((idx, i, owner));
                    }
                }
            }
            out.push(s);
        }
        self.net.advance_round();
        for (idx, i, owner) in deliveries {
            let got = self.recv(Self::s(i), owner)?;
            let n = got.len() / 2;
            out[idx].views[i] = PartyView {
                prev: got[..n].to_vec(),
                next: got[n..].to_vec(),
            };
        }
        Ok(out)
    }

    fn open_all(&mut self, a: &Rep3Share, label: &str) -> Result<Vec<u128>> {
        let ring = self.ring;
        // P_{i+1} holds x_i as prev and sends it to P_i.
        for i in 0..3 {
            let sender = (i + 1) % 3;
            self.send(Self::s(sender), Self::s(i), &[&a.views[sender].prev], label)?;
        }
        self.net.advance_round();
        let mut result = None;
        for i in 0..3 {
            let xi = self.recv(Self::s(i), Self::s((i + 1) % 3))?;
            let v = &a.views[i];
            let x: Vec<u128> = (0..xi.len())
                .map(|e| ring.add(ring.add(xi[e], v.prev[e]), v.next[e]))
                .collect();
            match &result {
                None => result = Some(x),
                Some(r) if *r != x => return Err(AbbError::Inconsistent(0)),
                Some(_) => {}
            }
        }
        Ok(result.unwrap_or_default())
    }

    fn open_to_client(&mut self, a: &Rep3Share, client: PartyId, label: &str) -> Result<Vec<u128>> {
        let ring = self.ring;
        self.send(Self::s(0), client, &[&a.views[0].prev, &a.views[0].next], label)?;
        self.send(Self::s(1), client, &[&a.views[1].prev, &a.views[1].next], label)?;
        self.net.advance_round();
        let m0 = self.recv(client, Self::s(0))?;
        let m1 = self.recv(client, Self::s(1))?;
        let n = m0.len() / 2;
        // S0 sends (x2, x1); S1 sends (x0, x2).
        let (x2a, x1) = (&m0[..n], &m0[n..]);
        let (x0, x2b) = (&m1[..n], &m1[n..]);
        if let Some(pos) = x2a.iter().zip(x2b).position(|(p, q)| p != q) {
            return Err(AbbError::Inconsistent(pos));
        }
        Ok((0..n).map(|e| ring.add(ring.add(x0[e], x1[e]), x2a[e])).collect())
    }

    /// `(r, r >> shift)` with `r` uniform in `[0, 2^(k-2))`.
    fn trunc_pair(&mut self, n: usize, shift: u32, label: &str) -> Result<(Rep3Share, Rep3Share)> {
        let ring = self.ring;
        let k = ring.bits();
        let nbits = (k - 2) as usize;
        if self.trusted_dealer {
            self.consume_bits((n * nbits) as u64)?;
            let r: Vec<u128> = (0..n)
                .map(|_| ring.reduce(self.dealer.random::<u128>()) & ((1u128 << (k - 2)) - 1))
                .collect();
            let s: Vec<u128> = r.iter().map(|&x| x >> shift).collect();
            let rs = share(&r, ring, &mut self.dealer);
            let ss = share(&s, ring, &mut self.dealer);
            return Ok((rs, ss));
        }
        let bits = self.random_bits(n * nbits, label)?;
        let wr: Vec<u128> = (0..nbits).map(|j| 1u128 << j).collect();
        let ws: Vec<u128> = (0..nbits)
            .map(|j| if j as u32 >= shift { 1u128 << (j as u32 - shift) } else { 0 })
            .collect();
        Ok((self.weighted_sum(&bits, n, &wr), self.weighted_sum(&bits, n, &ws)))
    }

    fn trunc_share(&mut self, a: &Rep3Share, shift: u32, label: &str) -> Result<Rep3Share> {
        let ring = self.ring;
        let k = ring.bits();
        let n = a.len();
        let (r, s) = self.trunc_pair(n, shift, label)?;
        let offset = 1u128 << (k - 3);
        let shifted = self.add_pub(a, &vec![offset; n]);
        let c = shifted.zip(&r, &|x, y| kernels::add(ring, x, y));
        // Open c to the two holders of x_0: P_0 sends x_2 to P_2, P_2 sends x_1 to P_1.
        self.send(Self::s(0), Self::s(2), &[&c.views[0].prev], label)?;
        self.send(Self::s(2), Self::s(1), &[&c.views[2].prev], label)?;
        self.net.advance_round();
        let c1 = self.recv(Self::s(1), Self::s(2))?;
        let c2 = self.recv(Self::s(2), Self::s(0))?;
        let hi_off = offset >> shift;
        let high = |x: &[u128], y: &[u128], z: &[u128]| -> Vec<u128> {
            (0..n)
                .map(|e| {
                    let cv = ring.add(ring.add(x[e], y[e]), z[e]);
                    ring.sub(cv >> shift, hi_off)
                })
                .collect()
        };
        let h1 = high(&c.views[1].prev, &c.views[1].next, &c1);
        let h2 = high(&c.views[2].prev, &c.views[2].next, &c2);
        let neg = |v: &[u128]| v.iter().map(|&x| ring.neg(x)).collect::<Vec<_>>();
        let sv = &s.views;
        Ok(Rep3Share {
            views: [
                PartyView {
                    prev: neg(&sv[0].prev),
                    next: neg(&sv[0].next),
                },
                PartyView {
                    prev: kernels::sub(ring, &h1, &sv[1].prev),
                    next: neg(&sv[1].next),
                },
                PartyView {
                    prev: neg(&sv[2].prev),
                    next: kernels::sub(ring, &h2, &sv[2].next),
                },
            ],
        })
    }

    fn ltz_share(&mut self, a: &Rep3Share, label: &str) -> Result<Rep3Share> {
        let ring = self.ring;
        let k = ring.bits();
        let m = cost::ltz_low_bits(k) as usize;
        let n = a.len();
        let one = |len: usize| vec![1u128; len];

        // Mask r = Σ_{j ≤ m} 2^j r_j, with bit j of element i at bits[j * n + i].
        let bits = self.random_bits(n * (m + 1), label)?;
        let weights: Vec<u128> = (0..=m).map(|j| 1u128 << j).collect();
        let r = self.weighted_sum(&bits, n, &weights);
        let offset = 1u128 << (k - 3);
        let shifted = self.add_pub(a, &vec![offset; n]);
        let masked = shifted.zip(&r, &|x, y| kernels::add(ring, x, y));
        let c = self.open_all(&masked, label)?;
        let cbit = |j: usize, i: usize| (c[i] >> j) & 1;

        // e_j = 1 - (c_j xor r_j) is linear in r_j for public c_j.
        let low = |x: &[u128]| x[..m * n].to_vec();
        let r_low = bits.map(&low);
        let flip: Vec<u128> = (0..m * n)
            .map(|p| if cbit(p / n, p % n) == 1 { 1 } else { ring.from_signed(-1) })
            .collect();
        let consts: Vec<u128> = (0..m * n).map(|p| 1 - cbit(p / n, p % n)).collect();
        let e = r_low.map(&|x| kernels::mul(ring, x, &flip));
        let mut suffix = self.add_pub(&e, &consts);

        // Suffix products S_j = Π_{i ≥ j} e_i by recursive doubling.
        let mut span = 1usize;
        while span < m {
            let cnt = (m - span) * n;
            let head = suffix.map(&|x| x[..cnt].to_vec());
            let tail = suffix.map(&|x| x[span * n..span * n + cnt].to_vec());
            let prod = self.mul_elem(&head, &tail, label)?;
            suffix = suffix.zip(&prod, &|x, p| {
                let mut v = x.to_vec();
                v[..cnt].copy_from_slice(p);
                v
            });
            span *= 2;
        }

        // borrow = Σ_j (1 - c_j) r_j Π_{i > j} e_i.
        let cnt = (m - 1) * n;
        let rj = bits.map(&|x| x[..cnt].to_vec());
        let after = suffix.map(&|x| x[n..n + cnt].to_vec());
        let terms = self.mul_elem(&rj, &after, label)?;
        let top = bits.map(&|x| x[(m - 1) * n..m * n].to_vec());
        let mut wts: Vec<u128> = (0..cnt).map(|p| 1 - cbit(p / n, p % n)).collect();
        wts.extend((0..n).map(|i| 1 - cbit(m - 1, i)));
        let all_terms = terms.zip(&top, &|x, y| {
            let mut v = x.to_vec();
            v.extend_from_slice(y);
            v
        });
        let borrow = all_terms.map(&|x| {
            let mut out = vec![0u128; n];
            for (p, (&v, &w)) in x.iter().zip(&wts).enumerate() {
                if w == 1 {
                    out[p % n] = ring.add(out[p % n], v);
                }
            }
            out
        });

        // Bit m of (c - r) is c_m xor r_m xor borrow; the sign bit is its complement.
        let rm = bits.map(&|x| x[m * n..(m + 1) * n].to_vec());
        let t = self.xor(&rm, &borrow, label)?;
        // ltz = 1 - (c_m xor t) = t if c_m = 1, else 1 - t.
        let sgn: Vec<u128> = (0..n)
            .map(|i| if cbit(m, i) == 1 { 1 } else { ring.from_signed(-1) })
            .collect();
        let base: Vec<u128> = (0..n).map(|i| 1 - cbit(m, i)).collect();
        let _ = one;
        let scaled = t.map(&|x| kernels::mul(ring, x, &sgn));
        Ok(self.add_pub(&scaled, &base))
    }

    fn shuffle_share(&mut self, a: &Rep3Share, rows: usize, cols: usize, label: &str) -> Result<Rep3Share> {
        let ring = self.ring;
        let n = a.len();
        let mut cur = a.clone();
        let sctr = self.shuffle_ctr;
        self.shuffle_ctr += 1;
        for c in 0..3 {
            let (pa, pb) = ((c + 1) % 3, (c + 2) % 3);
            let perm: Vec<usize> = if self.identity_shuffle {
                (0..rows).collect()
            } else {
                self.prf.permutation(c, sctr, rows)
            };
            let ctr = self.next_ctr();
            let rho = self.prf.values(c, DOMAIN_MASK | (2 * ctr), n, ring);
            let z = self.prf.values(c, DOMAIN_MASK | (2 * ctr + 1), n, ring);
            // 2-of-2 conversion: P_a holds x_b + x_c, P_b holds x_a.
            let u = kernels::add(ring, &cur.views[pa].prev, &cur.views[pa].next);
            let v = cur.views[pb].prev.clone();
            let pu = permute_rows(&u, &perm, cols);
            let pv = permute_rows(&v, &perm, cols);
            let yb = kernels::add(ring, &kernels::sub(ring, &pu, &rho), &z);
            let ya = kernels::sub(ring, &pv, &z);
            self.send(Self::s(pa), Self::s(c), &[&yb], label)?;
            self.send(Self::s(pb), Self::s(c), &[&ya], label)?;
            self.net.advance_round();
            let got_b = self.recv(Self::s(c), Self::s(pa))?;
            let got_a = self.recv(Self::s(c), Self::s(pb))?;
            let mut views = cur.views.clone();
            views[pa] = PartyView {
                prev: rho.clone(),
                next: yb,
            };
            views[pb] = PartyView {
                prev: ya,
                next: rho,
            };
            views[c] = PartyView {
                prev: got_b,
                next: got_a,
            };
            cur = Rep3Share { views };
        }
        Ok(cur)
    }
}

impl Backend for Rep3Engine {
    fn kind(&self) -> BackendKind {
        BackendKind::Rep3
    }

    fn ring(&self) -> Ring {
        self.ring
    }

    fn input(&mut self, items: Vec<(Vec<u128>, PartyId)>, label: &str) -> Result<Vec<Repr>> {
        for (_, owner) in &items {
            self.key(*owner)?;
        }
        Ok(self
            .input_items(items, label)?
            .into_iter()
            .map(Repr::Rep3)
            .collect())
    }

    fn constant(&self, values: Vec<u128>) -> Repr {
        Repr::Rep3(self.constant_share(values))
    }

    fn linear(&self, a: &Repr, f: &dyn Fn(&[u128]) -> Vec<u128>) -> Repr {
        Repr::Rep3(rep(a).map(f))
    }

    fn linear2(&self, a: &Repr, b: &Repr, f: &dyn Fn(&[u128], &[u128]) -> Vec<u128>) -> Repr {
        Repr::Rep3(rep(a).zip(rep(b), f))
    }

    fn add_public(&self, a: &Repr, c: &[u128]) -> Repr {
        Repr::Rep3(self.add_pub(rep(a), c))
    }

    fn mul(&mut self, a: &Repr, b: &Repr, label: &str) -> Result<Repr> {
        Ok(Repr::Rep3(self.mul_elem(rep(a), rep(b), label)?))
    }

    fn matmul(&mut self, a: &Repr, b: &Repr, d: MatDims, label: &str) -> Result<Repr> {
        let ring = self.ring;
        let s = self.mul_with(
            rep(a),
            rep(b),
            &|x, y| kernels::matmul(ring, x, y, d.m, d.k, d.n, d.batch),
            label,
        )?;
        Ok(Repr::Rep3(s))
    }

    fn trunc(&mut self, a: &Repr, shift: u32, label: &str) -> Result<Repr> {
        Ok(Repr::Rep3(self.trunc_share(rep(a), shift, label)?))
    }

    fn ltz(&mut self, a: &Repr, label: &str) -> Result<Repr> {
        Ok(Repr::Rep3(self.ltz_share(rep(a), label)?))
    }

    fn shuffle_rows(&mut self, a: &Repr, rows: usize, cols: usize, label: &str) -> Result<Repr> {
        Ok(Repr::Rep3(self.shuffle_share(rep(a), rows, cols, label)?))
    }

    fn open(&mut self, a: &Repr, to: Option<PartyId>, label: &str) -> Result<Vec<u128>> {
        match to {
            None => self.open_all(rep(a), label),
            Some(p @ PartyId::Client(_)) => {
                self.key(p)?;
                self.open_to_client(rep(a), p, label)
            }
            Some(p) => Err(AbbError::Unsupported(format!("open to server {p} alone"))),
        }
    }

    fn probe(&self, _a: &Repr) -> Option<Vec<u128>> {
        None
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
