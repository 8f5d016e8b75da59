//! Arithmetic black box: secret values living inside the three-server cohort.
//!
//! A [`Cohort`] owns one backend (cleartext oracle or replicated sharing),
//! the cost ledger, and the leakage ledger. Every value is a [`SecretValue`]
//! carrying its shape and its fixed-point scale in fraction bits, so that
//! truncation after a product is an explicit, separately charged step.
//! Opening a value requires the running [`OpenPolicy`] to whitelist it.

pub mod cost;
pub mod kernels;
mod nonlinear;
mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{decode_scaled, encode_scaled, FixedPointSpec, NumericsError, Ring};
use crate::rep3::{Rep3Engine, Rep3Share};
use crate::transport::{PartyId, TransportError};

pub use cost::Charge;
pub use oracle::OracleBackend;

#[derive(Debug, Error)]
pub enum AbbError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("values from different cohorts or backends")]
    Foreign,
    #[error("open of '{label}' to {recipient} is not whitelisted")]
    UnauthorizedOpen { label: String, recipient: String },
    #[error("domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("replicated share copies disagree at element {0}")]
    Inconsistent(usize),
    #[error("preprocessing exhausted: needed {needed} random bits, {left} left")]
    PreprocessingExhausted { needed: u64, left: u64 },
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, AbbError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Rep3,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Oracle => "oracle",
            BackendKind::Rep3 => "rep3",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "oracle" => Ok(BackendKind::Oracle),
            "rep3" => Ok(BackendKind::Rep3),
            other => Err(format!("unknown backend '{other}' (expected oracle or rep3)")),
        }
    }
}

/// Backend storage of a secret vector.
#[derive(Debug, Clone)]
pub enum Repr {
    Plain(Vec<u128>),
    Rep3(Rep3Share),
}

/// Dimensions of a (batched) matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
}

/// Raw ring-level operations a backend must provide. Scales, shapes and
/// ledgers are handled by [`Cohort`].
pub trait Backend {
    fn kind(&self) -> BackendKind;
    fn ring(&self) -> Ring;
    /// Secret-share each item from its owner; all items move in one round.
    fn input(&mut self, items: Vec<(Vec<u128>, PartyId)>, label: &str) -> Result<Vec<Repr>>;
    /// Public values as a trivial sharing.
    fn constant(&self, values: Vec<u128>) -> Repr;
    /// Apply the same Z-linear map to every share.
    fn linear(&self, a: &Repr, f: &dyn Fn(&[u128]) -> Vec<u128>) -> Repr;
    fn linear2(&self, a: &Repr, b: &Repr, f: &dyn Fn(&[u128], &[u128]) -> Vec<u128>) -> Repr;
    fn add_public(&self, a: &Repr, c: &[u128]) -> Repr;
    fn mul(&mut self, a: &Repr, b: &Repr, label: &str) -> Result<Repr>;
    fn matmul(&mut self, a: &Repr, b: &Repr, dims: MatDims, label: &str) -> Result<Repr>;
    /// Divide by `2^shift`; inputs must satisfy `|x| < 2^(k-3)`.
    fn trunc(&mut self, a: &Repr, shift: u32, label: &str) -> Result<Repr>;
    /// Secret bit `[x < 0]` for `|x| < 2^(k-3)`.
    fn ltz(&mut self, a: &Repr, label: &str) -> Result<Repr>;
    fn shuffle_rows(&mut self, a: &Repr, rows: usize, cols: usize, label: &str) -> Result<Repr>;
    fn open(&mut self, a: &Repr, to: Option<PartyId>, label: &str) -> Result<Vec<u128>>;
    /// Harness-side plaintext view for domain checks. `None` when the backend has none.
    fn probe(&self, a: &Repr) -> Option<Vec<u128>>;
    fn as_any(&self) -> &dyn std::any::Any;
}

/// One opened value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageEntry {
    pub seq: u64,
    pub label: String,
    /// `"all"` or the receiving party.
    pub recipient: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recipient {
    All,
    AnyClient,
    Client(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenRule {
    pub label_prefix: String,
    pub recipient: Recipient,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum OpenPolicy {
    #[default]
    AllowAll,
    Whitelist(Vec<OpenRule>),
}

impl OpenPolicy {
    pub fn whitelist(rules: &[(&str, Recipient)]) -> Self {
        OpenPolicy::Whitelist(
            rules
                .iter()
                .map(|(p, r)| OpenRule {
                    label_prefix: p.to_string(),
                    recipient: r.clone(),
                })
                .collect(),
        )
    }

    pub fn permits(&self, label: &str, to: Option<PartyId>) -> bool {
        match self {
            OpenPolicy::AllowAll => true,
            OpenPolicy::Whitelist(rules) => rules.iter().any(|r| {
                label.starts_with(&r.label_prefix)
                    && match (&r.recipient, to) {
                        (Recipient::All, None) => true,
                        (Recipient::AnyClient, Some(PartyId::Client(_))) => true,
                        (Recipient::Client(c), Some(PartyId::Client(d))) => *c == d,
                        _ => false,
                    }
            }),
        }
    }
}

/// One communicating primitive, for the structured cost log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimitiveRecord {
    pub round: u64,
    pub step_label: String,
    pub primitive: String,
    pub rows: usize,
    pub cols: usize,
    pub bytes: u64,
}

/// Rounds, bytes per sender, and per-primitive tallies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    pub rounds: u64,
    pub bytes_sent: BTreeMap<PartyId, u64>,
    pub op_counts: BTreeMap<String, u64>,
}

impl CostLedger {
    pub fn charge_bytes(&mut self, party: PartyId, bytes: u64) {
        *self.bytes_sent.entry(party).or_default() += bytes;
    }

    pub fn apply(&mut self, op: &str, c: &Charge) {
        self.rounds += c.rounds;
        for &(p, b) in &c.bytes {
            self.charge_bytes(p, b);
        }
        *self.op_counts.entry(op.to_string()).or_default() += 1;
    }

    pub fn bytes_of(&self, party: PartyId) -> u64 {
        self.bytes_sent.get(&party).copied().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent.values().sum()
    }

    pub fn max_party_bytes(&self) -> u64 {
        self.bytes_sent.values().copied().max().unwrap_or(0)
    }

    pub fn client_bytes(&self) -> u64 {
        self.bytes_sent
            .iter()
            .filter(|(p, _)| matches!(p, PartyId::Client(_)))
            .map(|(_, b)| b)
            .sum()
    }

    /// Costs accrued since `earlier` was snapshotted from the same ledger.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        let mut out = CostLedger {
            rounds: self.rounds - earlier.rounds,
            ..CostLedger::default()
        };
        for (&p, &b) in &self.bytes_sent {
            let d = b - earlier.bytes_of(p);
            if d > 0 {
                out.bytes_sent.insert(p, d);
            }
        }
        for (op, &n) in &self.op_counts {
            let d = n - earlier.op_counts.get(op).copied().unwrap_or(0);
            if d > 0 {
                out.op_counts.insert(op.clone(), d);
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let bytes: BTreeMap<String, u64> = self
            .bytes_sent
            .iter()
            .map(|(p, b)| (p.to_string(), *b))
            .collect();
        serde_json::json!({
            "rounds": self.rounds,
            "bytes_sent": bytes,
            "op_counts": self.op_counts,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SecretValue {
    handle: u64,
    cohort: u64,
    backend: BackendKind,
    rows: usize,
    cols: usize,
    scale: u32,
    repr: Repr,
}

impl SecretValue {
    pub fn handle(&self) -> u64 {
        self.handle
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Fraction bits of the encoding.
    pub fn scale(&self) -> u32 {
        self.scale
    }
    pub fn backend(&self) -> BackendKind {
        self.backend
    }
    pub fn repr(&self) -> &Repr {
        &self.repr
    }
}

#[derive(Debug, Clone)]
pub struct CohortOptions {
    pub spec: FixedPointSpec,
    pub n_clients: u16,
    pub seed: u64,
    /// Preprocessing randomness from a modeled trusted dealer instead of interactive generation.
    pub trusted_dealer: bool,
    /// Test mode: every shuffle phase uses the identity permutation.
    pub identity_shuffle: bool,
    pub record_transcript: bool,
    pub record_primitives: bool,
    /// Cap on interactively or dealer-generated random bits (`None` = unlimited).
    pub bit_budget: Option<u64>,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self {
            spec: FixedPointSpec::default(),
            n_clients: 2,
            seed: 0,
            trusted_dealer: true,
            identity_shuffle: false,
            record_transcript: false,
            record_primitives: false,
            bit_budget: None,
        }
    }
}

static NEXT_COHORT: AtomicU64 = AtomicU64::new(1);

pub struct Cohort {
    id: u64,
    spec: FixedPointSpec,
    backend: Box<dyn Backend>,
    ledger: CostLedger,
    leakage: Vec<LeakageEntry>,
    primitives: Option<Vec<PrimitiveRecord>>,
    policy: OpenPolicy,
    trusted_dealer: bool,
    next_handle: u64,
    party_rngs: BTreeMap<PartyId, ChaCha20Rng>,
    seed: u64,
}

impl fmt::Debug for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cohort")
            .field("id", &self.id)
            .field("backend", &self.backend.kind())
            .field("spec", &self.spec)
            .finish()
    }
}

impl Cohort {
    pub fn new(kind: BackendKind, opts: CohortOptions) -> Result<Self> {
        opts.spec.validate()?;
        let ring = opts.spec.ring();
        let backend: Box<dyn Backend> = match kind {
            BackendKind::Oracle => Box::new(OracleBackend::new(ring, opts.seed, opts.identity_shuffle)),
            BackendKind::Rep3 => Box::new(Rep3Engine::new(ring, &opts)?),
        };
        Ok(Self::with_backend(backend, &opts))
    }

    pub fn oracle(spec: FixedPointSpec, seed: u64) -> Self {
        Self::new(
            BackendKind::Oracle,
            CohortOptions {
                spec,
                seed,
                ..CohortOptions::default()
            },
        )
        .expect("valid spec")
    }

    pub fn rep3(spec: FixedPointSpec, seed: u64) -> Self {
        Self::new(
            BackendKind::Rep3,
            CohortOptions {
                spec,
                seed,
                ..CohortOptions::default()
            },
        )
        .expect("valid spec")
    }

    pub fn with_backend(backend: Box<dyn Backend>, opts: &CohortOptions) -> Self {
        Self {
            id: NEXT_COHORT.fetch_add(1, Ordering::Relaxed),
            spec: opts.spec,
            backend,
            ledger: CostLedger::default(),
            leakage: Vec::new(),
            primitives: opts.record_primitives.then(Vec::new),
            policy: OpenPolicy::AllowAll,
            trusted_dealer: opts.trusted_dealer,
            next_handle: 0,
            party_rngs: BTreeMap::new(),
            seed: opts.seed,
        }
    }

    pub fn spec(&self) -> FixedPointSpec {
        self.spec
    }
    pub fn frac_bits(&self) -> u32 {
        self.spec.frac_bits
    }
    pub fn ring(&self) -> Ring {
        self.backend.ring()
    }
    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }
    pub fn trusted_dealer(&self) -> bool {
        self.trusted_dealer
    }
    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }
    pub fn leakage(&self) -> &[LeakageEntry] {
        &self.leakage
    }
    pub fn primitive_log(&self) -> Option<&[PrimitiveRecord]> {
        self.primitives.as_deref()
    }
    pub fn set_policy(&mut self, policy: OpenPolicy) {
        self.policy = policy;
    }
    /// Downcast access to the replicated engine (transport counters, transcript).
    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }
    pub fn rep3_engine(&self) -> Option<&Rep3Engine> {
        self.backend.as_any().downcast_ref::<Rep3Engine>()
    }

    /// SHA-256 over the serialized leakage ledger, hex encoded.
    pub fn leakage_digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.leakage).expect("serializable");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Randomness private to one party (e.g. a server's local noise).
    pub fn party_rng(&mut self, party: PartyId) -> &mut ChaCha20Rng {
        let seed = self.seed;
        self.party_rngs.entry(party).or_insert_with(|| {
            let tag = match party {
                PartyId::Server(i) => 0x5000 + i as u64,
                PartyId::Client(i) => 0xC000 + i as u64,
            };
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(tag);
            rng
        })
    }

    fn charge(&mut self, op: &str, label: &str, rows: usize, cols: usize, c: Charge) {
        if let Some(log) = self.primitives.as_mut() {
            log.push(PrimitiveRecord {
                round: self.ledger.rounds,
                step_label: label.to_string(),
                primitive: op.to_string(),
                rows,
                cols,
                bytes: c.bytes.iter().map(|b| b.1).sum(),
            });
        }
        self.ledger.apply(op, &c);
    }

    fn elem(&self) -> u64 {
        self.ring().byte_len() as u64
    }

    fn wrap(&mut self, repr: Repr, rows: usize, cols: usize, scale: u32) -> SecretValue {
        self.next_handle += 1;
        SecretValue {
            handle: self.next_handle,
            cohort: self.id,
            backend: self.backend.kind(),
            rows,
            cols,
            scale,
            repr,
        }
    }

    fn check(&self, a: &SecretValue) -> Result<()> {
        if a.cohort != self.id || a.backend != self.backend.kind() {
            return Err(AbbError::Foreign);
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: &SecretValue, b: &SecretValue) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if a.shape() != b.shape() {
            return Err(AbbError::Shape {
                op,
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(())
    }

    fn encode_all(&self, values: &[f64], scale: u32) -> Result<Vec<u128>> {
        let ring = self.ring();
        values
            .iter()
            .map(|&x| encode_scaled(x, ring, scale).map_err(AbbError::from))
            .collect()
    }

    fn decode_all(&self, raw: &[u128], scale: u32) -> Vec<f64> {
        let ring = self.ring();
        raw.iter().map(|&r| decode_scaled(r, ring, scale)).collect()
    }

    // ---- input / constants -------------------------------------------------

    pub fn input(
        &mut self,
        values: &[f64],
        rows: usize,
        cols: usize,
        owner: PartyId,
        label: &str,
    ) -> Result<SecretValue> {
        let mut v = self.input_many(&[(values, rows, cols, owner)], label)?;
        Ok(v.pop().expect("one item"))
    }

    /// Inputs from several owners in a single round.
    pub fn input_many(
        &mut self,
        items: &[(&[f64], usize, usize, PartyId)],
        label: &str,
    ) -> Result<Vec<SecretValue>> {
        let f = self.spec.frac_bits;
        let mut raw = Vec::with_capacity(items.len());
        for &(vals, rows, cols, owner) in items {
            if vals.len() != rows * cols {
                return Err(AbbError::Shape {
                    op: "input",
                    left: (rows, cols),
                    right: (vals.len(), 1),
                });
            }
            raw.push((self.encode_all(vals, f)?, owner));
        }
        let counts: Vec<(u64, PartyId)> = items.iter().map(|i| ((i.1 * i.2) as u64, i.3)).collect();
        let reprs = self.backend.input(raw, label)?;
        let c = cost::input_parallel(&counts, self.elem());
        let total: usize = items.iter().map(|i| i.1 * i.2).sum();
        self.charge("input", label, total, 1, c);
        Ok(reprs
            .into_iter()
            .zip(items)
            .map(|(r, i)| self.wrap(r, i.1, i.2, f))
            .collect())
    }

    /// Public values embedded as a sharing at the given scale (no communication).
    pub fn constant(&mut self, values: &[f64], rows: usize, cols: usize, scale: u32) -> Result<SecretValue> {
        assert_eq!(values.len(), rows * cols, "constant shape");
        let raw = self.encode_all(values, scale)?;
        let r = self.backend.constant(raw);
        Ok(self.wrap(r, rows, cols, scale))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> SecretValue {
        let r = self.backend.constant(vec![0; rows * cols]);
        let f = self.spec.frac_bits;
        self.wrap(r, rows, cols, f)
    }

    // ---- local linear operations -------------------------------------------

    /// Multiply by `2^(to - scale)` so the value is encoded at `to` fraction bits.
    pub fn upscale(&mut self, a: &SecretValue, to: u32) -> Result<SecretValue> {
        self.check(a)?;
        assert!(to >= a.scale, "upscale cannot lower the scale");
        if to == a.scale {
            return Ok(a.clone());
        }
        let ring = self.ring();
        let c = ring.reduce(1u128 << (to - a.scale));
        let r = self.backend.linear(&a.repr, &|x| kernels::scale_int(ring, x, c));
        Ok(self.wrap(r, a.rows, a.cols, to))
    }

    /// Reinterpret the same ring elements at another scale: a public division
    /// (or multiplication) by a power of two at zero cost.
    pub fn rescale_view(&mut self, a: &SecretValue, scale: u32) -> SecretValue {
        let mut out = a.clone();
        out.scale = scale;
        out
    }

    fn align(&mut self, a: &SecretValue, b: &SecretValue) -> Result<(SecretValue, SecretValue)> {
        let s = a.scale.max(b.scale);
        Ok((self.upscale(a, s)?, self.upscale(b, s)?))
    }

    pub fn add(&mut self, a: &SecretValue, b: &SecretValue) -> Result<SecretValue> {
        self.same_shape("add", a, b)?;
        let (a, b) = self.align(a, b)?;
        let ring = self.ring();
        let r = self.backend.linear2(&a.repr, &b.repr, &|x, y| kernels::add(ring, x, y));
        Ok(self.wrap(r, a.rows, a.cols, a.scale))
    }

    pub fn sub(&mut self, a: &SecretValue, b: &SecretValue) -> Result<SecretValue> {
        self.same_shape("sub", a, b)?;
        let (a, b) = self.align(a, b)?;
        let ring = self.ring();
        let r = self.backend.linear2(&a.repr, &b.repr, &|x, y| kernels::sub(ring, x, y));
        Ok(self.wrap(r, a.rows, a.cols, a.scale))
    }

    pub fn neg(&mut self, a: &SecretValue) -> Result<SecretValue> {
        self.check(a)?;
        let ring = self.ring();
        let r = self
            .backend
            .linear(&a.repr, &|x| x.iter().map(|&v| ring.neg(v)).collect());
        Ok(self.wrap(r, a.rows, a.cols, a.scale))
    }

    /// Add public values (one per element, or a single broadcast value).
    pub fn add_public(&mut self, a: &SecretValue, c: &[f64]) -> Result<SecretValue> {
        self.check(a)?;
        let enc = self.encode_all(c, a.scale)?;
        let full = broadcast(&enc, a.len(), "add_public")?;
        let r = self.backend.add_public(&a.repr, &full);
        Ok(self.wrap(r, a.rows, a.cols, a.scale))
    }

    /// `c - a` for public `c`.
    pub fn public_sub(&mut self, c: &[f64], a: &SecretValue) -> Result<SecretValue> {
        let n = self.neg(a)?;
        self.add_public(&n, c)
    }

    /// Multiply by public reals encoded at `c_scale` bits; the result scale is
    /// `a.scale + c_scale`.
    pub fn mul_public(&mut self, a: &SecretValue, c: &[f64], c_scale: u32) -> Result<SecretValue> {
        self.check(a)?;
        let enc = self.encode_all(c, c_scale)?;
        let full = broadcast(&enc, a.len(), "mul_public")?;
        let ring = self.ring();
        let r = self.backend.linear(&a.repr, &|x| kernels::mul(ring, x, &full));
        Ok(self.wrap(r, a.rows, a.cols, a.scale + c_scale))
    }

    /// Multiply by a public real at the default fraction bits (zero bytes).
    pub fn scale_public(&mut self, a: &SecretValue, c: f64) -> Result<SecretValue> {
        let f = self.spec.frac_bits;
        self.mul_public(a, &[c], f)
    }

    /// Multiply by public integers; the scale is unchanged.
    pub fn mul_int_public(&mut self, a: &SecretValue, c: &[i64]) -> Result<SecretValue> {
        self.check(a)?;
        let ring = self.ring();
        let enc: Vec<u128> = c.iter().map(|&v| ring.from_signed(v as i128)).collect();
        let full = broadcast(&enc, a.len(), "mul_int_public")?;
        let r = self.backend.linear(&a.repr, &|x| kernels::mul(ring, x, &full));
        Ok(self.wrap(r, a.rows, a.cols, a.scale))
    }

    /// Rearrange elements: `out[i] = a[idx[i]]` with the new shape.
    pub fn gather(&mut self, a: &SecretValue, idx: &[usize], rows: usize, cols: usize) -> Result<SecretValue> {
        self.check(a)?;
        assert_eq!(idx.len(), rows * cols, "gather shape");
        let n = a.len();
        assert!(idx.iter().all(|&i| i < n), "gather index out of range");
        let r = self
            .backend
            .linear(&a.repr, &|x| idx.iter().map(|&i| x[i]).collect());
        Ok(self.wrap(r, rows, cols, a.scale))
    }

    pub fn reshape(&mut self, a: &SecretValue, rows: usize, cols: usize) -> Result<SecretValue> {
        assert_eq!(a.len(), rows * cols, "reshape");
        let mut out = a.clone();
        out.rows = rows;
        out.cols = cols;
        Ok(out)
    }

    pub fn transpose(&mut self, a: &SecretValue) -> Result<SecretValue> {
        let (r, c) = a.shape();
        let idx: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, &idx, c, r)
    }

    pub fn slice_rows(&mut self, a: &SecretValue, start: usize, end: usize) -> Result<SecretValue> {
        let c = a.cols;
        let idx: Vec<usize> = (start * c..end * c).collect();
        self.gather(a, &idx, end - start, c)
    }

    pub fn slice_cols(&mut self, a: &SecretValue, start: usize, end: usize) -> Result<SecretValue> {
        let (r, c) = a.shape();
        let idx: Vec<usize> = (0..r).flat_map(|i| (start..end).map(move |j| i * c + j)).collect();
        self.gather(a, &idx, r, end - start)
    }

    /// Repeat an `r × 1` column `cols` times.
    pub fn repeat_cols(&mut self, a: &SecretValue, cols: usize) -> Result<SecretValue> {
        assert_eq!(a.cols, 1, "repeat_cols expects a column");
        let idx: Vec<usize> = (0..a.rows).flat_map(|i| std::iter::repeat_n(i, cols)).collect();
        self.gather(a, &idx, a.rows, cols)
    }

    /// Repeat a `1 × c` row `rows` times.
    pub fn repeat_rows(&mut self, a: &SecretValue, rows: usize) -> Result<SecretValue> {
        assert_eq!(a.rows, 1, "repeat_rows expects a row");
        let c = a.cols;
        let idx: Vec<usize> = (0..rows).flat_map(|_| 0..c).collect();
        self.gather(a, &idx, rows, c)
    }

    pub fn concat_cols(&mut self, parts: &[&SecretValue]) -> Result<SecretValue> {
        let rows = parts[0].rows;
        let scale = parts.iter().map(|p| p.scale).max().unwrap_or(0);
        let mut aligned = Vec::with_capacity(parts.len());
        for p in parts {
            if p.rows != rows {
                return Err(AbbError::Shape {
                    op: "concat_cols",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            aligned.push(self.upscale(p, scale)?);
        }
        let cols: usize = aligned.iter().map(|p| p.cols).sum();
        // Stack as consecutive blocks, then interleave rows with one gather.
        let mut stacked = aligned[0].clone();
        for p in &aligned[1..] {
            stacked = self.append(&stacked, p)?;
        }
        let mut offsets = Vec::with_capacity(aligned.len());
        let mut off = 0;
        for p in &aligned {
            offsets.push(off);
            off += p.len();
        }
        let mut idx = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (p, &o) in aligned.iter().zip(&offsets) {
                idx.extend((0..p.cols).map(|j| o + i * p.cols + j));
            }
        }
        self.gather(&stacked, &idx, rows, cols)
    }

    pub fn concat_rows(&mut self, parts: &[&SecretValue]) -> Result<SecretValue> {
        let cols = parts[0].cols;
        let scale = parts.iter().map(|p| p.scale).max().unwrap_or(0);
        let mut out = self.upscale(parts[0], scale)?;
        for p in &parts[1..] {
            if p.cols != cols {
                return Err(AbbError::Shape {
                    op: "concat_rows",
                    left: parts[0].shape(),
                    right: p.shape(),
                });
            }
            let p = self.upscale(p, scale)?;
            out = self.append(&out, &p)?;
        }
        Ok(out)
    }

    /// Flat concatenation; the result has `a.rows + b.len()/a.cols` rows when
    /// the widths match, otherwise a single column.
    fn append(&mut self, a: &SecretValue, b: &SecretValue) -> Result<SecretValue> {
        self.check(a)?;
        self.check(b)?;
        let r = self.backend.linear2(&a.repr, &b.repr, &|x, y| {
            let mut v = Vec::with_capacity(x.len() + y.len());
            v.extend_from_slice(x);
            v.extend_from_slice(y);
            v
        });
        let (rows, cols) = if a.cols == b.cols {
            (a.rows + b.rows, a.cols)
        } else {
            (a.len() + b.len(), 1)
        };
        Ok(self.wrap(r, rows, cols, a.scale))
    }

    /// `Σ c_k · a[row_k, :]` as a `1 × cols` row, coefficients encoded at
    /// `c_scale` bits; the result scale is `a.scale + c_scale`.
    pub fn combine_rows(&mut self, a: &SecretValue, terms: &[(usize, f64)], c_scale: u32) -> Result<SecretValue> {
        self.check(a)?;
        let ring = self.ring();
        let cols = a.cols;
        let mut enc = Vec::with_capacity(terms.len());
        for &(row, c) in terms {
            assert!(row < a.rows, "combine_rows index out of range");
            enc.push((row, encode_scaled(c, ring, c_scale)?));
        }
        let r = self.backend.linear(&a.repr, &|x| {
            let mut out = vec![0u128; cols];
            for &(row, c) in &enc {
                for (o, &v) in out.iter_mut().zip(&x[row * cols..(row + 1) * cols]) {
                    *o = ring.add(*o, ring.mul(v, c));
                }
            }
            out
        });
        Ok(self.wrap(r, 1, cols, a.scale + c_scale))
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_rows(&mut self, a: &SecretValue) -> Result<SecretValue> {
        self.check(a)?;
        let (rows, cols) = a.shape();
        let ring = self.ring();
        let r = self.backend.linear(&a.repr, &|x| {
            (0..rows)
                .map(|i| x[i * cols..(i + 1) * cols].iter().fold(0, |s, &v| ring.add(s, v)))
                .collect()
        });
        Ok(self.wrap(r, rows, 1, a.scale))
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_cols(&mut self, a: &SecretValue) -> Result<SecretValue> {
        self.check(a)?;
        let (rows, cols) = a.shape();
        let ring = self.ring();
        let r = self.backend.linear(&a.repr, &|x| {
            let mut s = vec![0u128; cols];
            for i in 0..rows {
                for (acc, &v) in s.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
                    *acc = ring.add(*acc, v);
                }
            }
            s
        });
        Ok(self.wrap(r, 1, cols, a.scale))
    }

    // ---- communicating primitives ------------------------------------------

    /// Elementwise product without truncation: the result scale is the sum.
    pub fn mul(&mut self, a: &SecretValue, b: &SecretValue, label: &str) -> Result<SecretValue> {
        self.same_shape("mul", a, b)?;
        let r = self.backend.mul(&a.repr, &b.repr, label)?;
        let c = cost::mul(a.len() as u64, self.elem());
        self.charge("mul", label, a.rows, a.cols, c);
        Ok(self.wrap(r, a.rows, a.cols, a.scale + b.scale))
    }

    /// Product truncated back to the larger operand scale (no truncation when
    /// one side is an integer-scale bit).
    pub fn mul_fx(&mut self, a: &SecretValue, b: &SecretValue, label: &str) -> Result<SecretValue> {
        let target = a.scale.max(b.scale);
        let p = self.mul(a, b, label)?;
        self.trunc_to(&p, target, label)
    }

    /// `(m × k) · (k × n)` without truncation.
    pub fn matmul(&mut self, a: &SecretValue, b: &SecretValue, label: &str) -> Result<SecretValue> {
        self.check(a)?;
        self.check(b)?;
        if a.cols != b.rows {
            return Err(AbbError::Shape {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let dims = MatDims {
            m: a.rows,
            k: a.cols,
            n: b.cols,
            batch: 1,
        };
        self.matmul_dims(a, b, dims, label)
    }

    /// `batch` independent products; `a` stacks `batch` blocks of `m × k`
    /// rows, `b` stacks blocks of `k × n`.
    pub fn matmul_batched(
        &mut self,
        a: &SecretValue,
        b: &SecretValue,
        batch: usize,
        label: &str,
    ) -> Result<SecretValue> {
        self.check(a)?;
        self.check(b)?;
        if batch == 0 || a.rows % batch != 0 || b.rows % batch != 0 || a.cols != b.rows / batch {
            return Err(AbbError::Shape {
                op: "matmul_batched",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let dims = MatDims {
            m: a.rows / batch,
            k: a.cols,
            n: b.cols,
            batch,
        };
        self.matmul_dims(a, b, dims, label)
    }

    fn matmul_dims(&mut self, a: &SecretValue, b: &SecretValue, d: MatDims, label: &str) -> Result<SecretValue> {
        let r = self.backend.matmul(&a.repr, &b.repr, d, label)?;
        let out = (d.batch * d.m * d.n) as u64;
        let c = cost::mul(out, self.elem());
        self.charge("matmul", label, d.batch * d.m, d.n, c);
        Ok(self.wrap(r, d.batch * d.m, d.n, a.scale + b.scale))
    }

    pub fn matmul_fx(&mut self, a: &SecretValue, b: &SecretValue, label: &str) -> Result<SecretValue> {
        let target = a.scale.max(b.scale);
        let p = self.matmul(a, b, label)?;
        self.trunc_to(&p, target, label)
    }

    /// Divide by `2^shift` (probabilistic rounding on rep3, floor on the oracle).
    pub fn trunc(&mut self, a: &SecretValue, shift: u32, label: &str) -> Result<SecretValue> {
        self.check(a)?;
        assert!(shift <= a.scale, "truncation below scale 0");
        if shift == 0 {
            return Ok(a.clone());
        }
        let r = self.backend.trunc(&a.repr, shift, label)?;
        let ring = self.ring();
        let c = cost::trunc(a.len() as u64, ring.bits(), self.elem(), self.trusted_dealer);
        self.charge("trunc", label, a.rows, a.cols, c);
        Ok(self.wrap(r, a.rows, a.cols, a.scale - shift))
    }

    pub fn trunc_to(&mut self, a: &SecretValue, scale: u32, label: &str) -> Result<SecretValue> {
        assert!(scale <= a.scale, "trunc_to cannot raise the scale");
        self.trunc(a, a.scale - scale, label)
    }

    /// Secret bit (scale 0): 1 when the value is negative, 0 otherwise (including 0).
    pub fn ltz(&mut self, a: &SecretValue, label: &str) -> Result<SecretValue> {
        self.check(a)?;
        let r = self.backend.ltz(&a.repr, label)?;
        let ring = self.ring();
        let c = cost::ltz(a.len() as u64, ring.bits(), self.elem(), self.trusted_dealer);
        self.charge("ltz", label, a.rows, a.cols, c);
        Ok(self.wrap(r, a.rows, a.cols, 0))
    }

    /// Obliviously permute the rows.
    pub fn shuffle_rows(&mut self, a: &SecretValue, label: &str) -> Result<SecretValue> {
        self.check(a)?;
        let r = self.backend.shuffle_rows(&a.repr, a.rows, a.cols, label)?;
        let c = cost::shuffle(a.rows as u64, a.cols as u64, self.elem());
        self.charge("shuffle", label, a.rows, a.cols, c);
        Ok(self.wrap(r, a.rows, a.cols, a.scale))
    }

    fn record_open(&mut self, a: &SecretValue, to: Option<PartyId>, label: &str) -> Result<()> {
        let recipient = to.map_or_else(|| "all".to_string(), |p| p.to_string());
        if !self.policy.permits(label, to) {
            return Err(AbbError::UnauthorizedOpen {
                label: label.to_string(),
                recipient,
            });
        }
        self.leakage.push(LeakageEntry {
            seq: self.leakage.len() as u64,
            label: label.to_string(),
            recipient,
            rows: a.rows,
            cols: a.cols,
        });
        Ok(())
    }

    /// Reveal to all servers (and the caller).
    pub fn open(&mut self, a: &SecretValue, label: &str) -> Result<Vec<f64>> {
        self.check(a)?;
        self.record_open(a, None, label)?;
        let raw = self.backend.open(&a.repr, None, label)?;
        let c = cost::open_all(a.len() as u64, self.elem());
        self.charge("open", label, a.rows, a.cols, c);
        Ok(self.decode_all(&raw, a.scale))
    }

    /// Reveal to a single client only.
    pub fn open_to(&mut self, a: &SecretValue, client: u16, label: &str) -> Result<Vec<f64>> {
        self.check(a)?;
        let to = PartyId::Client(client);
        self.record_open(a, Some(to), label)?;
        let raw = self.backend.open(&a.repr, Some(to), label)?;
        let c = cost::open_to(a.len() as u64, self.elem());
        self.charge("open_to", label, a.rows, a.cols, c);
        Ok(self.decode_all(&raw, a.scale))
    }

    /// Harness-only plaintext view, available on the oracle backend.
    pub fn probe(&self, a: &SecretValue) -> Option<Vec<f64>> {
        self.backend
            .probe(&a.repr)
            .map(|raw| self.decode_all(&raw, a.scale))
    }
}

fn broadcast(enc: &[u128], n: usize, op: &'static str) -> Result<Vec<u128>> {
    match enc.len() {
        1 => Ok(vec![enc[0]; n]),
        m if m == n => Ok(enc.to_vec()),
        m => Err(AbbError::Shape {
            op,
            left: (n, 1),
            right: (m, 1),
        }),
    }
}
