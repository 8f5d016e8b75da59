//! Analytic message schedule of every communicating primitive.
//!
//! Both backends charge these numbers; the rep3 backend additionally moves
//! real bytes through the transport, and tests assert the two agree.

use crate::transport::PartyId;

/// Communication of one primitive invocation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Charge {
    pub rounds: u64,
    pub bytes: Vec<(PartyId, u64)>,
}

fn servers(each: u64) -> Vec<(PartyId, u64)> {
    (0..3).map(|i| (PartyId::Server(i), each)).collect()
}

/// Bits of the masked value below the sign position used by `ltz`.
pub fn ltz_low_bits(ring_bits: u32) -> u32 {
    ring_bits - 3
}

/// Number of multiplications per level of the suffix-product tree over `m` bits.
pub fn prefix_levels(m: u32) -> Vec<u64> {
    let mut out = Vec::new();
    let mut span = 1u32;
    while span < m {
        out.push((m - span) as u64);
        span *= 2;
    }
    out
}

/// Client (6n) or server (4n) secret-sharing of `n` elements.
pub fn input(n: u64, owner: PartyId, elem: u64) -> Charge {
    let per = match owner {
        PartyId::Client(_) => 6,
        PartyId::Server(_) => 4,
    };
    Charge {
        rounds: 1,
        bytes: vec![(owner, per * n * elem)],
    }
}

/// Several owners sharing in the same round.
pub fn input_parallel(items: &[(u64, PartyId)], elem: u64) -> Charge {
    let mut c = Charge {
        rounds: u64::from(!items.is_empty()),
        bytes: Vec::new(),
    };
    for &(n, owner) in items {
        c.bytes.extend(input(n, owner, elem).bytes);
    }
    c
}

pub fn open_all(n: u64, elem: u64) -> Charge {
    Charge {
        rounds: 1,
        bytes: servers(n * elem),
    }
}

/// Two servers each send both their shares; the client cross-checks the overlap.
pub fn open_to(n: u64, elem: u64) -> Charge {
    Charge {
        rounds: 1,
        bytes: vec![
            (PartyId::Server(0), 2 * n * elem),
            (PartyId::Server(1), 2 * n * elem),
        ],
    }
}

/// Elementwise product, or a matrix product with `n` output elements.
pub fn mul(n: u64, elem: u64) -> Charge {
    Charge {
        rounds: 1,
        bytes: servers(n * elem),
    }
}

/// Interactive generation of `count` shared random bits (XOR of one bit per server).
pub fn random_bits(count: u64, elem: u64) -> Charge {
    Charge {
        rounds: 3,
        bytes: servers(6 * count * elem),
    }
}

pub fn trunc(n: u64, ring_bits: u32, elem: u64, trusted_dealer: bool) -> Charge {
    let mut c = Charge {
        rounds: 1,
        bytes: vec![
            (PartyId::Server(0), n * elem),
            (PartyId::Server(2), n * elem),
        ],
    };
    if !trusted_dealer {
        c = merge(random_bits(n * (ring_bits as u64 - 2), elem), c);
    }
    c
}

pub fn ltz(n: u64, ring_bits: u32, elem: u64, trusted_dealer: bool) -> Charge {
    let m = ltz_low_bits(ring_bits);
    let levels = prefix_levels(m);
    let mults: u64 = levels.iter().sum::<u64>() + (m as u64 - 1) + 1;
    let mut c = Charge {
        rounds: 1 + levels.len() as u64 + 2,
        bytes: servers(n * elem * (1 + mults)),
    };
    if !trusted_dealer {
        c = merge(random_bits(n * (m as u64 + 1), elem), c);
    }
    c
}

/// Three resharing phases, each moving two `rows × width` blocks to the third server.
pub fn shuffle(rows: u64, width: u64, elem: u64) -> Charge {
    Charge {
        rounds: 3,
        bytes: servers(2 * rows * width * elem),
    }
}

/// Sequential composition.
pub fn merge(a: Charge, b: Charge) -> Charge {
    let mut bytes = a.bytes;
    bytes.extend(b.bytes);
    Charge {
        rounds: a.rounds + b.rounds,
        bytes,
    }
}
