//! Ring kernels shared by the backends. Rings of at most 64 bits run on
//! native `u64` wrapping arithmetic, which agrees with `Z_{2^k}` after masking.

use crate::numerics::Ring;

pub fn add(ring: Ring, a: &[u128], b: &[u128]) -> Vec<u128> {
    a.iter().zip(b).map(|(&x, &y)| ring.add(x, y)).collect()
}

pub fn sub(ring: Ring, a: &[u128], b: &[u128]) -> Vec<u128> {
    a.iter().zip(b).map(|(&x, &y)| ring.sub(x, y)).collect()
}

pub fn mul(ring: Ring, a: &[u128], b: &[u128]) -> Vec<u128> {
    if ring.bits() <= 64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| ring.reduce((x as u64).wrapping_mul(y as u64) as u128))
            .collect()
    } else {
        a.iter().zip(b).map(|(&x, &y)| ring.mul(x, y)).collect()
    }
}

/// `batch` independent products of `m×k` by `k×n` row-major blocks.
pub fn matmul(
    ring: Ring,
    a: &[u128],
    b: &[u128],
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
) -> Vec<u128> {
    let mut out = vec![0u128; batch * m * n];
    if ring.bits() <= 64 {
        let a64: Vec<u64> = a.iter().map(|&x| x as u64).collect();
        let b64: Vec<u64> = b.iter().map(|&x| x as u64).collect();
        let mut acc = vec![0u64; n];
        for t in 0..batch {
            let (ab, bb) = (&a64[t * m * k..], &b64[t * k * n..]);
            for i in 0..m {
                acc.iter_mut().for_each(|v| *v = 0);
                for p in 0..k {
                    let x = ab[i * k + p];
                    if x == 0 {
                        continue;
                    }
                    let row = &bb[p * n..p * n + n];
                    for (acc_j, &y) in acc.iter_mut().zip(row) {
                        *acc_j = acc_j.wrapping_add(x.wrapping_mul(y));
                    }
                }
                let dst = &mut out[t * m * n + i * n..t * m * n + i * n + n];
                for (d, &v) in dst.iter_mut().zip(&acc) {
                    *d = ring.reduce(v as u128);
                }
            }
        }
    } else {
        for t in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0u128;
                    for p in 0..k {
                        s = s.wrapping_add(
                            a[t * m * k + i * k + p].wrapping_mul(b[t * k * n + p * n + j]),
                        );
                    }
                    out[t * m * n + i * n + j] = ring.reduce(s);
                }
            }
        }
    }
    out
}

pub fn scale_int(ring: Ring, a: &[u128], c: u128) -> Vec<u128> {
    a.iter().map(|&x| ring.mul(x, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_u128() {
        for bits in [8, 64, 128] {
            let ring = Ring::new(bits).unwrap();
            let a: Vec<u128> = (0..12).map(|i| ring.reduce(u128::MAX - i * 977)).collect();
            let b: Vec<u128> = (0..12).map(|i| ring.reduce(i * 31_337 + 5)).collect();
            let got = matmul(ring, &a, &b, 2, 3, 2, 2);
            for t in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut s = 0u128;
                        for p in 0..3 {
                            s = ring.add(s, ring.mul(a[t * 6 + i * 3 + p], b[t * 6 + p * 2 + j]));
                        }
                        assert_eq!(got[t * 4 + i * 2 + j], s);
                    }
                }
            }
        }
    }
}
