//! Nonlinear functions built only from ABB primitives, so both backends run
//! the same algorithm.
//!
//! Division and square root first locate the leading power of two with a
//! batch of secret comparisons, normalize with a public-coefficient
//! combination of the comparison bits, then run a fixed number of Newton
//! steps. The exponential clamps, divides by 16 for free, evaluates a
//! Taylor polynomial at a wider internal scale and squares four times.

use super::{AbbError, Cohort, Result, SecretValue};

pub const NEWTON_ITERS: usize = 15;
pub const EXP_SQUARINGS: u32 = 4;
const EXP_TAYLOR_DEGREE: u32 = 8;
pub const EXP_CLAMP: f64 = 16.0;
/// Largest leading exponent accepted by `div`/`reciprocal`.
pub const DIV_MAX_EXP: i32 = 20;
/// Largest leading exponent accepted by `sqrt`.
pub const SQRT_MAX_EXP: i32 = 30;

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

impl Cohort {
    fn require_wide_ring(&self, op: &'static str) -> Result<()> {
        if self.ring().bits() < 64 || self.frac_bits() > 24 {
            return Err(AbbError::Unsupported(format!(
                "{op} needs a ring of at least 64 bits and at most 24 fraction bits"
            )));
        }
        Ok(())
    }

    fn check_domain(&self, a: &SecretValue, op: &'static str, ok: impl Fn(f64) -> bool, what: &str) -> Result<()> {
        if let Some(vals) = self.probe(a) {
            if let Some(bad) = vals.iter().find(|&&v| !ok(v)) {
                return Err(AbbError::Domain {
                    op,
                    detail: format!("{bad} outside {what}"),
                });
            }
        }
        Ok(())
    }

    /// Bring a value to the default fraction bits.
    pub fn to_default_scale(&mut self, a: &SecretValue, label: &str) -> Result<SecretValue> {
        let f = self.frac_bits();
        if a.scale() > f {
            self.trunc_to(a, f, label)
        } else {
            self.upscale(a, f)
        }
    }

    /// Bits `t[i, e] = [a_i ≥ 2^e]` as an `n × |exps|` matrix, one comparison batch.
    fn threshold_bits(&mut self, a: &SecretValue, exps: &[i32], label: &str) -> Result<SecretValue> {
        let n = a.len();
        let col = self.reshape(a, n, 1)?;
        let rep = self.repeat_cols(&col, exps.len())?;
        let shifts: Vec<f64> = (0..n)
            .flat_map(|_| exps.iter().map(|&e| -(e as f64).exp2()))
            .collect();
        let d = self.add_public(&rep, &shifts)?;
        let below = self.ltz(&d, label)?;
        self.public_sub(&[1.0], &below)
    }

    /// For monotone threshold bits, picks `coeffs[e*]` for the highest set
    /// threshold `e*` (or `c_none` when none is set), encoded at `scale`.
    fn select_by_leading(
        &mut self,
        t: &SecretValue,
        coeffs: &[f64],
        c_none: f64,
        scale: u32,
    ) -> Result<SecretValue> {
        let ring = self.ring();
        let width = coeffs.len();
        let enc = |c: f64| (c * (scale as f64).exp2()).round() as i128;
        let mut w = Vec::with_capacity(width);
        let mut prev = enc(c_none);
        for &c in coeffs {
            let cur = enc(c);
            w.push(ring.from_signed(cur - prev));
            prev = cur;
        }
        let rows = t.rows();
        let r = self.backend.linear(t.repr(), &|x| {
            (0..rows)
                .map(|i| {
                    x[i * width..(i + 1) * width]
                        .iter()
                        .zip(&w)
                        .fold(0u128, |s, (&b, &wi)| ring.add(s, ring.mul(b, wi)))
                })
                .collect()
        });
        let v = self.wrap(r, rows, 1, scale);
        self.add_public(&v, &[c_none])
    }

    /// `y` with `y · 2^-(e*+1) ≈ 1/b` and the power `2^-(e*+1)` at scale `f + 8`,
    /// for `b > 0` given as an `n × 1` column at scale `f`.
    fn reciprocal_parts(&mut self, b: &SecretValue, label: &str) -> Result<(SecretValue, SecretValue)> {
        let f = self.frac_bits();
        let exps: Vec<i32> = (-(f as i32) / 2..=DIV_MAX_EXP).collect();
        let t = self.threshold_bits(b, &exps, label)?;
        let pows: Vec<f64> = exps.iter().map(|&e| (-(e + 1) as f64).exp2()).collect();
        let norm = self.select_by_leading(&t, &pows, pows[0], f + 24)?;
        let out = self.select_by_leading(&t, &pows, pows[0], f + 8)?;
        let p = self.mul(b, &norm, label)?;
        let xn = self.trunc_to(&p, f, label)?;
        // xn in [0.5, 1): linear first guess, then y <- y (2 - xn y).
        let two_x = self.mul_int_public(&xn, &[2])?;
        let mut y = self.public_sub(&[2.9142], &two_x)?;
        for _ in 0..NEWTON_ITERS {
            let xy = self.mul_fx(&xn, &y, label)?;
            let u = self.public_sub(&[2.0], &xy)?;
            y = self.mul_fx(&y, &u, label)?;
        }
        Ok((y, out))
    }

    /// `1 / b` for `b ∈ [2^-(f/2), 2^21)`.
    pub fn reciprocal(&mut self, b: &SecretValue, label: &str) -> Result<SecretValue> {
        self.require_wide_ring("reciprocal")?;
        let f = self.frac_bits();
        let lo = (-((f / 2) as f64)).exp2();
        let hi = ((DIV_MAX_EXP + 1) as f64).exp2();
        let b = self.to_default_scale(b, label)?;
        self.check_domain(&b, "reciprocal", |v| v >= lo && v < hi, "[2^-(f/2), 2^21)")?;
        let (rows, cols) = b.shape();
        let col = self.reshape(&b, rows * cols, 1)?;
        let (y, pow) = self.reciprocal_parts(&col, label)?;
        let r = self.mul(&y, &pow, label)?;
        let r = self.trunc_to(&r, f, label)?;
        self.reshape(&r, rows, cols)
    }

    /// Elementwise `a / b` for `2^-(f/2) ≤ |b| < 2^21` and `|a/b| < 2^21`.
    pub fn div(&mut self, a: &SecretValue, b: &SecretValue, label: &str) -> Result<SecretValue> {
        self.require_wide_ring("div")?;
        if a.shape() != b.shape() {
            return Err(AbbError::Shape {
                op: "div",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let f = self.frac_bits();
        let lo = (-((f / 2) as f64)).exp2();
        let hi = ((DIV_MAX_EXP + 1) as f64).exp2();
        let a = self.to_default_scale(a, label)?;
        let b = self.to_default_scale(b, label)?;
        self.check_domain(&b, "div", |v| v.abs() >= lo && v.abs() < hi, "2^-(f/2) ≤ |b| < 2^21")?;
        let (rows, cols) = b.shape();
        let n = rows * cols;
        let a = self.reshape(&a, n, 1)?;
        let b = self.reshape(&b, n, 1)?;

        let neg = self.ltz(&b, label)?;
        let m2 = self.mul_int_public(&neg, &[-2])?;
        let sign = self.add_public(&m2, &[1.0])?;
        let abs_b = self.mul(&b, &sign, label)?;
        let (y, pow) = self.reciprocal_parts(&abs_b, label)?;
        let q = self.mul_fx(&a, &y, label)?;
        let q = self.mul(&q, &pow, label)?;
        let q = self.trunc_to(&q, f, label)?;
        let q = self.mul(&q, &sign, label)?;
        self.reshape(&q, rows, cols)
    }

    /// Elementwise square root for `0 ≤ a < 2^31`; `sqrt(0) = 0`.
    pub fn sqrt(&mut self, a: &SecretValue, label: &str) -> Result<SecretValue> {
        self.require_wide_ring("sqrt")?;
        let f = self.frac_bits();
        let hi = ((SQRT_MAX_EXP + 1) as f64).exp2();
        let a = self.to_default_scale(a, label)?;
        self.check_domain(&a, "sqrt", |v| (0.0..hi).contains(&v), "[0, 2^31)")?;
        let (rows, cols) = a.shape();
        let col = self.reshape(&a, rows * cols, 1)?;

        let exps: Vec<i32> = (-(f as i32)..=SQRT_MAX_EXP).collect();
        let t = self.threshold_bits(&col, &exps, label)?;
        // a in [2^e, 2^(e+1)) is divided by the next even power 2^E > 2^e.
        let even: Vec<i32> = exps.iter().map(|&e| if e % 2 == 0 { e + 2 } else { e + 1 }).collect();
        let norm_c: Vec<f64> = even.iter().map(|&e| (-e as f64).exp2()).collect();
        let out_c: Vec<f64> = even.iter().map(|&e| ((e / 2) as f64).exp2()).collect();
        let norm = self.select_by_leading(&t, &norm_c, norm_c[0], f + 24)?;
        let out = self.select_by_leading(&t, &out_c, 0.0, f + 8)?;

        let p = self.mul(&col, &norm, label)?;
        let xn = self.trunc_to(&p, f, label)?;
        // xn in [0.25, 1): inverse-sqrt Newton y <- y (3 - xn y^2) / 2.
        let three_x = self.mul_int_public(&xn, &[3])?;
        let half_view = self.rescale_view(&three_x, f + 1);
        let y0 = self.public_sub(&[2.5], &half_view)?;
        let mut y = self.trunc_to(&y0, f, label)?;
        for _ in 0..NEWTON_ITERS {
            let y2 = self.mul_fx(&y, &y, label)?;
            let xy2 = self.mul_fx(&xn, &y2, label)?;
            let u = self.public_sub(&[3.0], &xy2)?;
            let p = self.mul(&y, &u, label)?;
            let half = self.rescale_view(&p, 2 * f + 1);
            y = self.trunc_to(&half, f, label)?;
        }
        let s = self.mul_fx(&xn, &y, label)?;
        let r = self.mul(&s, &out, label)?;
        let r = self.trunc_to(&r, f, label)?;
        self.reshape(&r, rows, cols)
    }

    /// Elementwise `e^a` with inputs clamped to `[-16, 16]`.
    pub fn exp(&mut self, a: &SecretValue, label: &str) -> Result<SecretValue> {
        self.require_wide_ring("exp")?;
        let f = self.frac_bits();
        let a = self.to_default_scale(a, label)?;
        let (rows, cols) = a.shape();
        let n = rows * cols;
        let x = self.reshape(&a, n, 1)?;

        let over = self.public_sub(&[EXP_CLAMP], &x)?;
        let under = self.add_public(&x, &[EXP_CLAMP])?;
        let both = self.concat_rows(&[&over, &under])?;
        let bits = self.ltz(&both, label)?;
        let neg_under = self.neg(&under)?;
        let fix = self.concat_rows(&[&over, &neg_under])?;
        let corr = self.mul(&bits, &fix, label)?;
        let hi = self.slice_rows(&corr, 0, n)?;
        let lo = self.slice_rows(&corr, n, 2 * n)?;
        let x = self.add(&x, &hi)?;
        let x = self.add(&x, &lo)?;

        let z = self.rescale_view(&x, f + EXP_SQUARINGS);
        let st = f + 8;
        let zs = z.scale();
        let p = self.mul_public(&z, &[1.0 / factorial(EXP_TAYLOR_DEGREE)], st)?;
        let mut p = self.trunc(&p, zs, label)?;
        p = self.add_public(&p, &[1.0 / factorial(EXP_TAYLOR_DEGREE - 1)])?;
        for k in (0..EXP_TAYLOR_DEGREE - 1).rev() {
            let q = self.mul(&p, &z, label)?;
            p = self.trunc(&q, zs, label)?;
            p = self.add_public(&p, &[1.0 / factorial(k)])?;
        }
        let mut y = self.trunc_to(&p, f, label)?;
        for _ in 0..EXP_SQUARINGS {
            y = self.mul_fx(&y, &y, label)?;
        }
        self.reshape(&y, rows, cols)
    }

    /// `max(a, c)` for a public constant.
    pub fn max_public(&mut self, a: &SecretValue, c: f64, label: &str) -> Result<SecretValue> {
        let d = self.add_public(a, &[-c])?;
        let s = self.ltz(&d, label)?;
        let diff = self.neg(&d)?;
        let m = self.mul(&s, &diff, label)?;
        self.add(a, &m)
    }

    /// Elementwise maximum of two secrets.
    pub fn max(&mut self, a: &SecretValue, b: &SecretValue, label: &str) -> Result<SecretValue> {
        let d = self.sub(a, b)?;
        let s = self.ltz(&d, label)?;
        let diff = self.neg(&d)?;
        let m = self.mul(&s, &diff, label)?;
        self.add(a, &m)
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, z: &SecretValue, label: &str) -> Result<SecretValue> {
        let z = self.to_default_scale(z, label)?;
        let (rows, cols) = z.shape();
        let mut m = self.slice_cols(&z, 0, 1)?;
        for j in 1..cols {
            let c = self.slice_cols(&z, j, j + 1)?;
            m = self.max(&m, &c, label)?;
        }
        let mb = self.repeat_cols(&m, cols)?;
        let shifted = self.sub(&z, &mb)?;
        let e = self.exp(&shifted, label)?;
        let s = self.sum_rows(&e)?;
        let r = self.reciprocal(&s, label)?;
        let rb = self.repeat_cols(&r, cols)?;
        let p = self.mul_fx(&e, &rb, label)?;
        debug_assert_eq!(p.shape(), (rows, cols));
        Ok(p)
    }

    /// Euclidean norm of each row as an `r × 1` column.
    pub fn row_norms(&mut self, g: &SecretValue, label: &str) -> Result<SecretValue> {
        let f = self.frac_bits();
        let g = self.to_default_scale(g, label)?;
        let sq = self.mul(&g, &g, label)?;
        let ss = self.sum_rows(&sq)?;
        let ss = self.trunc_to(&ss, f, label)?;
        self.sqrt(&ss, label)
    }

    /// Scale each row to `g_j / max(1, ‖g_j‖ / γ)`.
    pub fn clip_rows(&mut self, g: &SecretValue, gamma: f64, label: &str) -> Result<SecretValue> {
        assert!(gamma > 0.0, "clipping threshold must be positive");
        let f = self.frac_bits();
        let g = self.to_default_scale(g, label)?;
        let norms = self.row_norms(&g, label)?;
        let r = self.mul_public(&norms, &[1.0 / gamma], f)?;
        let r = self.trunc_to(&r, f, label)?;
        let m = self.max_public(&r, 1.0, label)?;
        let inv = self.reciprocal(&m, label)?;
        let b = self.repeat_cols(&inv, g.cols())?;
        self.mul_fx(&g, &b, label)
    }
}
