//! Secure Gaussian sampling, Rényi-DP accounting for the (subsampled)
//! Gaussian mechanism, and noise-multiplier calibration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abb::{AbbError, Cohort, SecretValue};
use crate::transport::PartyId;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParams(String),
    #[error("target epsilon {target} unreachable with sigma <= {max_sigma} (got {achieved})")]
    Unachievable {
        target: f64,
        max_sigma: f64,
        achieved: f64,
    },
    #[error("calibration cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, DpError>;

/// Corrupted parties tolerated by the secure sampler.
pub const CORRUPTION_THRESHOLD: usize = 1;
pub const N_SERVERS: usize = 3;

pub const SIGMA_MIN: f64 = 0.3;
pub const SIGMA_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_gamma: f64,
    pub sigma: f64,
}

impl PrivacyParams {
    /// Hard errors; a large `delta` relative to the dataset is only warned about.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0) {
            errs.push(format!("epsilon must be > 0 (got {})", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errs.push(format!("delta must lie in (0, 1) (got {})", self.delta));
        }
        if !(self.clip_gamma > 0.0) {
            errs.push(format!("clip_gamma must be > 0 (got {})", self.clip_gamma));
        }
        if !(self.sigma >= 0.0) {
            errs.push(format!("sigma must be >= 0 (got {})", self.sigma));
        }
        errs
    }

    pub fn delta_warning(&self, dataset_size: usize) -> Option<String> {
        (self.delta >= 1.0 / dataset_size as f64).then(|| {
            format!(
                "delta {} is not below 1/M = {}",
                self.delta,
                1.0 / dataset_size as f64
            )
        })
    }
}

/// Secret-shared `T × d` Gaussian table with nominal per-entry deviation `scale`.
#[derive(Debug, Clone)]
pub struct NoiseTable {
    pub value: SecretValue,
    pub scale: f64,
}

impl NoiseTable {
    pub fn steps(&self) -> usize {
        self.value.rows()
    }
    pub fn width(&self) -> usize {
        self.value.cols()
    }
    /// Reconstructed variance when all three servers are honest.
    pub fn honest_variance(&self) -> f64 {
        N_SERVERS as f64 * self.per_server_variance()
    }
    pub fn per_server_variance(&self) -> f64 {
        self.scale * self.scale / (N_SERVERS - CORRUPTION_THRESHOLD) as f64
    }
}

/// Each server secret-shares a local Gaussian matrix of variance
/// `scale² / (K − t)`; the table is the sum of the three sharings.
pub fn gs_protocol(cohort: &mut Cohort, steps: usize, width: usize, scale: f64) -> std::result::Result<NoiseTable, AbbError> {
    if steps == 0 || width == 0 || !(scale >= 0.0) {
        return Err(AbbError::Unsupported(format!(
            "noise table needs steps, width >= 1 and scale >= 0 (got {steps}, {width}, {scale})"
        )));
    }
    let sd = scale / ((N_SERVERS - CORRUPTION_THRESHOLD) as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite deviation");
    let n = steps * width;
    let local: Vec<Vec<f64>> = (0..N_SERVERS)
        .map(|s| {
            let rng = cohort.party_rng(PartyId::Server(s as u8));
            (0..n).map(|_| normal.sample(rng)).collect()
        })
        .collect();
    let items: Vec<(&[f64], usize, usize, PartyId)> = local
        .iter()
        .enumerate()
        .map(|(s, v)| (v.as_slice(), steps, width, PartyId::Server(s as u8)))
        .collect();
    let parts = cohort.input_many(&items, "gs.input")?;
    let sum = cohort.add(&parts[0], &parts[1])?;
    let value = cohort.add(&sum, &parts[2])?;
    Ok(NoiseTable { value, scale })
}

/// RDP of the Gaussian mechanism with noise multiplier `sigma`.
pub fn rdp_gaussian(alpha: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    alpha / (2.0 * sigma * sigma)
}

fn ln_binom(n: u32, k: u32) -> f64 {
    let lf = |m: u32| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    lf(n) - lf(k) - lf(n - k)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Integer-order RDP of the sampled Gaussian mechanism:
/// `ln Σ_k C(α,k) (1−q)^(α−k) q^k exp((k²−k)/(2σ²)) / (α−1)`.
pub fn rdp_subsampled_gaussian(alpha: u32, sigma: f64, q: f64) -> f64 {
    assert!(alpha >= 2, "integer order >= 2");
    assert!(q > 0.0 && q <= 1.0, "sampling ratio in (0, 1]");
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return rdp_gaussian(alpha as f64, sigma);
    }
    let terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let kf = k as f64;
            ln_binom(alpha, k)
                + (alpha - k) as f64 * (1.0 - q).ln()
                + kf * q.ln()
                + (kf * kf - kf) / (2.0 * sigma * sigma)
        })
        .collect();
    (log_sum_exp(&terms) / (alpha - 1) as f64).max(0.0)
}

/// Orders 1.5 and 2..=256.
pub fn default_orders() -> Vec<f64> {
    std::iter::once(1.5).chain((2..=256).map(f64::from)).collect()
}

/// RDP curve of one step. Order 1.5 is bounded by the order-2 value
/// (RDP is non-decreasing in the order).
pub fn rdp_curve(orders: &[f64], sigma: f64, q: f64) -> Vec<(f64, f64)> {
    orders
        .iter()
        .map(|&a| {
            let int_order = a.ceil().max(2.0) as u32;
            (a, rdp_subsampled_gaussian(int_order, sigma, q))
        })
        .collect()
}

/// `min_α T·ε_α + ln(1/δ)/(α−1)`, with the minimizing order.
pub fn compose_and_convert(curve: &[(f64, f64)], steps: u64, delta: f64) -> (f64, f64) {
    assert!(!curve.is_empty(), "empty order grid");
    curve
        .iter()
        .map(|&(a, e)| (steps as f64 * e + (1.0 / delta).ln() / (a - 1.0), a))
        .fold((f64::INFINITY, f64::NAN), |best, cur| if cur.0 < best.0 { cur } else { best })
}

/// Accounting for `steps` compositions of a Gaussian mechanism sampled at rate `q`.
/// Immutable once built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accountant {
    sigma: f64,
    q: f64,
    steps: u64,
    delta: f64,
}

impl Accountant {
    pub fn new(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(DpError::InvalidParams(format!("q must lie in (0, 1] (got {q})")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(DpError::InvalidParams(format!("delta must lie in (0, 1) (got {delta})")));
        }
        if !(sigma >= 0.0) {
            return Err(DpError::InvalidParams(format!("sigma must be >= 0 (got {sigma})")));
        }
        Ok(Self { sigma, q, steps, delta })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn q(&self) -> f64 {
        self.q
    }
    pub fn steps(&self) -> u64 {
        self.steps
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        if self.sigma == 0.0 {
            return f64::INFINITY;
        }
        compose_and_convert(&rdp_curve(&default_orders(), self.sigma, self.q), self.steps, self.delta).0
    }
}

/// Smallest `σ ∈ [0.3, 100]` whose accounted ε does not exceed the target,
/// located by bisection until ε lies within 1% below the target.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(DpError::InvalidParams(format!(
            "target epsilon must be > 0 (got {target_epsilon})"
        )));
    }
    let eps = |s: f64| Accountant::new(s, q, steps, delta).map(|a| a.epsilon());
    let at_max = eps(SIGMA_MAX)?;
    if at_max > target_epsilon {
        return Err(DpError::Unachievable {
            target: target_epsilon,
            max_sigma: SIGMA_MAX,
            achieved: at_max,
        });
    }
    if eps(SIGMA_MIN)? <= target_epsilon {
        return Ok(SIGMA_MIN);
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let e = eps(mid)?;
        if e > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
            if e >= 0.99 * target_epsilon {
                break;
            }
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma: f64,
    pub epsilon_accounted: f64,
}

/// Calibration results keyed by `(ε, δ, q, T, mechanism)`, persisted as JSON.
#[derive(Debug)]
pub struct CalibrationCache {
    path: PathBuf,
    entries: BTreeMap<String, Calibration>,
}

impl CalibrationCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| DpError::Cache(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(DpError::Cache(e.to_string())),
        };
        Ok(Self { path, entries })
    }

    pub fn key(epsilon: f64, delta: f64, q: f64, steps: u64, mechanism: &str) -> String {
        format!("{mechanism}|eps={epsilon:e}|delta={delta:e}|q={q:e}|T={steps}")
    }

    pub fn get(&self, key: &str) -> Option<Calibration> {
        self.entries.get(key).copied()
    }

    /// Returns the cached entry and whether it was already present.
    pub fn get_or_calibrate(
        &mut self,
        epsilon: f64,
        delta: f64,
        q: f64,
        steps: u64,
        mechanism: &str,
    ) -> Result<(Calibration, bool)> {
        let key = Self::key(epsilon, delta, q, steps, mechanism);
        if let Some(c) = self.get(&key) {
            return Ok((c, true));
        }
        let sigma = calibrate_sigma(epsilon, delta, q, steps)?;
        let c = Calibration {
            sigma,
            epsilon_accounted: Accountant::new(sigma, q, steps, delta)?.epsilon(),
        };
        self.entries.insert(key, c);
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| DpError::Cache(e.to_string()))?;
        }
        let json = serde_json::to_string_pretty(&self.entries).map_err(|e| DpError::Cache(e.to_string()))?;
        fs::write(&self.path, json).map_err(|e| DpError::Cache(e.to_string()))?;
        Ok((c, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::FixedPointSpec;

    #[test]
    fn gaussian_closed_form() {
        assert_eq!(rdp_gaussian(2.0, 1.0), 1.0);
        assert_eq!(rdp_gaussian(2.0, 2.0), 0.25);
        assert!(rdp_gaussian(3.0, 1.0) > rdp_gaussian(2.0, 1.0));
        assert!(rdp_gaussian(2.0, 0.0).is_infinite());
    }

    #[test]
    fn subsampled_limits() {
        assert!((rdp_subsampled_gaussian(2, 4.0, 1.0) - 0.0625).abs() < 1e-15);
        assert!(rdp_subsampled_gaussian(8, 1.0, 1e-9) < 1e-12);
        let mut last = 0.0;
        for i in 1..=20 {
            let v = rdp_subsampled_gaussian(4, 1.5, i as f64 / 20.0);
            assert!(v >= last);
            last = v;
        }
    }

    /// `D_α((1−q)N(0,σ²) + qN(1,σ²) ‖ N(0,σ²))` by trapezoidal integration.
    fn renyi_numeric(alpha: f64, sigma: f64, q: f64) -> f64 {
        let s2 = 2.0 * sigma * sigma;
        let ln_pdf0 = |x: f64| -x * x / s2 - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let (lo, hi, n) = (-40.0 * sigma, 40.0 * sigma + alpha, 400_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let ratio = (1.0 - q) + q * ((2.0 * x - 1.0) / s2).exp();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * (ln_pdf0(x) + alpha * ratio.ln()).exp();
        }
        (s * h).ln() / (alpha - 1.0)
    }

    #[test]
    fn subsampled_matches_numeric_divergence() {
        for &(a, s, q) in &[(2u32, 4.0, 1.0), (3, 1.0, 0.1), (5, 2.0, 0.5), (8, 1.0, 0.01)] {
            let got = rdp_subsampled_gaussian(a, s, q);
            let want = renyi_numeric(a as f64, s, q);
            assert!((got - want).abs() <= 1e-6 * want.max(1e-6), "α={a} σ={s} q={q}: {got} vs {want}");
        }
        let v = rdp_subsampled_gaussian(2, 4.0, 1.0);
        assert!((0.0625..=0.125).contains(&v));
    }

    #[test]
    fn conversion_examples() {
        let curve = rdp_curve(&default_orders(), 1.0, 0.01);
        let (e0, _) = compose_and_convert(&curve, 0, 1e-5);
        let want = (1e5f64).ln() / 255.0;
        assert!((e0 - want).abs() < 1e-12);
        let mut last = 0.0;
        for t in [1, 2, 4, 8, 16, 1000] {
            let (e, _) = compose_and_convert(&curve, t, 1e-5);
            assert!(e >= last);
            last = e;
        }
    }

    #[test]
    fn reference_accountant_value() {
        // Independent reference accountant, recorded before this code was written.
        let eps = Accountant::new(1.0, 0.01, 10_000, 1e-5).unwrap().epsilon();
        assert!((eps - 7.469182).abs() / 7.469182 < 0.05, "{eps}");
    }

    #[test]
    fn monotone_in_sigma_q_steps() {
        let e = |s, q, t| Accountant::new(s, q, t, 1e-5).unwrap().epsilon();
        assert!(e(1.0, 0.01, 100) >= e(2.0, 0.01, 100));
        assert!(e(1.0, 0.02, 100) >= e(1.0, 0.01, 100));
        assert!(e(1.0, 0.01, 200) >= e(1.0, 0.01, 100));
    }

    #[test]
    fn calibration_round_trip() {
        for &(target, q, t) in &[(1.0, 0.05, 400u64), (8.0, 1.0, 1), (2.0, 0.01, 10_000)] {
            let s = calibrate_sigma(target, 1e-5, q, t).unwrap();
            let e = Accountant::new(s, q, t, 1e-5).unwrap().epsilon();
            assert!(e <= target && e >= 0.99 * target, "{target}: {e}");
        }
        let s1 = calibrate_sigma(1.0, 1e-5, 0.05, 400).unwrap();
        let s10 = calibrate_sigma(10.0, 1e-5, 0.05, 400).unwrap();
        assert!(s10 <= s1);
    }

    #[test]
    fn single_release_respects_classical_bound() {
        for eps in [0.5, 1.0, 2.0, 8.0] {
            let s = calibrate_sigma(eps, 1e-5, 1.0, 1).unwrap();
            let classical = (2.0 * (1.25f64 / 1e-5).ln()).sqrt() / eps;
            assert!(s >= classical, "{eps}: {s} < {classical}");
        }
    }

    #[test]
    fn unreachable_target() {
        assert!(matches!(
            calibrate_sigma(1e-4, 1e-5, 1.0, 1000),
            Err(DpError::Unachievable { .. })
        ));
        assert!(calibrate_sigma(0.0, 1e-5, 1.0, 1).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        let mut c = CalibrationCache::open(&path).unwrap();
        let (a, hit) = c.get_or_calibrate(8.0, 1e-5, 1.0, 1, "gaussian").unwrap();
        assert!(!hit);
        let mut c2 = CalibrationCache::open(&path).unwrap();
        let (b, hit) = c2.get_or_calibrate(8.0, 1e-5, 1.0, 1, "gaussian").unwrap();
        assert!(hit);
        assert_eq!(a, b);
    }

    #[test]
    fn params_validation() {
        let p = PrivacyParams {
            epsilon: 1.0,
            delta: 1.0,
            clip_gamma: 0.0,
            sigma: -1.0,
        };
        assert_eq!(p.validate().len(), 3);
        let ok = PrivacyParams {
            epsilon: 1.0,
            delta: 1e-5,
            clip_gamma: 1.2,
            sigma: 1.0,
        };
        assert!(ok.validate().is_empty());
        assert!(ok.delta_warning(1000).is_none());
        assert!(ok.delta_warning(1_000_000).is_some());
    }

    #[test]
    fn gs_zero_scale_and_variance() {
        let mut c = Cohort::oracle(FixedPointSpec::default(), 3);
        let z = gs_protocol(&mut c, 4, 3, 0.0).unwrap();
        assert!(c.probe(&z.value).unwrap().iter().all(|&v| v == 0.0));

        let t = gs_protocol(&mut c, 1000, 10, 1.0).unwrap();
        let v = c.probe(&t.value).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.5).abs() < 0.1, "{var}");
        assert!(mean.abs() < 3.0 * (1.5f64 / n).sqrt(), "{mean}");
        assert_eq!(t.honest_variance(), 1.5);
    }
}
