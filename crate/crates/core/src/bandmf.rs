//! Banded square-root (p-BSR) factorization of the SGD workload, its
//! sensitivity under (κ, b)-participation, and correlated noise streams.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abb::{AbbError, Cohort, SecretValue};
use crate::dpcore::NoiseTable;

#[derive(Debug, Error, PartialEq)]
pub enum BandError {
    #[error("leading coefficient is zero")]
    Singular,
    #[error("participation schema infeasible: 1 + (kappa-1)*b = {needed} > T = {steps}")]
    Infeasible { needed: usize, steps: usize },
    #[error("invalid band {p} for T = {steps}")]
    InvalidBand { p: usize, steps: usize },
}

/// Fraction bits used for the public inverse coefficients in the secret-shared stream.
pub const NOISE_COEFF_BITS: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    /// weight decay
    pub alpha: f64,
    /// momentum
    pub beta: f64,
    pub eta: f64,
    pub steps: usize,
}

impl WorkloadParams {
    /// Setting 1: plain SGD (α = 1, β = 0); setting 2: momentum 0.9.
    pub fn setting(n: u8, eta: f64, steps: usize) -> Option<Self> {
        let beta = match n {
            1 => 0.0,
            2 => 0.9,
            _ => return None,
        };
        Some(Self {
            alpha: 1.0,
            beta,
            eta,
            steps,
        })
    }

    /// Coefficients `a_j = Σ_{i ≤ j} α^(j−i) β^i` of the lower-triangular Toeplitz workload.
    pub fn workload_coeffs(&self) -> Vec<f64> {
        (0..self.steps)
            .map(|j| (0..=j).map(|i| self.alpha.powi((j - i) as i32) * self.beta.powi(i as i32)).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticipationSchema {
    pub kappa: usize,
    pub b: usize,
}

impl ParticipationSchema {
    pub fn check(&self, steps: usize) -> Result<(), BandError> {
        let needed = 1 + (self.kappa.max(1) - 1) * self.b;
        if self.kappa == 0 || needed > steps {
            return Err(BandError::Infeasible { needed, steps });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsrCoefficients {
    pub c: Vec<f64>,
}

impl BsrCoefficients {
    pub fn band(&self) -> usize {
        self.c.len()
    }

    pub fn norm(&self) -> f64 {
        self.c.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// First `steps` coefficients of the inverse Toeplitz matrix.
    pub fn inverse_coeffs(&self, steps: usize) -> Result<Vec<f64>, BandError> {
        let c = &self.c;
        if c[0] == 0.0 {
            return Err(BandError::Singular);
        }
        let mut d = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut s = if t == 0 { 1.0 } else { 0.0 };
            for j in 1..c.len().min(t + 1) {
                s -= c[j] * d[t - j];
            }
            d.push(s / c[0]);
        }
        Ok(d)
    }

    /// One value per line, full precision.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in &self.c {
            writeln!(out, "{v:.17e}")?;
        }
        Ok(())
    }
}

/// `|C(−1/2, i)|` by `r_i = r_{i−1} (i − 1/2) / i`.
pub fn binom_half(i: usize) -> f64 {
    (1..=i).fold(1.0, |r, k| r * (k as f64 - 0.5) / k as f64)
}

/// `c_j = Σ_{i ≤ j} α^(j−i) r_(j−i) r_i β^i` for `j < p`.
pub fn bsr_coeffs(params: &WorkloadParams, p: usize) -> Result<BsrCoefficients, BandError> {
    if p == 0 || p > params.steps {
        return Err(BandError::InvalidBand { p, steps: params.steps });
    }
    let r: Vec<f64> = (0..p).map(binom_half).collect();
    let c = (0..p)
        .map(|j| {
            (0..=j)
                .map(|i| params.alpha.powi((j - i) as i32) * r[j - i] * r[i] * params.beta.powi(i as i32))
                .sum()
        })
        .collect();
    Ok(BsrCoefficients { c })
}

/// `y_t = Σ_{j < p, j ≤ t} c_j x_(t−j)` over a stream of rows.
pub fn toeplitz_apply(c: &BsrCoefficients, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..xs.len())
        .map(|t| {
            let mut y = vec![0.0; xs[t].len()];
            for (j, &cj) in c.c.iter().enumerate().take(t + 1) {
                for (o, &x) in y.iter_mut().zip(&xs[t - j]) {
                    *o += cj * x;
                }
            }
            y
        })
        .collect()
}

/// Streaming forward substitution keeping only the last `p − 1` outputs.
#[derive(Debug, Clone)]
pub struct InverseStream {
    c: Vec<f64>,
    history: VecDeque<Vec<f64>>,
}

impl InverseStream {
    pub fn new(c: &BsrCoefficients) -> Result<Self, BandError> {
        if c.c[0] == 0.0 {
            return Err(BandError::Singular);
        }
        Ok(Self {
            c: c.c.clone(),
            history: VecDeque::with_capacity(c.c.len()),
        })
    }

    /// `x_t = (z_t − Σ_{j=1}^{min(p−1,t)} c_j x_(t−j)) / c_0`.
    pub fn push(&mut self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        for (j, prev) in self.history.iter().enumerate() {
            let cj = self.c[j + 1];
            for (o, &p) in x.iter_mut().zip(prev) {
                *o -= cj * p;
            }
        }
        for o in &mut x {
            *o /= self.c[0];
        }
        if self.c.len() > 1 {
            if self.history.len() == self.c.len() - 1 {
                self.history.pop_back();
            }
            self.history.push_front(x.clone());
        }
        x
    }

    pub fn memory_rows(&self) -> usize {
        self.history.len()
    }
}

pub fn toeplitz_inv_apply(c: &BsrCoefficients, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, BandError> {
    let mut s = InverseStream::new(c)?;
    Ok(zs.iter().map(|z| s.push(z)).collect())
}

/// `‖Σ_{j<κ} Ω[:, j·b]‖₂` for the `T × T` banded Toeplitz `Ω`, accumulated
/// column by column.
pub fn sensitivity(c: &BsrCoefficients, schema: &ParticipationSchema, steps: usize) -> Result<f64, BandError> {
    schema.check(steps)?;
    let mut acc = vec![0.0; steps];
    for k in 0..schema.kappa {
        let col = k * schema.b;
        for (j, &cj) in c.c.iter().enumerate() {
            if col + j < steps {
                acc[col + j] += cj;
            }
        }
    }
    Ok(acc.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Whether the disjoint-support identity `sqrt(κ)·‖c‖` holds exactly.
pub fn disjoint_support(c: &BsrCoefficients, schema: &ParticipationSchema, steps: usize) -> bool {
    c.band() <= schema.b && (schema.kappa - 1) * schema.b + c.band() <= steps
}

/// Secret-shared `Ω⁻¹ · table`, produced row by row with public coefficients.
#[derive(Debug, Clone)]
pub struct CorrelatedNoise {
    table: SecretValue,
    inv: Vec<f64>,
}

impl CorrelatedNoise {
    pub fn new(table: &NoiseTable, c: &BsrCoefficients) -> Result<Self, BandError> {
        Ok(Self {
            inv: c.inverse_coeffs(table.steps())?,
            table: table.value.clone(),
        })
    }

    pub fn steps(&self) -> usize {
        self.table.rows()
    }

    /// `Ω⁻¹[t, :]`.
    pub fn inverse_row(&self, t: usize) -> Vec<f64> {
        (0..=t).map(|k| self.inv[t - k]).collect()
    }

    /// Row `t` as a `1 × d` sharing at scale `table.scale + NOISE_COEFF_BITS` (no communication).
    pub fn row(&self, cohort: &mut Cohort, t: usize) -> Result<SecretValue, AbbError> {
        let terms: Vec<(usize, f64)> = (0..=t)
            .map(|j| (t - j, self.inv[j]))
            .filter(|&(_, c)| c != 0.0)
            .collect();
        cohort.combine_rows(&self.table, &terms, NOISE_COEFF_BITS)
    }
}
