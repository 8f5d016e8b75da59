//! Client-side reconstruction of clipped per-sample embedding gradients from
//! a privatized aggregate.
//!
//! The observation is `y = B·g̃ = H ĝ + e` with `H` of shape `n^L × (d·B)`,
//! column block `j` holding the Jacobian of sample `j`. The bound assumes
//! `e ~ N(0, (σ_t/B)² I)`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("system matrix is singular to working precision (lambda = {lambda})")]
    Singular { lambda: f64 },
}

pub type Result<T> = std::result::Result<T, EstimationError>;

/// Floor a caller may retry with after a singular solve.
pub const LAMBDA_FLOOR: f64 = 1e-10;

/// Above this many unknowns the eigen-extremes use iteration.
pub const EXACT_EIGEN_LIMIT: usize = 512;

/// Linear operator `H`.
pub trait Design: Send + Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64>;
    /// `H Hᵀ`
    fn outer(&self) -> DMatrix<f64>;
    /// `Hᵀ H`
    fn inner(&self) -> DMatrix<f64>;
    fn dense(&self) -> DMatrix<f64>;
}

impl Design for DMatrix<f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }
    fn n_cols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        self.tr_mul(y)
    }
    fn outer(&self) -> DMatrix<f64> {
        self * self.transpose()
    }
    fn inner(&self) -> DMatrix<f64> {
        self.tr_mul(self)
    }
    fn dense(&self) -> DMatrix<f64> {
        self.clone()
    }
}

impl Design for crate::models::AdapterDesign {
    fn n_rows(&self) -> usize {
        self.n_rows()
    }
    fn n_cols(&self) -> usize {
        self.n_cols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.mul(x)
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        self.mul_t(y)
    }
    fn outer(&self) -> DMatrix<f64> {
        self.outer_gram()
    }
    fn inner(&self) -> DMatrix<f64> {
        self.inner_gram()
    }
    fn dense(&self) -> DMatrix<f64> {
        self.to_dense()
    }
}

pub struct LinearSystem {
    pub design: Box<dyn Design>,
    /// `B · g̃`
    pub observation: DVector<f64>,
    pub batch: usize,
    pub sigma_t: f64,
}

impl std::fmt::Debug for LinearSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSystem")
            .field("rows", &self.design.n_rows())
            .field("cols", &self.design.n_cols())
            .field("batch", &self.batch)
            .field("sigma_t", &self.sigma_t)
            .finish()
    }
}

/// `σ·γ·sens·‖Ω⁻¹[t,:]‖^k` with `k = 2` when `squared`, else `k = 1`.
pub fn effective_sigma(sigma: f64, gamma: f64, sens: f64, inv_row_norm: f64, squared: bool) -> f64 {
    let n = if squared { inv_row_norm * inv_row_norm } else { inv_row_norm };
    sigma * gamma * sens * n
}

/// Stacks per-sample Jacobians (`n^L × d` each) column-block-wise.
pub fn assemble(jacobians: &[DMatrix<f64>], release: &[f64], sigma_t: f64) -> Result<LinearSystem> {
    let first = jacobians
        .first()
        .ok_or_else(|| EstimationError::Shape("no Jacobians".into()))?;
    let (n, d) = first.shape();
    if let Some(j) = jacobians.iter().position(|j| j.shape() != (n, d)) {
        return Err(EstimationError::Shape(format!(
            "Jacobian {j} is {:?}, expected {:?}",
            jacobians[j].shape(),
            (n, d)
        )));
    }
    let b = jacobians.len();
    let mut h = DMatrix::zeros(n, d * b);
    for (j, jac) in jacobians.iter().enumerate() {
        h.columns_mut(j * d, d).copy_from(jac);
    }
    assemble_with(Box::new(h), release, b, sigma_t)
}

pub fn assemble_with(design: Box<dyn Design>, release: &[f64], batch: usize, sigma_t: f64) -> Result<LinearSystem> {
    if release.len() != design.n_rows() {
        return Err(EstimationError::Shape(format!(
            "release of length {} for {} rows",
            release.len(),
            design.n_rows()
        )));
    }
    if batch == 0 || design.n_cols() % batch != 0 {
        return Err(EstimationError::Shape(format!("{} columns for batch {batch}", design.n_cols())));
    }
    let observation = DVector::from_iterator(release.len(), release.iter().map(|v| v * batch as f64));
    Ok(LinearSystem {
        design,
        observation,
        batch,
        sigma_t,
    })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub g_hat: DVector<f64>,
    pub bound: Option<f64>,
}

impl Reconstruction {
    /// `B × d` view, one row per sample.
    pub fn rows(&self, batch: usize) -> DMatrix<f64> {
        let d = self.g_hat.len() / batch;
        DMatrix::from_row_slice(batch, d, self.g_hat.as_slice())
    }
}

impl LinearSystem {
    /// `(σ_t / B)²`
    pub fn default_lambda(&self) -> f64 {
        (self.sigma_t / self.batch as f64).powi(2)
    }

    pub fn unknowns(&self) -> usize {
        self.design.n_cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.unknowns() / self.batch
    }
}

/// `(HᵀH + λI)⁻¹ Hᵀ y`, through the dual `Hᵀ(HHᵀ + λI)⁻¹ y` when `H` is wide.
pub fn ridge_solve(sys: &LinearSystem, lambda: f64) -> Result<Reconstruction> {
    let (n, m) = (sys.design.n_rows(), sys.design.n_cols());
    if n == 0 {
        return Err(EstimationError::Shape("empty system".into()));
    }
    let g_hat = if m <= n {
        let mut g = sys.design.inner();
        for i in 0..m {
            g[(i, i)] += lambda;
        }
        let rhs = sys.design.apply_t(&sys.observation);
        spd_solve(g, &rhs, lambda)?
    } else {
        if lambda <= 0.0 {
            return Err(EstimationError::Singular { lambda });
        }
        let mut g = sys.design.outer();
        for i in 0..n {
            g[(i, i)] += lambda;
        }
        let alpha = spd_solve(g, &sys.observation, lambda)?;
        sys.design.apply_t(&alpha)
    };
    Ok(Reconstruction { g_hat, bound: None })
}

fn spd_solve(g: DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let scale = g.diagonal().amax().max(f64::MIN_POSITIVE);
    let chol = Cholesky::new(g).ok_or(EstimationError::Singular { lambda })?;
    // reject numerically rank-deficient factors
    let l = chol.l_dirty();
    let min_piv = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_piv <= scale * 1e-13 {
        return Err(EstimationError::Singular { lambda });
    }
    Ok(chol.solve(rhs))
}

/// Minimum-norm least squares through an SVD of the dense design.
pub fn least_squares(sys: &LinearSystem) -> Result<Reconstruction> {
    let svd = sys.design.dense().svd(true, true);
    let g_hat = svd
        .solve(&sys.observation, 1e-12)
        .map_err(|_| EstimationError::Singular { lambda: 0.0 })?;
    Ok(Reconstruction { g_hat, bound: None })
}

/// Smallest and largest eigenvalue of `HᵀH` (zero smallest when `H` is wide).
pub fn eigen_extremes(design: &dyn Design) -> (f64, f64) {
    let (n, m) = (design.n_rows(), design.n_cols());
    let g = if m <= n { design.inner() } else { design.outer() };
    let (lo, hi) = if g.nrows() <= EXACT_EIGEN_LIMIT {
        let e = SymmetricEigen::new(g).eigenvalues;
        (e.min(), e.max())
    } else {
        iterative_extremes(&g)
    };
    let lo = if m > n { 0.0 } else { lo.max(0.0) };
    (lo, hi)
}

fn iterative_extremes(g: &DMatrix<f64>) -> (f64, f64) {
    let n = g.nrows();
    let start = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618).fract());
    let mut v = start.normalize();
    let mut hi = 0.0;
    for _ in 0..1000 {
        let w = g * &v;
        let next = w.dot(&v);
        let norm = w.norm();
        if norm == 0.0 {
            return (0.0, 0.0);
        }
        v = w / norm;
        if (next - hi).abs() <= 1e-12 * next.abs() {
            hi = next;
            break;
        }
        hi = next;
    }
    let Some(chol) = Cholesky::new(g.clone()) else {
        return (0.0, hi);
    };
    let mut v = start.normalize();
    let mut lo_inv = 0.0;
    for _ in 0..1000 {
        let w = chol.solve(&v);
        let next = w.dot(&v);
        v = w.normalize();
        if (next - lo_inv).abs() <= 1e-12 * next.abs() {
            lo_inv = next;
            break;
        }
        lo_inv = next;
    }
    (1.0 / lo_inv, hi)
}

/// `(σ_t⁴γ² + σ_t²·d·B³·μ_max) / (B²μ_min + σ_t²)²`
pub fn bound_formula(sigma_t: f64, gamma: f64, d: usize, batch: usize, mu_min: f64, mu_max: f64) -> f64 {
    let s2 = sigma_t * sigma_t;
    if s2 == 0.0 {
        return 0.0;
    }
    let b = batch as f64;
    (s2 * s2 * gamma * gamma + s2 * d as f64 * b.powi(3) * mu_max) / (b * b * mu_min + s2).powi(2)
}

pub fn error_bound(sys: &LinearSystem, gamma: f64) -> f64 {
    if sys.sigma_t == 0.0 {
        return 0.0;
    }
    let (lo, hi) = eigen_extremes(sys.design.as_ref());
    bound_formula(sys.sigma_t, gamma, sys.embed_dim(), sys.batch, lo, hi)
}

/// Exact expected squared error of ridge at `lambda`, split into its bias and
/// variance parts, for a known `ĝ` and noise std `noise_std`.
#[derive(Debug, Clone, Copy)]
pub struct ErrorTerms {
    pub bias: f64,
    pub variance: f64,
}

pub fn error_terms(design: &dyn Design, g_true: &DVector<f64>, lambda: f64, noise_std: f64) -> Result<ErrorTerms> {
    let mut reg = design.inner();
    let gram = reg.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += lambda;
    }
    let inv = reg.try_inverse().ok_or(EstimationError::Singular { lambda })?;
    let bias = (&inv * g_true * lambda).norm_squared();
    let variance = noise_std * noise_std * (&inv * gram * &inv).trace();
    Ok(ErrorTerms { bias, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(r: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
    }

    fn system(h: DMatrix<f64>, y: DVector<f64>, batch: usize, sigma_t: f64) -> LinearSystem {
        LinearSystem {
            design: Box::new(h),
            observation: y,
            batch,
            sigma_t,
        }
    }

    #[test]
    fn assemble_examples() {
        let j = DMatrix::from_row_slice(1, 1, &[2.0]);
        let sys = assemble(&[j], &[3.0], 0.0).unwrap();
        assert_eq!((sys.design.n_rows(), sys.design.n_cols()), (1, 1));
        assert_eq!(sys.observation[0], 3.0);

        let mut r = ChaCha20Rng::seed_from_u64(1);
        let jacs: Vec<_> = (0..4).map(|_| gauss(&mut r, 6, 2)).collect();
        let g = DVector::from_fn(8, |_, _| StandardNormal.sample(&mut r));
        let mut sum = DVector::zeros(6);
        for (j, jac) in jacs.iter().enumerate() {
            sum += jac * g.rows(2 * j, 2);
        }
        let release: Vec<f64> = (sum / 4.0).iter().copied().collect();
        let sys = assemble(&jacs, &release, 0.0).unwrap();
        assert!((sys.design.apply(&g) - &sys.observation).amax() < 1e-12);
        let dense = sys.design.dense();
        for (j, jac) in jacs.iter().enumerate() {
            assert_eq!(dense.columns(2 * j, 2), *jac);
        }
        let bad = vec![gauss(&mut r, 6, 2), gauss(&mut r, 5, 2)];
        assert!(assemble(&bad, &release, 0.0).is_err());
        assert!(assemble(&jacs, &release[..5], 0.0).is_err());
    }

    #[test]
    fn ridge_examples() {
        let y = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let sys = system(DMatrix::identity(3, 3), y.clone(), 1, 0.0);
        assert_eq!(ridge_solve(&sys, 0.0).unwrap().g_hat, y);

        let mut r = ChaCha20Rng::seed_from_u64(2);
        let (d, b) = (3, 4);
        let h = gauss(&mut r, 4 * d * b, d * b);
        let g = DVector::from_fn(d * b, |_, _| StandardNormal.sample(&mut r));
        let sys = system(h.clone(), &h * &g, b, 0.0);
        assert!((ridge_solve(&sys, 0.0).unwrap().g_hat - &g).amax() < 1e-8);
        assert!((least_squares(&sys).unwrap().g_hat - &g).amax() < 1e-8);
        assert!(ridge_solve(&sys, 1e12).unwrap().g_hat.amax() < 1e-6);

        let mut deficient = h.clone();
        let c0 = deficient.column(0).clone_owned();
        deficient.set_column(1, &c0);
        let sys = system(deficient, &h * &g, b, 0.0);
        assert!(matches!(ridge_solve(&sys, 0.0), Err(EstimationError::Singular { .. })));
        assert!(ridge_solve(&sys, LAMBDA_FLOOR).is_ok());
    }

    #[test]
    fn primal_and_dual_agree() {
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let h = gauss(&mut r, 5, 12);
        let y = DVector::from_fn(5, |_, _| StandardNormal.sample(&mut r));
        let lambda = 0.3;
        let sys = system(h.clone(), y.clone(), 4, 0.0);
        let dual = ridge_solve(&sys, lambda).unwrap().g_hat;
        let primal = (h.tr_mul(&h) + DMatrix::identity(12, 12) * lambda)
            .cholesky()
            .unwrap()
            .solve(&h.tr_mul(&y));
        assert!((dual - primal).amax() < 1e-10);
        assert!(ridge_solve(&sys, 0.0).is_err());
    }

    #[test]
    fn bound_examples() {
        assert_eq!(bound_formula(0.0, 1.0, 4, 8, 0.1, 2.0), 0.0);
        assert!((bound_formula(1.0, 1.0, 1, 1, 1.0, 1.0) - 0.5).abs() < 1e-15);
        let sys = system(DMatrix::identity(1, 1), DVector::from_vec(vec![0.0]), 1, 1.0);
        assert!((error_bound(&sys, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eigen_extremes_exact_and_iterative_agree() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        let h = gauss(&mut r, 40, 30);
        let (lo, hi) = eigen_extremes(&h);
        let (ilo, ihi) = iterative_extremes(&h.tr_mul(&h));
        assert!((lo - ilo).abs() < 1e-6 * hi);
        assert!((hi - ihi).abs() < 1e-8 * hi);
        let wide = gauss(&mut r, 10, 30);
        let (lo, hi) = eigen_extremes(&wide);
        assert_eq!(lo, 0.0);
        let full = SymmetricEigen::new(wide.tr_mul(&wide)).eigenvalues;
        assert!((hi - full.max()).abs() < 1e-9 * hi);
    }

    /// Draws `ĝ` with `‖ĝ‖ ≤ γ`, observes `Hĝ + e` with `e ~ N(0, (σ_t/B)²)`.
    fn monte_carlo(r: &mut ChaCha20Rng, h: &DMatrix<f64>, g: &DVector<f64>, sigma_t: f64, batch: usize, draws: usize) -> f64 {
        let s = sigma_t / batch as f64;
        let clean = h * g;
        let mut total = 0.0;
        for _ in 0..draws {
            let e = DVector::from_fn(h.nrows(), |_, _| { let z: f64 = StandardNormal.sample(r); s * z });
            let sys = system(h.clone(), &clean + e, batch, sigma_t);
            let est = ridge_solve(&sys, sys.default_lambda()).unwrap();
            total += (est.g_hat - g).norm_squared();
        }
        total / draws as f64
    }

    #[test]
    fn bound_holds_by_monte_carlo() {
        let mut r = ChaCha20Rng::seed_from_u64(5);
        let (d, b, gamma) = (2, 3, 1.2);
        let mut ok = 0;
        for _ in 0..20 {
            let h = gauss(&mut r, 3 * d * b, d * b) * 0.2;
            let mut g = DVector::from_fn(d * b, |_, _| StandardNormal.sample(&mut r));
            g *= gamma / g.norm();
            let sigma_t = 1.5;
            let sys = system(h.clone(), DVector::zeros(h.nrows()), b, sigma_t);
            let bound = error_bound(&sys, gamma);
            if monte_carlo(&mut r, &h, &g, sigma_t, b, 200) <= bound {
                ok += 1;
            }
        }
        assert_eq!(ok, 20);
    }

    #[test]
    fn bias_and_variance_sum_to_total() {
        let mut r = ChaCha20Rng::seed_from_u64(6);
        let (d, b) = (2, 2);
        // diagonalizable by construction: orthogonal times diagonal
        let q = gauss(&mut r, 8, 8).qr().q();
        let diag = DMatrix::from_fn(8, d * b, |i, j| if i == j { 0.3 + 0.2 * i as f64 } else { 0.0 });
        let h = q * diag;
        let g = DVector::from_fn(d * b, |_, _| StandardNormal.sample(&mut r));
        let sigma_t = 1.0;
        let s = sigma_t / b as f64;
        let terms = error_terms(&h, &g, s * s, s).unwrap();
        let mc = monte_carlo(&mut r, &h, &g, sigma_t, b, 20_000);
        let total = terms.bias + terms.variance;
        assert!((mc - total).abs() < 0.03 * total, "{mc} vs {total}");
    }

    #[test]
    fn structured_design_solves_like_dense() {
        use crate::models::{LocalModel, LocalShape};
        let shape = LocalShape {
            input: 3,
            hidden: 5,
            embed: 2,
            rank: 2,
            lora_alpha: 1.0,
        };
        let mut r = ChaCha20Rng::seed_from_u64(7);
        let m = LocalModel::new(&shape, &mut r);
        let xs = DMatrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut r));
        let design = m.adapter_design(&xs, 1);
        let dense = design.to_dense();
        let y: Vec<f64> = (0..dense.nrows()).map(|i| i as f64 * 0.1).collect();
        let a = assemble_with(Box::new(design), &y, 6, 0.5).unwrap();
        let b = assemble_with(Box::new(dense), &y, 6, 0.5).unwrap();
        let ga = ridge_solve(&a, 0.01).unwrap().g_hat;
        let gb = ridge_solve(&b, 0.01).unwrap().g_hat;
        assert!((ga - gb).amax() < 1e-9);
        assert!((error_bound(&a, 1.0) - error_bound(&b, 1.0)).abs() < 1e-9);
    }
}
