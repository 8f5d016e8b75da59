//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! `cargo test --test acceptance` (add `--release` for the fastest sweep).

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use vfl_mpc::abb::{BackendKind, Cohort, SecretValue};
use vfl_mpc::bandmf::{self, CorrelatedNoise, ParticipationSchema, WorkloadParams};
use vfl_mpc::cli;
use vfl_mpc::config::{Config, Preset};
use vfl_mpc::data::{self, DatasetSpec};
use vfl_mpc::dpcore::{self, Accountant};
use vfl_mpc::estimation;
use vfl_mpc::models::LocalLayer;
use vfl_mpc::numerics::FixedPointSpec;
use vfl_mpc::protocols::{self, LocalUpdate, PlainOptions, ProtocolConfig, Variant};
use vfl_mpc::transport::PartyId;

/// Criterion 1: opened discrepancy between backends.
const DIFF_TOL: f64 = 1.0 / 1024.0;
/// Criterion 2.
const TRAJECTORY_TOL: f64 = 1e-3;
const RECOVERY_TOL: f64 = 1e-4;
/// Criteria 3 and 4.
const FACTOR_TOL: f64 = 1e-9;
const SENS_TOL: f64 = 1e-12;
/// Criterion 5: fraction of systems whose Monte-Carlo error must sit under the bound.
const BOUND_COVERAGE: f64 = 0.99;
/// Criterion 6.
const ROUND_TRIP_TOL: f64 = 0.01;
/// Recorded before implementation from an independent RDP accountant.
const EPS_REFERENCE: f64 = 7.469182;
const REFERENCE_TOL: f64 = 0.05;
/// Criterion 7.
const KS_ALPHA: f64 = 0.01;
const STREAM_TOL: f64 = 1e-6;
/// Criterion 9.
const CLIP_SLACK: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 10] = [
        (1, "MPC correctness (oracle vs rep3)", Duration::from_secs(120), c1_differential),
        (2, "protocol-plaintext equivalence", Duration::from_secs(300), c2_equivalence),
        (3, "BandMF factorization", Duration::from_secs(60), c3_factorization),
        (4, "sensitivity", Duration::from_secs(120), c4_sensitivity),
        (5, "error bound", Duration::from_secs(300), c5_bound),
        (6, "DP accounting", Duration::from_secs(300), c6_accounting),
        (7, "noise statistics", Duration::from_secs(300), c7_noise),
        (8, "utility ordering", Duration::from_secs(1800), c8_utility),
        (9, "privacy hygiene", Duration::from_secs(300), c9_hygiene),
        (10, "cost ordering", Duration::from_secs(300), c10_cost),
    ];
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix("--criterion=").and_then(|n| n.parse().ok()))
        .collect();
    let mut failed = Vec::new();
    for (n, name, budget, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let el = t.elapsed();
        let in_time = el <= budget;
        let pass = o.pass && in_time;
        println!(
            "criterion {n:>2} {}: {name}: {} [{:.1}s{}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64(),
            if in_time { String::new() } else { format!(" > budget {}s", budget.as_secs()) }
        );
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

struct Inputs {
    x: SecretValue,
    y: SecretValue,
    pos: SecretValue,
    nonneg: SecretValue,
    e: SecretValue,
    a: SecretValue,
    b: SecretValue,
    jac: SecretValue,
    v: SecretValue,
    z: SecretValue,
    g: SecretValue,
}

const N: usize = 1000;

fn uniform(r: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn shared_inputs(c: &mut Cohort) -> Inputs {
    let mut r = ChaCha20Rng::seed_from_u64(11);
    let c0 = PartyId::Client(0);
    let c1 = PartyId::Client(1);
    let mut inp = |vals: Vec<f64>, rows: usize, cols: usize, who: PartyId| c.input(&vals, rows, cols, who, "in").unwrap();
    Inputs {
        x: inp(uniform(&mut r, N, -8.0, 8.0), N, 1, c0),
        y: inp(uniform(&mut r, N, -8.0, 8.0), N, 1, c1),
        pos: inp(uniform(&mut r, N, 0.5, 60.0), N, 1, c1),
        nonneg: inp(uniform(&mut r, N, 0.0, 1000.0), N, 1, c0),
        e: inp(uniform(&mut r, N, -8.0, 8.0), N, 1, c0),
        a: inp(uniform(&mut r, 40 * 25, -2.0, 2.0), 40, 25, c0),
        b: inp(uniform(&mut r, 25 * 40, -2.0, 2.0), 25, 40, c1),
        jac: inp(uniform(&mut r, 100 * 10, -2.0, 2.0), 100, 10, c0),
        v: inp(uniform(&mut r, 100, -2.0, 2.0), 100, 1, c1),
        z: inp(uniform(&mut r, N, -6.0, 6.0), 200, 5, c1),
        g: inp(uniform(&mut r, N, -3.0, 3.0), 250, 4, c0),
    }
}

type Prim = fn(&mut Cohort, &Inputs) -> SecretValue;

fn primitives() -> Vec<(&'static str, bool, Prim)> {
    // (name, nonlinear, op)
    vec![
        ("constant", false, |c, _| c.constant(&[1.25, -3.5], 2, 1, 16).unwrap()),
        ("zeros", false, |c, _| c.zeros(3, 2)),
        ("upscale", false, |c, i| c.upscale(&i.x, 24).unwrap()),
        ("add", false, |c, i| c.add(&i.x, &i.y).unwrap()),
        ("sub", false, |c, i| c.sub(&i.x, &i.y).unwrap()),
        ("neg", false, |c, i| c.neg(&i.x).unwrap()),
        ("add_public", false, |c, i| c.add_public(&i.x, &[0.75]).unwrap()),
        ("public_sub", false, |c, i| c.public_sub(&[0.75], &i.x).unwrap()),
        ("mul_public", false, |c, i| c.mul_public(&i.x, &[0.37], 24).unwrap()),
        ("scale_public", false, |c, i| c.scale_public(&i.x, -1.7).unwrap()),
        ("mul_int_public", false, |c, i| c.mul_int_public(&i.x, &[-3]).unwrap()),
        ("gather", false, |c, i| {
            let idx: Vec<usize> = (0..N).map(|k| (k * 7) % N).collect();
            c.gather(&i.x, &idx, N, 1).unwrap()
        }),
        ("reshape", false, |c, i| c.reshape(&i.x, 100, 10).unwrap()),
        ("transpose", false, |c, i| c.transpose(&i.a).unwrap()),
        ("slice_rows", false, |c, i| c.slice_rows(&i.a, 5, 30).unwrap()),
        ("slice_cols", false, |c, i| c.slice_cols(&i.a, 3, 17).unwrap()),
        ("repeat_rows", false, |c, i| {
            let row = c.transpose(&i.v).unwrap();
            c.repeat_rows(&row, 3).unwrap()
        }),
        ("repeat_cols", false, |c, i| c.repeat_cols(&i.v, 3).unwrap()),
        ("concat_cols", false, |c, i| c.concat_cols(&[&i.x, &i.y]).unwrap()),
        ("concat_rows", false, |c, i| c.concat_rows(&[&i.x, &i.y]).unwrap()),
        ("combine_rows", false, |c, i| {
            let t = c.reshape(&i.x, 100, 10).unwrap();
            c.combine_rows(&t, &[(0, 0.5), (3, -1.25), (99, 2.0)], 24).unwrap()
        }),
        ("sum_rows", false, |c, i| c.sum_rows(&i.a).unwrap()),
        ("sum_cols", false, |c, i| c.sum_cols(&i.a).unwrap()),
        ("mul", false, |c, i| c.mul(&i.x, &i.y, "mul").unwrap()),
        ("mul_fx", false, |c, i| c.mul_fx(&i.x, &i.y, "mul").unwrap()),
        ("matmul", false, |c, i| c.matmul(&i.a, &i.b, "mm").unwrap()),
        ("matmul_fx", false, |c, i| c.matmul_fx(&i.a, &i.b, "mm").unwrap()),
        ("matmul_batched", false, |c, i| c.matmul_batched(&i.jac, &i.v, 10, "mm").unwrap()),
        ("trunc", false, |c, i| {
            let p = c.mul(&i.x, &i.y, "mul").unwrap();
            c.trunc(&p, 16, "tr").unwrap()
        }),
        ("trunc_to", false, |c, i| {
            let p = c.mul_public(&i.x, &[0.37], 24).unwrap();
            c.trunc_to(&p, 16, "tr").unwrap()
        }),
        ("ltz", false, |c, i| c.ltz(&i.x, "ltz").unwrap()),
        ("open_to", false, |c, i| i.x.clone().tap_open_to(c)),
        ("reciprocal", true, |c, i| c.reciprocal(&i.pos, "rec").unwrap()),
        ("div", true, |c, i| c.div(&i.x, &i.pos, "div").unwrap()),
        ("sqrt", true, |c, i| c.sqrt(&i.nonneg, "sqrt").unwrap()),
        ("exp", true, |c, i| c.exp(&i.e, "exp").unwrap()),
        ("max_public", true, |c, i| c.max_public(&i.x, 1.0, "max").unwrap()),
        ("max", true, |c, i| c.max(&i.x, &i.y, "max").unwrap()),
        ("softmax_rows", true, |c, i| c.softmax_rows(&i.z, "sm").unwrap()),
        ("row_norms", true, |c, i| c.row_norms(&i.g, "norm").unwrap()),
        ("clip_rows", true, |c, i| c.clip_rows(&i.g, 1.2, "clip").unwrap()),
    ]
}

trait OpenTo {
    fn tap_open_to(self, c: &mut Cohort) -> SecretValue;
}

impl OpenTo for SecretValue {
    /// Opens to one client first so both backends exercise targeted opening.
    fn tap_open_to(self, c: &mut Cohort) -> SecretValue {
        c.open_to(&self, 1, "open_to").unwrap();
        self
    }
}

fn c1_differential() -> Outcome {
    let spec = FixedPointSpec::default();
    let mut oracle = Cohort::oracle(spec, 5);
    let mut rep3 = Cohort::rep3(spec, 5);
    let io = shared_inputs(&mut oracle);
    let ir = shared_inputs(&mut rep3);
    let mut worst = (0.0, "");
    let mut bad = Vec::new();
    for (name, nonlinear, op) in primitives() {
        let a = op(&mut oracle, &io);
        let b = op(&mut rep3, &ir);
        let va = oracle.open(&a, name).unwrap();
        let vb = rep3.open(&b, name).unwrap();
        let mut d_max: f64 = 0.0;
        for (x, y) in va.iter().zip(&vb) {
            let d = (x - y).abs() / if nonlinear { x.abs().max(1.0) } else { 1.0 };
            d_max = d_max.max(d);
        }
        if d_max > worst.0 {
            worst = (d_max, name);
        }
        if d_max > DIFF_TOL || va.len() != vb.len() {
            bad.push(format!("{name} {d_max:.2e}"));
        }
    }
    // secret shuffle: equal row multisets
    let so = oracle.shuffle_rows(&io.a, "sh").unwrap();
    let sr = rep3.shuffle_rows(&ir.a, "sh").unwrap();
    let sort_rows = |v: Vec<f64>| {
        let mut rows: Vec<Vec<f64>> = v.chunks(25).map(|r| r.to_vec()).collect();
        rows.sort_by(|p, q| p.partial_cmp(q).unwrap());
        rows.concat()
    };
    let (ro, rr) = (sort_rows(oracle.open(&so, "sh").unwrap()), sort_rows(rep3.open(&sr, "sh").unwrap()));
    let shuffle_ok = ro == rr;
    if !shuffle_ok {
        bad.push("shuffle_rows".into());
    }
    let count = primitives().len() + 1;
    outcome(
        bad.is_empty(),
        format!(
            "{count} primitives x >=1000 instances, worst {:.2e} ({}) vs {DIFF_TOL:.2e}{}",
            worst.0,
            worst.1,
            if bad.is_empty() { String::new() } else { format!("; over tolerance: {}", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2

fn equivalence_cfg(variant: Variant, spec: FixedPointSpec) -> ProtocolConfig {
    ProtocolConfig {
        variant,
        sigma: Some(0.0),
        lambda: Some(0.0),
        batch: 2,
        epochs: 1,
        max_steps: Some(10),
        identity_shuffle: true,
        audit: true,
        eval_each_epoch: false,
        spec,
        ..ProtocolConfig::default()
    }
}

fn c2_equivalence() -> Outcome {
    let data = data::generate(&DatasetSpec {
        samples_total: 80,
        ..DatasetSpec::default()
    })
    .unwrap();
    let spec = FixedPointSpec::default();
    let mut traj_worst: f64 = 0.0;
    let mut parts = Vec::new();
    let mut recovery = f64::NAN;
    for v in [Variant::GShuff, Variant::GBmf, Variant::GlBmf] {
        let cfg = equivalence_cfg(v, spec);
        let opts = if v == Variant::GlBmf {
            PlainOptions {
                clip: Some(cfg.gamma),
                joint: Some(LocalLayer::Adapter(1)),
                local: LocalUpdate::Adapters,
            }
        } else {
            PlainOptions {
                clip: Some(cfg.gamma),
                joint: None,
                local: LocalUpdate::Frozen,
            }
        };
        let mpc = protocols::run(&cfg, &data).unwrap();
        let plain = protocols::plaintext_train(&cfg, &data, &opts).unwrap();
        assert_eq!(mpc.trajectory.len(), 10);
        let d = mpc
            .trajectory
            .iter()
            .zip(&plain.trajectory)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        traj_worst = traj_worst.max(d);
        parts.push(format!("{v} {d:.1e}"));
        if v == Variant::GlBmf {
            recovery = mpc.recovery.iter().filter_map(|r| r.realized_max_abs).fold(0.0, f64::max);
        }
    }
    // the same recovery with a wider ring and more fraction bits isolates quantization
    let wide = FixedPointSpec::new(128, 24).unwrap();
    let hi = protocols::run(&equivalence_cfg(Variant::GlBmf, wide), &data).unwrap();
    let recovery_hi = hi.recovery.iter().filter_map(|r| r.realized_max_abs).fold(0.0, f64::max);
    let pass = traj_worst <= TRAJECTORY_TOL && recovery <= RECOVERY_TOL;
    outcome(
        pass,
        format!(
            "trajectory max |Δ| {} (tol {TRAJECTORY_TOL:e}); GL-BMF recovery max |Δ| {recovery:.2e} at f=16 (tol {RECOVERY_TOL:e}), {recovery_hi:.2e} at k=128 f=24",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 3

/// Lower-triangular unit-diagonal square root of `a` by forward recursion.
fn dense_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut c = DMatrix::<f64>::identity(n, n);
    for d in 1..n {
        for j in 0..n - d {
            let i = j + d;
            let inner: f64 = (j + 1..i).map(|k| c[(i, k)] * c[(k, j)]).sum();
            c[(i, j)] = (a[(i, j)] - inner) / 2.0;
        }
    }
    c
}

fn toeplitz(col: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i >= j && i - j < col.len() { col[i - j] } else { 0.0 })
}

fn c3_factorization() -> Outcome {
    let mut worst_cc: f64 = 0.0;
    let mut worst_s2: f64 = 0.0;
    let mut c0_ok = true;
    for t in [8usize, 32, 64] {
        let w = WorkloadParams::setting(1, 0.01, t).unwrap();
        let c = bandmf::bsr_coeffs(&w, t).unwrap();
        c0_ok &= c.c[0] == 1.0;
        let cm = toeplitz(&c.c, t);
        let ones = DMatrix::from_fn(t, t, |i, j| if i >= j { 1.0 } else { 0.0 });
        worst_cc = worst_cc.max((&cm * &cm - ones).amax());

        // setting 2: a_j = Σ_{i≤j} β^i with α = 1, β = 0.9
        let a2: Vec<f64> = (0..t).map(|j| (0..=j).map(|i| 0.9f64.powi(i as i32)).sum()).collect();
        let w2 = WorkloadParams::setting(2, 0.01, t).unwrap();
        let c2 = bandmf::bsr_coeffs(&w2, t).unwrap();
        c0_ok &= c2.c[0] == 1.0;
        let oracle = dense_sqrt(&toeplitz(&a2, t));
        let col: Vec<f64> = (0..t).map(|i| oracle[(i, 0)]).collect();
        worst_s2 = worst_s2.max(col.iter().zip(&c2.c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        // banded prefixes keep c_0 = 1
        for p in [1, 2, t / 2] {
            c0_ok &= bandmf::bsr_coeffs(&w2, p).unwrap().c[0] == 1.0;
        }
    }
    outcome(
        worst_cc < FACTOR_TOL && worst_s2 < FACTOR_TOL && c0_ok,
        format!(
            "max |C·C − A| {worst_cc:.1e}, setting 2 vs dense square root {worst_s2:.1e} (tol {FACTOR_TOL:e}), c_0 = 1: {c0_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4

/// Largest `‖Ω u‖²` over indicator vectors of b-separated participation sets,
/// grouped by set size.
fn brute_force(omega: &DMatrix<f64>, b: usize) -> Vec<f64> {
    let t = omega.nrows();
    let mut best = vec![0.0; t + 1];
    fn dfs(omega: &DMatrix<f64>, b: usize, next: usize, size: usize, acc: &mut Vec<f64>, best: &mut [f64]) {
        let t = omega.nrows();
        for s in next..t {
            for i in 0..t {
                acc[i] += omega[(i, s)];
            }
            let n2: f64 = acc.iter().map(|v| v * v).sum();
            if n2 > best[size + 1] {
                best[size + 1] = n2;
            }
            dfs(omega, b, s + b, size + 1, acc, best);
            for i in 0..t {
                acc[i] -= omega[(i, s)];
            }
        }
    }
    dfs(omega, b, 0, 0, &mut vec![0.0; t], &mut best);
    best
}

fn c4_sensitivity() -> Outcome {
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;
    let mut shortcut_cases = 0usize;
    let mut shortcut_worst: f64 = 0.0;
    for setting in [1u8, 2] {
        for t in 1..=16usize {
            let w = WorkloadParams::setting(setting, 0.01, t).unwrap();
            for p in 1..=t {
                let c = bandmf::bsr_coeffs(&w, p).unwrap();
                let omega = toeplitz(&c.c, t);
                for b in 1..=t {
                    let best = brute_force(&omega, b);
                    for kappa in 1..=t {
                        if 1 + (kappa - 1) * b > t {
                            break;
                        }
                        let schema = ParticipationSchema { kappa, b };
                        let got = bandmf::sensitivity(&c, &schema, t).unwrap();
                        let want = best[..=kappa].iter().cloned().fold(0.0, f64::max).sqrt();
                        worst = worst.max((got - want).abs());
                        cases += 1;
                        if p <= b && (kappa - 1) * b + p <= t {
                            let norm = c.c.iter().map(|v| v * v).sum::<f64>().sqrt();
                            shortcut_worst = shortcut_worst.max(((kappa as f64).sqrt() * norm - got).abs());
                            shortcut_cases += 1;
                        }
                    }
                }
            }
        }
    }
    outcome(
        worst <= SENS_TOL && shortcut_worst <= SENS_TOL,
        format!(
            "{cases} (setting, κ, b, p, T) cases vs brute force max |Δ| {worst:.1e}; disjoint shortcut on {shortcut_cases} cases |Δ| {shortcut_worst:.1e} (tol {SENS_TOL:e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5

fn normal(r: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(r)
}

fn c5_bound() -> Outcome {
    let mut r = ChaCha20Rng::seed_from_u64(55);
    let gamma = 1.0;
    let (systems, draws) = (50, 200);
    let mut covered = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..systems {
        let d = r.random_range(2..=4usize);
        let batch = r.random_range(2..=4usize);
        let n = r.random_range((d * batch / 2).max(2)..=3 * d * batch);
        let jac: Vec<DMatrix<f64>> = (0..batch)
            .map(|_| DMatrix::from_fn(n, d, |_, _| normal(&mut r)))
            .collect();
        let mut g = DVector::from_fn(d * batch, |_, _| normal(&mut r));
        for j in 0..batch {
            let mut s = g.rows_mut(j * d, d);
            let norm = s.norm();
            let target = r.random_range(0.1..=gamma);
            s *= target / norm;
        }
        let sigma_t = r.random_range(0.05..1.0);
        let mut clean = DVector::zeros(n);
        for (j, h) in jac.iter().enumerate() {
            clean += h * g.rows(j * d, d);
        }
        let mut total = 0.0;
        let mut bound = 0.0;
        for _ in 0..draws {
            let release = clean.map(|v| (v + sigma_t / batch as f64 * normal(&mut r)) / batch as f64);
            let sys = estimation::assemble(&jac, release.as_slice(), sigma_t).unwrap();
            let rec = estimation::ridge_solve(&sys, sys.default_lambda()).unwrap();
            total += (&rec.g_hat - &g).norm_squared();
            bound = estimation::error_bound(&sys, gamma);
        }
        let mean = total / draws as f64;
        if mean <= bound {
            covered += 1;
        }
        worst_ratio = worst_ratio.max(mean / bound);
    }
    // noiseless, full column rank
    let (d, batch) = (3, 3);
    let jac: Vec<DMatrix<f64>> = (0..batch).map(|_| DMatrix::from_fn(20, d, |_, _| normal(&mut r))).collect();
    let g = DVector::from_fn(d * batch, |_, _| 0.3 * normal(&mut r));
    let mut release = DVector::zeros(20);
    for (j, h) in jac.iter().enumerate() {
        release += h * g.rows(j * d, d) / batch as f64;
    }
    let sys = estimation::assemble(&jac, release.as_slice(), 0.0).unwrap();
    let exact = (estimation::ridge_solve(&sys, 0.0).unwrap().g_hat - &g).amax();
    let zero_bound = estimation::error_bound(&sys, gamma);
    let frac = covered as f64 / systems as f64;
    outcome(
        frac >= BOUND_COVERAGE && zero_bound == 0.0 && exact < 1e-8,
        format!(
            "{covered}/{systems} systems under the bound (need {:.0}%), worst mean/bound {worst_ratio:.3}; σ_t=0: bound {zero_bound}, recovery error {exact:.1e}",
            BOUND_COVERAGE * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn c6_accounting() -> Outcome {
    let delta = 1e-5;
    let mut worst_rt: f64 = 0.0;
    for &(q, t) in &[(1.0, 1u64), (1.0, 20), (0.05, 400), (0.01, 10_000)] {
        for eps in [1.0, 2.0, 5.0, 8.0, 10.0] {
            let sigma = dpcore::calibrate_sigma(eps, delta, q, t).unwrap();
            let got = Accountant::new(sigma, q, t, delta).unwrap().epsilon();
            worst_rt = worst_rt.max((eps - got) / eps);
            if got > eps {
                worst_rt = f64::INFINITY;
            }
        }
    }
    let closed = (2.0 * (1.25 / delta).ln()).sqrt();
    let mut closed_ok = true;
    for eps in [0.5, 1.0, 2.0, 5.0, 8.0, 10.0] {
        let sigma = dpcore::calibrate_sigma(eps, delta, 1.0, 1).unwrap();
        closed_ok &= sigma * eps >= closed;
    }
    let reference = Accountant::new(1.0, 0.01, 10_000, delta).unwrap().epsilon();
    let rel = (reference - EPS_REFERENCE).abs() / EPS_REFERENCE;
    outcome(
        worst_rt <= ROUND_TRIP_TOL && closed_ok && rel <= REFERENCE_TOL,
        format!(
            "round trip worst shortfall {:.2}% (tol {:.0}%); σ·ε ≥ sqrt(2 ln(1.25/δ)) = {closed:.3}: {closed_ok}; reference ε {reference:.4} vs {EPS_REFERENCE} ({:.2}%)",
            worst_rt * 100.0,
            ROUND_TRIP_TOL * 100.0,
            rel * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 7

/// Asymptotic Kolmogorov distribution tail with the small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

fn c7_noise() -> Outcome {
    let spec = FixedPointSpec::default();
    let scale = 0.8;
    let mut c = Cohort::rep3(spec, 77);
    let table = dpcore::gs_protocol(&mut c, 100, 1000, scale).unwrap();
    let mut v = c.open(&table.value, "gs").unwrap();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let dist = Normal::new(0.0, (1.5f64).sqrt() * scale).unwrap();
    let n = v.len();
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n as f64).abs().max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    let p = ks_p_value(d, n);

    // correlated stream against dense Ω⁻¹ N
    let t = 32;
    let w = WorkloadParams::setting(1, 0.01, t).unwrap();
    let coeffs = bandmf::bsr_coeffs(&w, 8).unwrap();
    let mut oc = Cohort::oracle(spec, 78);
    let table = dpcore::gs_protocol(&mut oc, t, 6, 1.0).unwrap();
    let raw = DMatrix::from_row_slice(t, 6, &oc.probe(&table.value).unwrap());
    let omega = toeplitz(&coeffs.c, t);
    let want = omega.solve_lower_triangular(&raw).unwrap();
    let stream = CorrelatedNoise::new(&table, &coeffs).unwrap();
    let mut worst: f64 = 0.0;
    for step in 0..t {
        let row = stream.row(&mut oc, step).unwrap();
        let got = oc.probe(&row).unwrap();
        for (k, g) in got.iter().enumerate() {
            worst = worst.max((g - want[(step, k)]).abs());
        }
    }
    outcome(
        p > KS_ALPHA && worst <= STREAM_TOL,
        format!(
            "KS on {n} GS samples vs N(0, 1.5·scale²): D={d:.2e}, p={p:.3} (need > {KS_ALPHA}); correlated stream vs dense Ω⁻¹N at T={t}: {worst:.1e} (tol {STREAM_TOL:e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

const EPSILONS: [f64; 5] = [1.0, 2.0, 5.0, 8.0, 10.0];

fn stats_for<'a>(stats: &'a [cli::SweepStat], v: Variant) -> Vec<&'a cli::SweepStat> {
    EPSILONS
        .iter()
        .map(|e| stats.iter().find(|s| s.variant == v.name() && s.epsilon == *e).expect("swept"))
        .collect()
}

/// Standard error of a difference of two independent means.
fn se_diff(a: &cli::SweepStat, b: &cli::SweepStat) -> f64 {
    (a.se * a.se + b.se * b.se).sqrt()
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn c8_utility() -> Outcome {
    let base = Config::preset(Preset::Benchmark);
    let seeds = [0u64, 1, 2, 3];
    let variants = [Variant::GShuff, Variant::GBmf, Variant::GlBmf, Variant::LdpG];
    let rows = cli::sweep(&base, &variants, &EPSILONS, &seeds, workers()).unwrap();
    let stats = cli::aggregate(&rows);
    let main_runs = rows.len();
    let mut notes = Vec::new();

    let mut mono = true;
    for v in [Variant::GShuff, Variant::GBmf] {
        let s = stats_for(&stats, v);
        for w in s.windows(2) {
            if w[1].mean_accuracy < w[0].mean_accuracy - se_diff(w[0], w[1]) {
                mono = false;
                notes.push(format!("{v} drops {}→{}", w[0].epsilon, w[1].epsilon));
            }
        }
    }
    let (gl, g, ldp) = (
        stats_for(&stats, Variant::GlBmf),
        stats_for(&stats, Variant::GBmf),
        stats_for(&stats, Variant::LdpG),
    );
    let mut gl_ok = true;
    let mut ldp_ok = true;
    for k in 0..EPSILONS.len() {
        if gl[k].mean_accuracy < g[k].mean_accuracy - se_diff(gl[k], g[k]) {
            gl_ok = false;
            notes.push(format!("GLBMF < GBMF at ε={}", EPSILONS[k]));
        }
        if ldp[k].mean_accuracy >= g[k].mean_accuracy {
            ldp_ok = false;
            notes.push(format!("LdpG >= GBMF at ε={}", EPSILONS[k]));
        }
    }
    let table: Vec<String> = variants
        .iter()
        .map(|&v| {
            let s = stats_for(&stats, v);
            format!(
                "{v} [{}]",
                s.iter().map(|x| format!("{:.3}±{:.3}", x.mean_accuracy, x.se)).collect::<Vec<_>>().join(" ")
            )
        })
        .collect();
    println!("    criterion 8 accuracy by ε {EPSILONS:?}: {}", table.join("; "));

    // informational: the same (c) comparison at the default server learning rate
    let default = Config::preset(Preset::Default);
    let rows = cli::sweep(&default, &[Variant::GBmf, Variant::LdpG], &EPSILONS, &seeds, workers()).unwrap();
    let st = cli::aggregate(&rows);
    let (g0, l0) = (stats_for(&st, Variant::GBmf), stats_for(&st, Variant::LdpG));
    let wins = (0..EPSILONS.len()).filter(|&k| l0[k].mean_accuracy < g0[k].mean_accuracy).count();
    println!(
        "    criterion 8 (info) at eta_s=0.01: GBMF [{}] LdpG [{}]; LdpG < GBMF at {wins}/5 ε",
        g0.iter().map(|x| format!("{:.3}", x.mean_accuracy)).collect::<Vec<_>>().join(" "),
        l0.iter().map(|x| format!("{:.3}", x.mean_accuracy)).collect::<Vec<_>>().join(" ")
    );

    outcome(
        mono && gl_ok && ldp_ok,
        format!(
            "(a) monotone in ε: {mono}, (b) GL-BMF ≥ G-BMF: {gl_ok}, (c) LDP-G < G-BMF: {ldp_ok}; {} runs{}",
            main_runs + rows.len(),
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn hygiene_cfg(variant: Variant, backend: BackendKind) -> Config {
    let mut cfg = Config::preset(Preset::Benchmark);
    cfg.data = DatasetSpec {
        samples_total: 640,
        ..DatasetSpec::default()
    };
    let p = &mut cfg.protocol;
    p.variant = variant;
    p.backend = backend;
    p.batch = 64;
    p.epochs = 2;
    p.epsilon = 2.0;
    p.audit = backend == BackendKind::Oracle;
    p.eval_each_epoch = false;
    if backend == BackendKind::Rep3 {
        p.max_steps = Some(2);
    }
    cfg
}

fn c9_hygiene() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut worst_norm: f64 = 0.0;
    for backend in [BackendKind::Oracle, BackendKind::Rep3] {
        for v in [Variant::GShuff, Variant::GBmf, Variant::GlBmf] {
            let cfg = hygiene_cfg(v, backend);
            let data = cli::load_data(&cfg).unwrap();
            let out = protocols::run(&cfg.protocol, &data).unwrap();
            let bad = cli::check_invariants(&cfg, &out);
            if let Some(n) = out.metrics.max_clipped_norm {
                worst_norm = worst_norm.max(n);
                ok &= n <= cfg.protocol.gamma * (1.0 + CLIP_SLACK);
            }
            ok &= bad.is_empty();
            parts.push(format!("{v}/{backend}: {} opens", out.leakage.len()));
        }
    }
    outcome(
        ok,
        format!(
            "{}; max audited clipped norm {worst_norm:.5} (limit {:.5})",
            parts.join(", "),
            1.2 * (1.0 + CLIP_SLACK)
        ),
    )
}

// ---------------------------------------------------------------------------
// 10

fn c10_cost() -> Outcome {
    let mut base = Config::preset(Preset::Benchmark);
    base.protocol.eval_each_epoch = false;
    base.protocol.epochs = 2;
    let data = cli::load_data(&base).unwrap();
    let mut runs = Vec::new();
    for v in [Variant::GShuff, Variant::GBmf, Variant::GlBmf, Variant::LdpG, Variant::LdpGl, Variant::Plain] {
        let mut p = base.protocol.clone();
        p.variant = v;
        runs.push((v, protocols::run(&p, &data).unwrap()));
    }
    let get = |v: Variant| &runs.iter().find(|(x, _)| *x == v).unwrap().1;
    let (gl, g, gs) = (get(Variant::GlBmf), get(Variant::GBmf), get(Variant::GShuff));
    let bytes_ok = gl.metrics.bytes_per_step > g.metrics.bytes_per_step;
    let epoch_lan = |o: &protocols::RunOutput| o.epochs.iter().map(|e| e.walltime_lan_est).sum::<f64>() / o.epochs.len() as f64;
    let time_ok = epoch_lan(gs) > epoch_lan(g);
    let mut wan_ok = true;
    for (_, o) in &runs {
        wan_ok &= o.metrics.walltime_wan_est >= o.metrics.walltime_lan_est;
        wan_ok &= o.epochs.iter().all(|e| e.walltime_wan_est >= e.walltime_lan_est);
    }
    outcome(
        bytes_ok && time_ok && wan_ok,
        format!(
            "bytes/step GL-BMF {:.3e} > G-BMF {:.3e}: {bytes_ok}; epoch LAN estimate G-Shuff {:.3}s > G-BMF {:.3}s: {time_ok}; WAN ≥ LAN on every ledger: {wan_ok}",
            gl.metrics.bytes_per_step,
            g.metrics.bytes_per_step,
            epoch_lan(gs),
            epoch_lan(g)
        ),
    )
}
