//! Training procedures: plaintext baseline, the three MPC protocols and the
//! local-DP baselines, plus run metrics and result files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abb::{AbbError, BackendKind, Cohort, CohortOptions, CostLedger, LeakageEntry, OpenPolicy, Recipient, SecretValue};
use crate::bandmf::{self, BandError, BsrCoefficients, CorrelatedNoise, ParticipationSchema, WorkloadParams};
use crate::data::{Split, VflData};
use crate::dpcore::{self, Accountant, DpError};
use crate::estimation::{self, EstimationError};
use crate::models::{self, GlobalModel, LocalLayer, LocalModel, LocalShape, ModelError};
use crate::numerics::FixedPointSpec;
use crate::transport::{estimate_walltime, LatencyModel, PartyId};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid protocol configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Abb(#[from] AbbError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Band(#[from] BandError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Plain,
    GShuff,
    GBmf,
    GlBmf,
    LdpG,
    LdpGl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Plain,
        Variant::GShuff,
        Variant::GBmf,
        Variant::GlBmf,
        Variant::LdpG,
        Variant::LdpGl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "Plain",
            Variant::GShuff => "GShuff",
            Variant::GBmf => "GBMF",
            Variant::GlBmf => "GLBMF",
            Variant::LdpG => "LdpG",
            Variant::LdpGl => "LdpGL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    pub fn is_mpc(self) -> bool {
        matches!(self, Variant::GShuff | Variant::GBmf | Variant::GlBmf)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which local parameters the plaintext trainer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalUpdate {
    Frozen,
    Adapters,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub variant: Variant,
    pub epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Fixed noise multiplier; `None` calibrates it from `epsilon`.
    pub sigma: Option<f64>,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many steps (accounting still covers the full run).
    pub max_steps: Option<usize>,
    pub eta_s: f64,
    pub eta_i: f64,
    pub local: LocalShape,
    pub classes: usize,
    pub seed: u64,
    pub backend: BackendKind,
    pub spec: FixedPointSpec,
    pub trusted_dealer: bool,
    pub identity_shuffle: bool,
    /// Workload setting (1: SGD, 2: momentum).
    pub setting: u8,
    /// Band width `p`; defaults to the number of batches per epoch.
    pub band: Option<usize>,
    /// Ridge parameter; defaults to `(σ_t / B)²`.
    pub lambda: Option<f64>,
    /// Use `‖Ω⁻¹[t,:]‖²` in `σ_t` (otherwise the unsquared norm).
    pub sigma_t_squared: bool,
    pub emit_bounds: bool,
    /// Record clipped per-sample norms and reconstruction errors (oracle only).
    pub audit: bool,
    pub plain_local: LocalUpdate,
    pub eval_each_epoch: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            variant: Variant::GBmf,
            epsilon: 8.0,
            delta: 1e-5,
            gamma: 1.2,
            sigma: None,
            batch: 128,
            epochs: 20,
            max_steps: None,
            eta_s: 0.01,
            eta_i: 0.001,
            local: LocalShape {
                input: 4,
                hidden: 32,
                embed: 16,
                rank: 8,
                lora_alpha: 1.0,
            },
            classes: 2,
            seed: 0,
            backend: BackendKind::Oracle,
            spec: FixedPointSpec::default(),
            trusted_dealer: true,
            identity_shuffle: false,
            setting: 1,
            band: None,
            lambda: None,
            sigma_t_squared: true,
            emit_bounds: false,
            audit: false,
            plain_local: LocalUpdate::Adapters,
            eval_each_epoch: true,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self, train_rows: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch == 0 {
            errs.push("run.batch must be >= 1".into());
        } else if train_rows % self.batch != 0 {
            errs.push(format!(
                "training set size {train_rows} is not divisible by run.batch {}",
                self.batch
            ));
        }
        if self.epochs == 0 {
            errs.push("run.epochs must be >= 1".into());
        }
        if !(self.eta_s >= 0.0) || !(self.eta_i >= 0.0) {
            errs.push("learning rates must be >= 0".into());
        }
        if !(self.gamma > 0.0) {
            errs.push(format!("privacy.gamma must be > 0 (got {})", self.gamma));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errs.push(format!("privacy.delta must lie in (0, 1) (got {})", self.delta));
        }
        if self.sigma.is_none() && self.variant != Variant::Plain && !(self.epsilon > 0.0) {
            errs.push(format!("privacy.epsilon must be > 0 (got {})", self.epsilon));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) {
                errs.push(format!("privacy.sigma must be >= 0 (got {s})"));
            }
        }
        if !matches!(self.setting, 1 | 2) {
            errs.push(format!("mpc.setting must be 1 or 2 (got {})", self.setting));
        }
        if matches!(self.variant, Variant::GlBmf | Variant::LdpGl) && self.local.rank == 0 {
            errs.push(format!("{} needs adapters (model.rank >= 1)", self.variant));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                errs.push(format!("mpc.lambda must be >= 0 (got {l})"));
            }
        }
        errs
    }

    pub fn batches_per_epoch(&self, train_rows: usize) -> usize {
        train_rows / self.batch
    }

    pub fn total_steps(&self, train_rows: usize) -> usize {
        self.batches_per_epoch(train_rows) * self.epochs
    }

    pub fn executed_steps(&self, train_rows: usize) -> usize {
        let t = self.total_steps(train_rows);
        self.max_steps.map_or(t, |m| m.min(t))
    }

    pub fn schema(&self, train_rows: usize) -> ParticipationSchema {
        ParticipationSchema {
            kappa: self.epochs,
            b: self.batches_per_epoch(train_rows),
        }
    }

    pub fn bsr(&self, train_rows: usize) -> Result<BsrCoefficients> {
        let t = self.total_steps(train_rows);
        let p = self.band.unwrap_or(self.batches_per_epoch(train_rows)).min(t);
        let params = WorkloadParams::setting(self.setting, self.eta_s, t)
            .ok_or_else(|| ProtocolError::Config(format!("unknown setting {}", self.setting)))?;
        Ok(bandmf::bsr_coeffs(&params, p)?)
    }
}

/// Sampling rate and number of compositions charged for one variant.
pub fn accounting_plan(variant: Variant, batch: usize, train_rows: usize, epochs: usize, steps: usize) -> Option<(f64, u64)> {
    match variant {
        Variant::Plain => None,
        Variant::GShuff => Some((batch as f64 / train_rows as f64, steps as u64)),
        Variant::GBmf | Variant::GlBmf | Variant::LdpG => Some((1.0, 1)),
        Variant::LdpGl => Some((1.0, epochs as u64)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub sigma: f64,
    pub q: f64,
    pub compositions: u64,
    pub epsilon_accounted: f64,
}

/// Fixes the noise multiplier before any training happens.
pub fn plan_privacy(cfg: &ProtocolConfig, train_rows: usize) -> Result<Option<PrivacyBudget>> {
    let Some((q, comps)) = accounting_plan(
        cfg.variant,
        cfg.batch,
        train_rows,
        cfg.epochs,
        cfg.total_steps(train_rows),
    ) else {
        return Ok(None);
    };
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => dpcore::calibrate_sigma(cfg.epsilon, cfg.delta, q, comps)?,
    };
    let epsilon_accounted = Accountant::new(sigma, q, comps, cfg.delta)?.epsilon();
    if cfg.sigma.is_none() && epsilon_accounted > cfg.epsilon {
        return Err(ProtocolError::Config(format!(
            "accounted epsilon {epsilon_accounted} exceeds target {}",
            cfg.epsilon
        )));
    }
    Ok(Some(PrivacyBudget {
        sigma,
        q,
        compositions: comps,
        epsilon_accounted,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_accuracy: Option<f64>,
    pub train_loss: Option<f64>,
    pub bytes: u64,
    pub rounds: u64,
    pub client_upload_bytes: u64,
    pub walltime_lan_est: f64,
    pub walltime_wan_est: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub step: usize,
    pub client: usize,
    pub bound: Option<f64>,
    /// `‖ĝ − Γ̄ g_H‖²`
    pub realized_sq: Option<f64>,
    pub realized_max_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub epsilon_target: Option<f64>,
    pub epsilon_accounted: Option<f64>,
    pub sigma: Option<f64>,
    pub final_accuracy: f64,
    pub bytes_total: u64,
    pub rounds_total: u64,
    pub walltime_lan_est: f64,
    pub walltime_wan_est: f64,
    pub steps: usize,
    pub setup_bytes: u64,
    pub bytes_per_step: f64,
    pub leakage_digest: String,
    pub max_clipped_norm: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub epochs: Vec<EpochRecord>,
    pub recovery: Vec<RecoveryRecord>,
    pub global: GlobalModel,
    pub locals: Vec<LocalModel>,
    pub leakage: Vec<LeakageEntry>,
    pub ledger: CostLedger,
    /// Batch index visited at every step, when the order is public.
    pub batch_order: Option<Vec<usize>>,
    /// Global parameters after every step, when observable (plaintext or oracle).
    pub trajectory: Vec<Vec<f64>>,
}

/// Step indices at which each sample is used, given the visited batches.
pub fn participation(order: &[usize], batch: usize, train_rows: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); train_rows];
    for (t, &b) in order.iter().enumerate() {
        for s in &mut out[b * batch..(b + 1) * batch] {
            s.push(t);
        }
    }
    out
}

pub fn init_models(cfg: &ProtocolConfig, data: &VflData) -> (Vec<LocalModel>, GlobalModel) {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_d0e1);
    let locals: Vec<LocalModel> = data
        .train
        .parts
        .iter()
        .map(|p| {
            let shape = LocalShape {
                input: p.ncols(),
                ..cfg.local
            };
            LocalModel::new(&shape, &mut rng)
        })
        .collect();
    let d_h: usize = locals.iter().map(|l| l.embed_dim()).sum();
    let global = GlobalModel::new(d_h, cfg.classes, &mut rng);
    (locals, global)
}

pub fn embed(locals: &[LocalModel], split: &Split) -> Result<DMatrix<f64>> {
    let parts = locals
        .iter()
        .zip(&split.parts)
        .map(|(l, x)| l.forward(x))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(hcat(&parts))
}

fn hcat(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts[0].nrows();
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for p in parts {
        out.columns_mut(off, p.ncols()).copy_from(p);
        off += p.ncols();
    }
    out
}

pub fn evaluate(global: &GlobalModel, locals: &[LocalModel], split: &Split) -> Result<f64> {
    let h = embed(locals, split)?;
    Ok(models::accuracy(&global.predict(&h), &split.labels))
}

pub fn mean_loss(global: &GlobalModel, locals: &[LocalModel], split: &Split) -> Result<f64> {
    let h = embed(locals, split)?;
    let ps = global.loss_and_per_sample_grads(&h, &split.labels)?;
    Ok(ps.loss.iter().sum::<f64>() / ps.loss.len() as f64)
}

fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; labels.len() * classes];
    for (j, &l) in labels.iter().enumerate() {
        v[j * classes + l] = 1.0;
    }
    v
}

fn summarize(
    cfg: &ProtocolConfig,
    budget: Option<PrivacyBudget>,
    ledger: &CostLedger,
    setup: &CostLedger,
    steps: usize,
    final_accuracy: f64,
    leakage_digest: String,
) -> RunMetrics {
    let per_step = ledger.since(setup);
    RunMetrics {
        variant: cfg.variant.name().to_string(),
        epsilon_target: (cfg.variant != Variant::Plain && cfg.sigma.is_none()).then_some(cfg.epsilon),
        epsilon_accounted: budget.map(|b| b.epsilon_accounted).filter(|e| e.is_finite()),
        sigma: budget.map(|b| b.sigma),
        final_accuracy,
        bytes_total: ledger.total_bytes(),
        rounds_total: ledger.rounds,
        walltime_lan_est: estimate_walltime(ledger, &LatencyModel::lan()),
        walltime_wan_est: estimate_walltime(ledger, &LatencyModel::wan()),
        steps,
        setup_bytes: setup.total_bytes(),
        bytes_per_step: per_step.total_bytes() as f64 / steps.max(1) as f64,
        leakage_digest,
        max_clipped_norm: None,
        warnings: Vec::new(),
    }
}

fn epoch_record(
    epoch: usize,
    ledger: &CostLedger,
    since: &CostLedger,
    test_accuracy: Option<f64>,
    train_loss: Option<f64>,
) -> EpochRecord {
    let d = ledger.since(since);
    EpochRecord {
        epoch,
        test_accuracy,
        train_loss,
        bytes: d.total_bytes(),
        rounds: d.rounds,
        client_upload_bytes: d.client_bytes(),
        walltime_lan_est: estimate_walltime(&d, &LatencyModel::lan()),
        walltime_wan_est: estimate_walltime(&d, &LatencyModel::wan()),
    }
}

pub fn run(cfg: &ProtocolConfig, data: &VflData) -> Result<RunOutput> {
    let errs = cfg.validate(data.train.len());
    if !errs.is_empty() {
        return Err(ProtocolError::Config(errs.join("; ")));
    }
    match cfg.variant {
        Variant::Plain => {
            let opts = PlainOptions {
                clip: None,
                joint: None,
                local: cfg.plain_local,
            };
            plaintext_train(cfg, data, &opts)
        }
        Variant::GShuff | Variant::GBmf => frozen_mpc_train(cfg, data),
        Variant::GlBmf => gl_bmf_train(cfg, data),
        Variant::LdpG | Variant::LdpGl => ldp_train(cfg, data),
    }
}

// ---------------------------------------------------------------------------
// plaintext

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlainOptions {
    /// Per-sample clipping threshold.
    pub clip: Option<f64>,
    /// Include this local layer's per-sample gradients in the clipped vector.
    pub joint: Option<LocalLayer>,
    pub local: LocalUpdate,
}

/// Per-sample clip factors `1 / max(1, ‖g_j‖ / γ)`.
fn clip_factors(sq_norms: &[f64], gamma: Option<f64>) -> Vec<f64> {
    sq_norms
        .iter()
        .map(|&n| gamma.map_or(1.0, |g| 1.0 / (n.sqrt() / g).max(1.0)))
        .collect()
}

/// One SGD step on a batch; local gradients are taken at the pre-step parameters.
pub fn plain_step(
    global: &mut GlobalModel,
    locals: &mut [LocalModel],
    batch: &Split,
    opts: &PlainOptions,
    eta_s: f64,
    eta_i: f64,
) -> Result<()> {
    let bsz = batch.len();
    let hs = locals
        .iter()
        .zip(&batch.parts)
        .map(|(l, x)| l.forward(x))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let h = hcat(&hs);
    let ps = global.loss_and_per_sample_grads(&h, &batch.labels)?;
    let offsets: Vec<usize> = hs
        .iter()
        .scan(0, |o, m| {
            let s = *o;
            *o += m.ncols();
            Some(s)
        })
        .collect();
    let mut sq: Vec<f64> = (0..bsz).map(|j| ps.g_theta.row(j).norm_squared()).collect();
    if let Some(layer) = opts.joint {
        for (i, l) in locals.iter().enumerate() {
            let d = l.embed_dim();
            for (j, s) in sq.iter_mut().enumerate() {
                let x = batch.parts[i].row(j).transpose();
                let g = ps.g_h.view((j, offsets[i]), (1, d)).transpose();
                *s += (l.jacobian(&x, layer) * g).norm_squared();
            }
        }
    }
    let fac = clip_factors(&sq, opts.clip);
    let mut g_theta = DVector::zeros(global.n_params());
    for (j, f) in fac.iter().enumerate() {
        g_theta += ps.g_theta.row(j).transpose() * *f;
    }
    g_theta /= bsz as f64;
    let mut params = global.params();
    models::sgd_step(&mut params, g_theta.as_slice(), eta_s)?;
    if opts.local != LocalUpdate::Frozen {
        for (i, l) in locals.iter_mut().enumerate() {
            let d = l.embed_dim();
            let gh = DMatrix::from_fn(bsz, d, |j, k| fac[j] * ps.g_h[(j, offsets[i] + k)]);
            local_update(l, &batch.parts[i], &gh, opts.local, eta_i)?;
        }
    }
    global.set_params(&params);
    Ok(())
}

/// Back-propagates per-sample embedding gradients `gh` (`B × d`) and applies
/// the batch-mean update.
pub fn local_update(model: &mut LocalModel, xs: &DMatrix<f64>, gh: &DMatrix<f64>, mode: LocalUpdate, eta: f64) -> Result<()> {
    let bsz = xs.nrows() as f64;
    let mut ad: Vec<Vec<f64>> = model.adapters.iter().map(|a| vec![0.0; a.n_params()]).collect();
    let mut ly: Vec<Vec<f64>> = model.layers.iter().map(|w| vec![0.0; w.len()]).collect();
    for j in 0..xs.nrows() {
        let x = xs.row(j).transpose();
        let g = gh.row(j).transpose();
        for (acc, v) in ad.iter_mut().zip(model.adapter_grads(&x, &g)) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b / bsz);
        }
        if mode == LocalUpdate::Full {
            for (acc, v) in ly.iter_mut().zip(model.layer_grads(&x, &g)) {
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b / bsz);
            }
        }
    }
    for (a, g) in model.adapters.iter_mut().zip(&ad) {
        let mut p = a.params();
        models::sgd_step(&mut p, g, eta)?;
        a.set_params(&p);
    }
    if mode == LocalUpdate::Full {
        for (w, g) in model.layers.iter_mut().zip(&ly) {
            let mut p = models::flatten(w);
            models::sgd_step(&mut p, g, eta)?;
            *w = models::unflatten(&p, w.nrows(), w.ncols());
        }
    }
    Ok(())
}

/// Exact SGD with the chain rule, fixed batch order, no privacy.
pub fn plaintext_train(cfg: &ProtocolConfig, data: &VflData, opts: &PlainOptions) -> Result<RunOutput> {
    let m = data.train.len();
    let errs = cfg.validate(m);
    if !errs.is_empty() {
        return Err(ProtocolError::Config(errs.join("; ")));
    }
    let (mut locals, mut global) = init_models(cfg, data);
    let bnum = cfg.batches_per_epoch(m);
    let steps = cfg.executed_steps(m);
    let mut ledger = CostLedger::default();
    let setup = ledger.clone();
    let mut epochs = Vec::new();
    let mut trajectory = Vec::with_capacity(steps);
    let mut since = ledger.clone();
    let d_h = global.embed_dim() as u64;
    for t in 0..steps {
        let b = t % bnum;
        let batch = data.train.rows(b * cfg.batch..(b + 1) * cfg.batch);
        plain_step(&mut global, &mut locals, &batch, opts, cfg.eta_s, cfg.eta_i)?;
        trajectory.push(global.params());
        // embeddings up, embedding gradients down
        for (i, l) in locals.iter().enumerate() {
            ledger.charge_bytes(PartyId::Client(i as u16), (cfg.batch * l.embed_dim() * 8) as u64);
        }
        ledger.charge_bytes(PartyId::Server(0), cfg.batch as u64 * d_h * 8);
        ledger.rounds += 2;
        if (t + 1) % bnum == 0 || t + 1 == steps {
            let (acc, loss) = if cfg.eval_each_epoch {
                (
                    Some(evaluate(&global, &locals, &data.test)?),
                    Some(mean_loss(&global, &locals, &data.train)?),
                )
            } else {
                (None, None)
            };
            epochs.push(epoch_record(t / bnum, &ledger, &since, acc, loss));
            since = ledger.clone();
        }
    }
    let acc = evaluate(&global, &locals, &data.test)?;
    let metrics = summarize(cfg, None, &ledger, &setup, steps, acc, String::new());
    Ok(RunOutput {
        metrics,
        epochs,
        recovery: Vec::new(),
        global,
        locals,
        leakage: Vec::new(),
        ledger,
        batch_order: Some((0..steps).map(|t| t % bnum).collect()),
        trajectory,
    })
}

// ---------------------------------------------------------------------------
// MPC building blocks

fn cohort_for(cfg: &ProtocolConfig, clients: usize) -> Result<Cohort> {
    Ok(Cohort::new(
        cfg.backend,
        CohortOptions {
            spec: cfg.spec,
            n_clients: clients as u16,
            seed: cfg.seed,
            trusted_dealer: cfg.trusted_dealer,
            identity_shuffle: cfg.identity_shuffle,
            record_transcript: false,
            record_primitives: false,
            bit_budget: None,
        },
    )?)
}

/// Per-sample head gradients `[vec(g_W), g_b]` (`B × n_θ`), the softmax
/// residual `G = P − Y` and `W` as a secret `S × d_H`.
fn secure_head_grads(
    c: &mut Cohort,
    theta: &SecretValue,
    hb: &SecretValue,
    yb: &SecretValue,
    classes: usize,
) -> Result<(SecretValue, SecretValue, SecretValue)> {
    let (bsz, d) = hb.shape();
    let s = classes;
    let wflat = c.slice_cols(theta, 0, s * d)?;
    let w = c.reshape(&wflat, s, d)?;
    let wt = c.transpose(&w)?;
    let z = c.matmul_fx(hb, &wt, "fwd.logits")?;
    let bias = c.slice_cols(theta, s * d, s * d + s)?;
    let bias = c.repeat_rows(&bias, bsz)?;
    let z = c.add(&z, &bias)?;
    let p = c.softmax_rows(&z, "fwd.softmax")?;
    let g = c.sub(&p, yb)?;
    let gi: Vec<usize> = (0..bsz)
        .flat_map(|j| (0..s).flat_map(move |k| std::iter::repeat_n(j * s + k, d)))
        .collect();
    let hi: Vec<usize> = (0..bsz).flat_map(|j| (0..s).flat_map(move |_| (0..d).map(move |k| j * d + k))).collect();
    let ge = c.gather(&g, &gi, bsz, s * d)?;
    let he = c.gather(hb, &hi, bsz, s * d)?;
    let gw = c.mul_fx(&ge, &he, "bwd.weights")?;
    let gt = c.concat_cols(&[&gw, &g])?;
    Ok((gt, g, w))
}

/// Clip rows, aggregate, add the noise row and divide by `B`; returns the
/// `1 × n` release `g̃` at the default scale.
fn clip_aggregate_noise(
    c: &mut Cohort,
    g: &SecretValue,
    gamma: f64,
    noise: &CorrelatedNoise,
    t: usize,
    audit: &mut Option<f64>,
) -> Result<SecretValue> {
    let f = c.frac_bits();
    let bsz = g.rows();
    let clipped = c.clip_rows(g, gamma, "clip")?;
    if let (Some(max), Some(vals)) = (audit.as_mut(), c.probe(&clipped)) {
        for row in vals.chunks(g.cols()) {
            *max = max.max(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    let sum = c.sum_cols(&clipped)?;
    let n = noise.row(c, t)?;
    let n = c.trunc_to(&n, f, "noise.row")?;
    let noisy = c.add(&sum, &n)?;
    let mean = c.mul_public(&noisy, &[1.0 / bsz as f64], bandmf::NOISE_COEFF_BITS)?;
    Ok(c.trunc_to(&mean, f, "mean")?)
}

fn sgd_secret(c: &mut Cohort, theta: &SecretValue, grad: &SecretValue, eta: f64) -> Result<SecretValue> {
    let f = c.frac_bits();
    let step = c.mul_public(grad, &[eta], bandmf::NOISE_COEFF_BITS)?;
    let step = c.trunc_to(&step, f, "update")?;
    Ok(c.sub(theta, &step)?)
}

fn probe_model(c: &Cohort, theta: &SecretValue, template: &GlobalModel) -> Option<GlobalModel> {
    c.probe(theta).map(|p| {
        let mut g = template.clone();
        g.set_params(&p);
        g
    })
}

struct MpcEval<'a> {
    data: &'a VflData,
    eval: bool,
}

impl MpcEval<'_> {
    fn record(
        &self,
        c: &Cohort,
        theta: &SecretValue,
        template: &GlobalModel,
        locals: &[LocalModel],
        epoch: usize,
        since: &CostLedger,
    ) -> Result<EpochRecord> {
        let (acc, loss) = match (self.eval, probe_model(c, theta, template)) {
            (true, Some(g)) => (
                Some(evaluate(&g, locals, &self.data.test)?),
                Some(mean_loss(&g, locals, &self.data.train)?),
            ),
            _ => (None, None),
        };
        Ok(epoch_record(epoch, c.ledger(), since, acc, loss))
    }
}

fn noise_stream(
    c: &mut Cohort,
    cfg: &ProtocolConfig,
    budget: &PrivacyBudget,
    steps: usize,
    width: usize,
    m: usize,
) -> Result<(CorrelatedNoise, BsrCoefficients, f64)> {
    let (coeffs, sens) = match cfg.variant {
        Variant::GShuff => (BsrCoefficients { c: vec![1.0] }, 1.0),
        _ => {
            let coeffs = cfg.bsr(m)?;
            let sens = bandmf::sensitivity(&coeffs, &cfg.schema(m), cfg.total_steps(m))?;
            (coeffs, sens)
        }
    };
    let table = dpcore::gs_protocol(c, steps, width, budget.sigma * cfg.gamma * sens)?;
    Ok((CorrelatedNoise::new(&table, &coeffs)?, coeffs, sens))
}

// ---------------------------------------------------------------------------
// G-Shuff and G-BMF

/// Frozen local models: embeddings and labels are shared once, the cohort
/// trains the head and opens only the final model.
pub fn frozen_mpc_train(cfg: &ProtocolConfig, data: &VflData) -> Result<RunOutput> {
    let m = data.train.len();
    let budget = plan_privacy(cfg, m)?.expect("MPC variants are private");
    let (locals, global0) = init_models(cfg, data);
    let n = locals.len();
    let (d_h, s) = (global0.embed_dim(), global0.classes());
    let bsz = cfg.batch;
    let bnum = cfg.batches_per_epoch(m);
    let steps = cfg.executed_steps(m);
    let mut c = cohort_for(cfg, n)?;
    c.set_policy(OpenPolicy::whitelist(&[("final.", Recipient::All)]));
    let mut warnings = Vec::new();
    if cfg.variant == Variant::GBmf {
        let schema = cfg.schema(m);
        schema.check(cfg.total_steps(m))?;
    }

    let embeds: Vec<DMatrix<f64>> = locals
        .iter()
        .zip(&data.train.parts)
        .map(|(l, x)| l.forward(x))
        .collect::<std::result::Result<_, _>>()?;
    let flat: Vec<Vec<f64>> = embeds.iter().map(models::flatten).collect();
    let labels = one_hot(&data.train.labels, s);
    let mut items: Vec<(&[f64], usize, usize, PartyId)> = flat
        .iter()
        .zip(&embeds)
        .enumerate()
        .map(|(i, (v, e))| (v.as_slice(), m, e.ncols(), PartyId::Client(i as u16)))
        .collect();
    items.push((labels.as_slice(), m, s, PartyId::Client((n - 1) as u16)));
    let shares = c.input_many(&items, "input.embeddings")?;
    let refs: Vec<&SecretValue> = shares.iter().collect();
    let table = c.concat_cols(&refs)?;
    let mut theta = c.constant(&global0.params(), 1, global0.n_params(), cfg.spec.frac_bits)?;
    let (noise, _, _) = noise_stream(&mut c, cfg, &budget, steps, global0.n_params(), m)?;
    let setup = c.ledger().clone();
    if let Some(p) = delta_hint(cfg, m) {
        warnings.push(p);
    }

    let ev = MpcEval {
        data,
        eval: cfg.eval_each_epoch,
    };
    let mut audit = cfg.audit.then_some(0.0);
    let mut epochs = Vec::new();
    let mut trajectory = Vec::new();
    let mut since = c.ledger().clone();
    let mut order = table.clone();
    for t in 0..steps {
        let b = t % bnum;
        if b == 0 && cfg.variant == Variant::GShuff {
            order = c.shuffle_rows(&table, "shuffle")?;
        }
        let batch = c.slice_rows(&order, b * bsz, (b + 1) * bsz)?;
        let hb = c.slice_cols(&batch, 0, d_h)?;
        let yb = c.slice_cols(&batch, d_h, d_h + s)?;
        let (g, _, _) = secure_head_grads(&mut c, &theta, &hb, &yb, s)?;
        let rel = clip_aggregate_noise(&mut c, &g, cfg.gamma, &noise, t, &mut audit)?;
        theta = sgd_secret(&mut c, &theta, &rel, cfg.eta_s)?;
        if let Some(p) = c.probe(&theta) {
            trajectory.push(p);
        }
        if (t + 1) % bnum == 0 || t + 1 == steps {
            epochs.push(ev.record(&c, &theta, &global0, &locals, t / bnum, &since)?);
            since = c.ledger().clone();
        }
    }
    let opened = c.open(&theta, "final.theta")?;
    let mut global = global0.clone();
    global.set_params(&opened);
    let acc = evaluate(&global, &locals, &data.test)?;
    let mut metrics = summarize(cfg, Some(budget), c.ledger(), &setup, steps, acc, c.leakage_digest());
    metrics.max_clipped_norm = audit;
    metrics.warnings = warnings;
    Ok(RunOutput {
        metrics,
        epochs,
        recovery: Vec::new(),
        global,
        locals,
        leakage: c.leakage().to_vec(),
        ledger: c.ledger().clone(),
        batch_order: (cfg.variant == Variant::GBmf).then(|| (0..steps).map(|t| t % bnum).collect()),
        trajectory,
    })
}

fn delta_hint(cfg: &ProtocolConfig, m: usize) -> Option<String> {
    dpcore::PrivacyParams {
        epsilon: cfg.epsilon,
        delta: cfg.delta,
        clip_gamma: cfg.gamma,
        sigma: cfg.sigma.unwrap_or(0.0),
    }
    .delta_warning(m)
}

// ---------------------------------------------------------------------------
// GL-BMF

/// Global head and the selected adapter of every client trained jointly;
/// each client reconstructs per-sample embedding gradients from its released
/// slice and updates all of its adapters.
pub fn gl_bmf_train(cfg: &ProtocolConfig, data: &VflData) -> Result<RunOutput> {
    let m = data.train.len();
    let budget = plan_privacy(cfg, m)?.expect("MPC variants are private");
    let (mut locals, global0) = init_models(cfg, data);
    let n = locals.len();
    let (d_h, s) = (global0.embed_dim(), global0.classes());
    let n_theta = global0.n_params();
    let bsz = cfg.batch;
    let bnum = cfg.batches_per_epoch(m);
    let steps = cfg.executed_steps(m);
    let sel = LocalLayer::Adapter(locals[0].adapters.len() - 1);
    let n_l: Vec<usize> = locals.iter().map(|l| l.n_params(sel)).collect();
    let dims: Vec<usize> = locals.iter().map(|l| l.embed_dim()).collect();
    let h_off: Vec<usize> = dims.iter().scan(0, |o, d| { let s = *o; *o += d; Some(s) }).collect();
    let g_off: Vec<usize> = n_l.iter().scan(n_theta, |o, d| { let s = *o; *o += d; Some(s) }).collect();
    let n_con = n_theta + n_l.iter().sum::<usize>();
    cfg.schema(m).check(cfg.total_steps(m))?;

    let mut warnings = Vec::new();
    for (i, (&nl, &d)) in n_l.iter().zip(&dims).enumerate() {
        if nl < d * bsz {
            warnings.push(format!(
                "client {i}: {nl} selected parameters < d_H·B = {}; the system is underdetermined",
                d * bsz
            ));
        }
    }
    if let Some(p) = delta_hint(cfg, m) {
        warnings.push(p);
    }

    let mut c = cohort_for(cfg, n)?;
    c.set_policy(OpenPolicy::whitelist(&[
        ("final.", Recipient::All),
        ("release.slice", Recipient::AnyClient),
    ]));
    let labels = one_hot(&data.train.labels, s);
    let ys = c.input(&labels, m, s, PartyId::Client((n - 1) as u16), "input.labels")?;
    let mut theta = c.constant(&global0.params(), 1, n_theta, cfg.spec.frac_bits)?;
    let (noise, _, sens) = noise_stream(&mut c, cfg, &budget, steps, n_con, m)?;
    let setup = c.ledger().clone();

    let ev = MpcEval {
        data,
        eval: cfg.eval_each_epoch,
    };
    let mut audit = cfg.audit.then_some(0.0);
    let mut recovery = Vec::new();
    let mut epochs = Vec::new();
    let mut trajectory = Vec::new();
    let mut since = c.ledger().clone();
    for t in 0..steps {
        let b = t % bnum;
        let rows = b * bsz..(b + 1) * bsz;
        let xs: Vec<DMatrix<f64>> = data.train.parts.iter().map(|p| p.rows(rows.start, bsz).into_owned()).collect();
        // clients: fresh embeddings and Jacobians of the selected adapter
        let hs: Vec<Vec<f64>> = locals
            .iter()
            .zip(&xs)
            .map(|(l, x)| l.forward(x).map(|h| models::flatten(&h)))
            .collect::<std::result::Result<_, _>>()?;
        let js: Vec<Vec<f64>> = locals
            .iter()
            .zip(&xs)
            .map(|(l, x)| {
                let mut v = Vec::with_capacity(bsz * l.n_params(sel) * l.embed_dim());
                for j in 0..bsz {
                    v.extend(models::flatten(&l.jacobian(&x.row(j).transpose(), sel)));
                }
                v
            })
            .collect();
        let mut items: Vec<(&[f64], usize, usize, PartyId)> = Vec::with_capacity(2 * n);
        for i in 0..n {
            items.push((hs[i].as_slice(), bsz, dims[i], PartyId::Client(i as u16)));
        }
        for i in 0..n {
            items.push((js[i].as_slice(), bsz * n_l[i], dims[i], PartyId::Client(i as u16)));
        }
        let shares = c.input_many(&items, "input.step")?;
        let hparts: Vec<&SecretValue> = shares[..n].iter().collect();
        let hb = c.concat_cols(&hparts)?;
        let yb = c.slice_rows(&ys, rows.start, rows.end)?;

        let (g_theta, g, w) = secure_head_grads(&mut c, &theta, &hb, &yb, s)?;
        let g_h = c.matmul_fx(&g, &w, "bwd.embeddings")?;
        let mut parts = vec![g_theta];
        for i in 0..n {
            let ghi = c.slice_cols(&g_h, h_off[i], h_off[i] + dims[i])?;
            let ghi = c.reshape(&ghi, bsz * dims[i], 1)?;
            let gphi = c.matmul_batched(&shares[n + i], &ghi, bsz, "bwd.local")?;
            let gphi = c.trunc_to(&gphi, cfg.spec.frac_bits, "bwd.local")?;
            parts.push(c.reshape(&gphi, bsz, n_l[i])?);
        }
        let prefs: Vec<&SecretValue> = parts.iter().collect();
        let gcat = c.concat_cols(&prefs)?;
        // harness view of the true clipped embedding gradients
        let truth = if cfg.audit {
            match (c.probe(&gcat), c.probe(&g_h)) {
                (Some(gc), Some(gh)) => {
                    let fac: Vec<f64> = gc
                        .chunks(n_con)
                        .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>().sqrt() / cfg.gamma).max(1.0))
                        .collect();
                    Some(DMatrix::from_fn(bsz, d_h, |j, k| fac[j] * gh[j * d_h + k]))
                }
                _ => None,
            }
        } else {
            None
        };
        let rel = clip_aggregate_noise(&mut c, &gcat, cfg.gamma, &noise, t, &mut audit)?;
        let rel_theta = c.slice_cols(&rel, 0, n_theta)?;
        theta = sgd_secret(&mut c, &theta, &rel_theta, cfg.eta_s)?;
        let inv_norm = noise.inverse_row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
        let sigma_t = estimation::effective_sigma(budget.sigma, cfg.gamma, sens, inv_norm, cfg.sigma_t_squared);
        for i in 0..n {
            let slice = c.slice_cols(&rel, g_off[i], g_off[i] + n_l[i])?;
            let release = c.open_to(&slice, i as u16, "release.slice")?;
            // client i from here on: plaintext, post-processing only
            let LocalLayer::Adapter(idx) = sel else { unreachable!() };
            let design = locals[i].adapter_design(&xs[i], idx);
            let sys = estimation::assemble_with(Box::new(design), &release, bsz, sigma_t)?;
            let lambda = cfg.lambda.unwrap_or_else(|| sys.default_lambda());
            let rec = match estimation::ridge_solve(&sys, lambda) {
                Ok(r) => r,
                Err(EstimationError::Singular { .. }) => estimation::ridge_solve(&sys, lambda.max(estimation::LAMBDA_FLOOR))?,
                Err(e) => return Err(e.into()),
            };
            let g_hat = rec.rows(bsz);
            if cfg.emit_bounds || truth.is_some() {
                let (sq, mx) = match &truth {
                    Some(tr) => {
                        let diff = &g_hat - tr.columns(h_off[i], dims[i]);
                        (Some(diff.norm_squared()), Some(diff.amax()))
                    }
                    None => (None, None),
                };
                recovery.push(RecoveryRecord {
                    step: t,
                    client: i,
                    bound: cfg.emit_bounds.then(|| estimation::error_bound(&sys, cfg.gamma)),
                    realized_sq: sq,
                    realized_max_abs: mx,
                });
            }
            local_update(&mut locals[i], &xs[i], &g_hat, LocalUpdate::Adapters, cfg.eta_i)?;
        }
        if let Some(p) = c.probe(&theta) {
            trajectory.push(p);
        }
        if (t + 1) % bnum == 0 || t + 1 == steps {
            epochs.push(ev.record(&c, &theta, &global0, &locals, t / bnum, &since)?);
            since = c.ledger().clone();
        }
    }
    let opened = c.open(&theta, "final.theta")?;
    let mut global = global0.clone();
    global.set_params(&opened);
    let acc = evaluate(&global, &locals, &data.test)?;
    let mut metrics = summarize(cfg, Some(budget), c.ledger(), &setup, steps, acc, c.leakage_digest());
    metrics.max_clipped_norm = audit;
    metrics.warnings = warnings;
    Ok(RunOutput {
        metrics,
        epochs,
        recovery,
        global,
        locals,
        leakage: c.leakage().to_vec(),
        ledger: c.ledger().clone(),
        batch_order: Some((0..steps).map(|t| t % bnum).collect()),
        trajectory,
    })
}

// ---------------------------------------------------------------------------
// local DP baselines

/// Clip each row to norm `gamma` and add `N(0, (σγ)²)` per entry.
pub fn perturb_embeddings(h: &DMatrix<f64>, gamma: f64, sigma: f64, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, sigma * gamma).expect("finite deviation");
    let mut out = h.clone();
    for mut row in out.row_iter_mut() {
        let nrm = row.norm();
        if nrm > gamma {
            row *= gamma / nrm;
        }
        for v in row.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    out
}

/// Clients send clipped, noised embeddings in the clear to the label client,
/// which trains the head (and returns per-sample embedding gradients in `LdpGl`).
pub fn ldp_train(cfg: &ProtocolConfig, data: &VflData) -> Result<RunOutput> {
    let m = data.train.len();
    let budget = plan_privacy(cfg, m)?.expect("LDP variants are private");
    let (mut locals, mut global) = init_models(cfg, data);
    let bnum = cfg.batches_per_epoch(m);
    let steps = cfg.executed_steps(m);
    let s = global.classes();
    let mut rngs: Vec<ChaCha20Rng> = (0..locals.len())
        .map(|i| ChaCha20Rng::seed_from_u64(cfg.seed ^ (0x1d9 + i as u64)))
        .collect();
    let mut ledger = CostLedger::default();
    let released: Option<Vec<DMatrix<f64>>> = if cfg.variant == Variant::LdpG {
        let mut v = Vec::new();
        for (i, (l, x)) in locals.iter().zip(&data.train.parts).enumerate() {
            let h = l.forward(x)?;
            ledger.charge_bytes(PartyId::Client(i as u16), (h.len() * 8) as u64);
            v.push(perturb_embeddings(&h, cfg.gamma, budget.sigma, &mut rngs[i]));
        }
        ledger.rounds += 1;
        Some(v)
    } else {
        None
    };
    let setup = ledger.clone();
    let mut since = ledger.clone();
    let mut epochs = Vec::new();
    let mut trajectory = Vec::new();
    for t in 0..steps {
        let b = t % bnum;
        let rows = b * cfg.batch..(b + 1) * cfg.batch;
        let batch = data.train.rows(rows.clone());
        let hs: Vec<DMatrix<f64>> = match &released {
            Some(r) => r.iter().map(|h| h.rows(rows.start, cfg.batch).into_owned()).collect(),
            None => {
                let mut v = Vec::new();
                for (i, (l, x)) in locals.iter().zip(&batch.parts).enumerate() {
                    let h = l.forward(x)?;
                    ledger.charge_bytes(PartyId::Client(i as u16), (h.len() * 8) as u64);
                    v.push(perturb_embeddings(&h, cfg.gamma, budget.sigma, &mut rngs[i]));
                }
                ledger.rounds += 1;
                v
            }
        };
        let h = hcat(&hs);
        let ps = global.loss_and_per_sample_grads(&h, &batch.labels)?;
        let mut params = global.params();
        let mean: Vec<f64> = (0..global.n_params()).map(|p| ps.g_theta.column(p).mean()).collect();
        models::sgd_step(&mut params, &mean, cfg.eta_s)?;
        global.set_params(&params);
        if released.is_none() {
            let mut off = 0;
            for (i, l) in locals.iter_mut().enumerate() {
                let d = l.embed_dim();
                let gh = ps.g_h.columns(off, d).into_owned();
                ledger.charge_bytes(PartyId::Client((data.train.parts.len() - 1) as u16), (gh.len() * 8) as u64);
                local_update(l, &batch.parts[i], &gh, LocalUpdate::Adapters, cfg.eta_i)?;
                off += d;
            }
            ledger.rounds += 1;
        }
        let _ = s;
        trajectory.push(global.params());
        if (t + 1) % bnum == 0 || t + 1 == steps {
            let (acc, loss) = if cfg.eval_each_epoch {
                (
                    Some(evaluate(&global, &locals, &data.test)?),
                    Some(mean_loss(&global, &locals, &data.train)?),
                )
            } else {
                (None, None)
            };
            epochs.push(epoch_record(t / bnum, &ledger, &since, acc, loss));
            since = ledger.clone();
        }
    }
    let acc = evaluate(&global, &locals, &data.test)?;
    let metrics = summarize(cfg, Some(budget), &ledger, &setup, steps, acc, String::new());
    Ok(RunOutput {
        metrics,
        epochs,
        recovery: Vec::new(),
        global,
        locals,
        leakage: Vec::new(),
        ledger,
        batch_order: Some((0..steps).map(|t| t % bnum).collect()),
        trajectory,
    })
}

// ---------------------------------------------------------------------------
// result files

/// Tagged record in `results.jsonl`.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum ResultRecord<'a> {
    Epoch(&'a EpochRecord),
    Recovery(&'a RecoveryRecord),
    Summary(&'a RunMetrics),
}

/// Writes `results.jsonl` (epoch records, recovery records, one summary),
/// `leakage.json`, `cost.json` and `model.bin` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("results.jsonl"))?;
    let line = |r: ResultRecord| serde_json::to_string(&r).expect("records serialize");
    for e in &out.epochs {
        writeln!(f, "{}", line(ResultRecord::Epoch(e)))?;
    }
    for r in &out.recovery {
        writeln!(f, "{}", line(ResultRecord::Recovery(r)))?;
    }
    writeln!(f, "{}", line(ResultRecord::Summary(&out.metrics)))?;
    fs::write(
        dir.join("leakage.json"),
        serde_json::to_string_pretty(&out.leakage).expect("leakage serializes") + "\n",
    )?;
    fs::write(
        dir.join("cost.json"),
        serde_json::to_string_pretty(&out.ledger.to_json()).expect("cost serializes") + "\n",
    )?;
    let mut tensors = vec![out.global.w.clone(), DMatrix::from_column_slice(1, out.global.b.len(), out.global.b.as_slice())];
    for l in &out.locals {
        tensors.extend(l.all_matrices());
    }
    models::write_checkpoint(fs::File::create(dir.join("model.bin"))?, &tensors)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn small_data(samples: usize) -> VflData {
        generate(&DatasetSpec {
            samples_total: samples,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn small_cfg(variant: Variant) -> ProtocolConfig {
        ProtocolConfig {
            variant,
            batch: 16,
            epochs: 2,
            eval_each_epoch: false,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let data = small_data(80);
        let cfg = ProtocolConfig {
            eta_s: 0.0,
            eta_i: 0.0,
            ..small_cfg(Variant::Plain)
        };
        let out = plaintext_train(
            &cfg,
            &data,
            &PlainOptions {
                clip: None,
                joint: None,
                local: LocalUpdate::Full,
            },
        )
        .unwrap();
        let (l0, g0) = init_models(&cfg, &data);
        assert_eq!(out.global, g0);
        assert_eq!(out.locals, l0);
    }

    #[test]
    fn plaintext_descends() {
        let data = small_data(400);
        let cfg = ProtocolConfig {
            epochs: 1,
            eta_s: 0.1,
            ..small_cfg(Variant::Plain)
        };
        let (l0, g0) = init_models(&cfg, &data);
        let before = mean_loss(&g0, &l0, &data.train).unwrap();
        let out = run(&cfg, &data).unwrap();
        let after = mean_loss(&out.global, &out.locals, &data.train).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn accounting_plan_per_variant() {
        assert_eq!(accounting_plan(Variant::Plain, 128, 2560, 20, 400), None);
        assert_eq!(accounting_plan(Variant::GShuff, 128, 2560, 20, 400), Some((0.05, 400)));
        assert_eq!(accounting_plan(Variant::GBmf, 128, 2560, 20, 400), Some((1.0, 1)));
        assert_eq!(accounting_plan(Variant::LdpGl, 128, 2560, 20, 400), Some((1.0, 20)));
    }

    #[test]
    fn calibrated_budget_respects_target() {
        let cfg = ProtocolConfig {
            epsilon: 2.0,
            ..small_cfg(Variant::GShuff)
        };
        let b = plan_privacy(&cfg, 64).unwrap().unwrap();
        assert!(b.epsilon_accounted <= 2.0 && b.epsilon_accounted >= 0.99 * 2.0 || b.sigma == dpcore::SIGMA_MIN);
    }

    #[test]
    fn clip_factor_examples() {
        let f = clip_factors(&[0.36, 25.0, 0.0], Some(1.2));
        assert_eq!(f[0], 1.0);
        assert!((f[1] * 5.0 - 1.2).abs() < 1e-15);
        assert_eq!(f[2], 1.0);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = ProtocolConfig {
            batch: 7,
            epochs: 0,
            gamma: -1.0,
            ..small_cfg(Variant::GBmf)
        };
        let errs = cfg.validate(64);
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn participation_trace_counts() {
        let order: Vec<usize> = (0..12).map(|t| t % 4).collect();
        let p = participation(&order, 2, 8);
        for steps in &p {
            assert_eq!(steps.len(), 3);
            assert!(steps.windows(2).all(|w| w[1] - w[0] == 4));
        }
    }

    #[test]
    fn ldp_without_noise_is_plain_global_training() {
        let data = small_data(80);
        let cfg = ProtocolConfig {
            sigma: Some(0.0),
            gamma: 1e6,
            ..small_cfg(Variant::LdpG)
        };
        let a = ldp_train(&cfg, &data).unwrap();
        let b = plaintext_train(
            &cfg,
            &data,
            &PlainOptions {
                clip: None,
                joint: None,
                local: LocalUpdate::Frozen,
            },
        )
        .unwrap();
        for (x, y) in a.global.params().iter().zip(b.global.params()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_clips_before_noise() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.1, 0.0]);
        let out = perturb_embeddings(&h, 1.2, 0.0, &mut ChaCha20Rng::seed_from_u64(0));
        assert!((out.row(0).norm() - 1.2).abs() < 1e-12);
        assert_eq!(out.row(1), h.row(1));
    }

    #[test]
    fn frozen_mpc_opens_only_the_final_model() {
        let data = small_data(80);
        for v in [Variant::GShuff, Variant::GBmf] {
            let cfg = ProtocolConfig {
                epsilon: 8.0,
                ..small_cfg(v)
            };
            let out = frozen_mpc_train(&cfg, &data).unwrap();
            assert_eq!(out.leakage.len(), 1, "{v}");
            assert!(out.leakage[0].label.starts_with("final."));
            assert_eq!(out.epochs.len(), 2);
            assert_eq!(out.epochs[1].client_upload_bytes, 0, "{v}");
            assert!(out.epochs[0].client_upload_bytes == 0);
            assert!(out.metrics.setup_bytes > 0);
        }
    }

    #[test]
    fn gl_bmf_releases_one_slice_per_client_per_step() {
        let data = small_data(80);
        let cfg = ProtocolConfig {
            sigma: Some(0.0),
            audit: true,
            emit_bounds: true,
            ..small_cfg(Variant::GlBmf)
        };
        let out = gl_bmf_train(&cfg, &data).unwrap();
        let steps = cfg.executed_steps(data.train.len());
        let slices = out.leakage.iter().filter(|l| l.label == "release.slice").count();
        assert_eq!(slices, 2 * steps);
        assert_eq!(out.leakage.len(), 2 * steps + 1);
        assert_eq!(out.recovery.len(), 2 * steps);
        assert!(out.recovery.iter().all(|r| r.bound == Some(0.0)));
        assert!(out.epochs.iter().all(|e| e.client_upload_bytes > 0));
        assert!(out.metrics.max_clipped_norm.unwrap() <= cfg.gamma * (1.0 + 1e-3));
        let (l0, _) = init_models(&cfg, &data);
        assert_ne!(out.locals[0].adapters[0], l0[0].adapters[0]);
    }

    #[test]
    fn gl_bmf_recovers_noiseless_gradients_at_high_precision() {
        let data = small_data(80);
        let cfg = ProtocolConfig {
            batch: 2,
            sigma: Some(0.0),
            lambda: Some(0.0),
            audit: true,
            max_steps: Some(4),
            spec: FixedPointSpec {
                total_bits: 128,
                frac_bits: 24,
            },
            ..small_cfg(Variant::GlBmf)
        };
        let out = gl_bmf_train(&cfg, &data).unwrap();
        let worst = out.recovery.iter().filter_map(|r| r.realized_max_abs).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
    }
}
