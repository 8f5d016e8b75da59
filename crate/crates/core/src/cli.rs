//! Experiment plumbing shared by the `vflmpc` binary and the tests: dataset
//! loading, invariant checks on finished runs, sweeps and report tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{self, DataError, VflData};
use crate::protocols::{self, ProtocolError, RunMetrics, RunOutput, Variant};

/// Default output root when neither `--out` nor `run.out` is given.
pub const OUT_ENV: &str = "VFLMPC_OUT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("vflmpc-out"), PathBuf::from)
}

pub fn load_data(cfg: &Config) -> Result<VflData, DataError> {
    match &cfg.data_dir {
        Some(dir) => data::read_dataset(dir),
        None => data::generate(&cfg.data),
    }
}

/// Invariant violations of a finished run; empty when the run is clean.
pub fn check_invariants(cfg: &Config, out: &RunOutput) -> Vec<String> {
    let p = &cfg.protocol;
    let mut bad = Vec::new();
    if let Some(n) = out.metrics.max_clipped_norm {
        if n > p.gamma * (1.0 + 1e-3) {
            bad.push(format!("clipped per-sample norm {n} exceeds γ(1+1e-3) = {}", p.gamma * (1.0 + 1e-3)));
        }
    }
    if p.variant.is_mpc() {
        let finals = out.leakage.iter().filter(|l| l.label.starts_with("final.")).count();
        let slices = out.leakage.iter().filter(|l| l.label == "release.slice").count();
        let want_slices = if p.variant == Variant::GlBmf {
            out.metrics.steps * out.locals.len()
        } else {
            0
        };
        if finals != 1 || slices != want_slices || finals + slices != out.leakage.len() {
            bad.push(format!(
                "leakage ledger has {} entries ({finals} final, {slices} slices); expected 1 final and {want_slices} slices",
                out.leakage.len()
            ));
        }
    }
    bad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub epsilon: f64,
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStat {
    pub variant: String,
    pub epsilon: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// standard error of the mean
    pub se: f64,
    pub mean_bytes_per_step: f64,
}

/// Runs every (variant, ε, seed) combination of `base`. Each seed fixes both
/// the dataset and the model initialization. `workers` bounds parallelism.
pub fn sweep(
    base: &Config,
    variants: &[Variant],
    epsilons: &[f64],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<SweepRow>, ProtocolError> {
    let mut datasets = BTreeMap::new();
    for &s in seeds {
        let mut c = base.clone();
        c.data.seed = s;
        let d = load_data(&c).map_err(|e| ProtocolError::Config(e.to_string()))?;
        datasets.insert(s, d);
    }
    let jobs: Vec<(Variant, f64, u64)> = variants
        .iter()
        .flat_map(|&v| epsilons.iter().flat_map(move |&e| seeds.iter().map(move |&s| (v, e, s))))
        .collect();
    let next = AtomicUsize::new(0);
    let rows = Mutex::new(Vec::with_capacity(jobs.len()));
    let first_err = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, e, s)) = jobs.get(i) else { break };
                let mut p = base.protocol.clone();
                p.variant = v;
                p.epsilon = e;
                p.seed = s;
                p.eval_each_epoch = false;
                match protocols::run(&p, &datasets[&s]) {
                    Ok(out) => rows.lock().expect("rows").push((
                        i,
                        SweepRow {
                            variant: v.name().to_string(),
                            epsilon: e,
                            seed: s,
                            metrics: out.metrics,
                        },
                    )),
                    Err(err) => {
                        first_err.lock().expect("err").get_or_insert(err);
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().expect("err") {
        return Err(e);
    }
    let mut rows = rows.into_inner().expect("rows");
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Mean and standard error of final accuracy per (variant, ε), in first-seen order.
pub fn aggregate(rows: &[SweepRow]) -> Vec<SweepStat> {
    let mut groups: Vec<((String, f64), Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        let key = (r.variant.clone(), r.epsilon);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((variant, epsilon), g)| {
            let n = g.len() as f64;
            let acc: Vec<f64> = g.iter().map(|r| r.metrics.final_accuracy).collect();
            let mean = acc.iter().sum::<f64>() / n;
            let se = if g.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            SweepStat {
                variant,
                epsilon,
                runs: g.len(),
                mean_accuracy: mean,
                se,
                mean_bytes_per_step: g.iter().map(|r| r.metrics.bytes_per_step).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("sweep.jsonl");
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
        .collect();
    fs::write(&path, text)?;
    Ok(path)
}

/// Reads `sweep.jsonl` rows, or the summary records of `results.jsonl` files
/// found directly in `dir` or one level below it.
pub fn read_rows(dir: &Path) -> std::io::Result<Vec<SweepRow>> {
    let sweep = dir.join("sweep.jsonl");
    if sweep.exists() {
        return fs::read_to_string(&sweep)?
            .lines()
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect();
    }
    let mut files = vec![dir.join("results.jsonl")];
    if let Ok(entries) = fs::read_dir(dir) {
        let mut subs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path().join("results.jsonl")).collect();
        subs.sort();
        files.extend(subs);
    }
    let mut rows = Vec::new();
    for f in files.iter().filter(|f| f.exists()) {
        for line in fs::read_to_string(f)?.lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(std::io::Error::other)?;
            if v["record"] == "summary" {
                let m: RunMetrics = serde_json::from_value(v).map_err(std::io::Error::other)?;
                rows.push(SweepRow {
                    variant: m.variant.clone(),
                    epsilon: m.epsilon_target.unwrap_or(f64::INFINITY),
                    seed: 0,
                    metrics: m,
                });
            }
        }
    }
    Ok(rows)
}

pub fn format_table(stats: &[SweepStat]) -> String {
    let mut s = format!("{:<8} {:>6} {:>4} {:>9} {:>8} {:>14}\n", "variant", "eps", "runs", "accuracy", "s.e.", "bytes/step");
    for r in stats {
        s += &format!(
            "{:<8} {:>6} {:>4} {:>9.4} {:>8.4} {:>14.0}\n",
            r.variant, r.epsilon, r.runs, r.mean_accuracy, r.se, r.mean_bytes_per_step
        );
    }
    s
}
