//! Run configuration files.
//!
//! ```toml
//! [run]
//! variant = "GBMF"
//! preset = "benchmark"
//! [privacy]
//! epsilon = 8.0
//! ```
//!
//! Sections: `[run]`, `[privacy]`, `[model]`, `[data]`, `[mpc]`. Every key is
//! optional; unknown sections or keys are errors and all problems are
//! reported together.

use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};

use crate::abb::BackendKind;
use crate::data::{DatasetSpec, Generator};
use crate::models::LocalShape;
use crate::numerics::FixedPointSpec;
use crate::protocols::{LocalUpdate, ProtocolConfig, Variant};

/// Server learning rate of the benchmark preset. Long enough training for
/// the synthetic benchmark to separate the variants within 20 epochs.
pub const BENCHMARK_ETA_S: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// B=128, γ=1.2, δ=1e-5, η_s=0.01, η_i=0.001.
    Default,
    /// As `Default` with `η_s = BENCHMARK_ETA_S`.
    Benchmark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub protocol: ProtocolConfig,
    pub data: DatasetSpec,
    /// Load a dataset written by `gen-data` instead of generating one.
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(Preset::Default)
    }
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        let mut protocol = ProtocolConfig::default();
        if p == Preset::Benchmark {
            protocol.eta_s = BENCHMARK_ETA_S;
        }
        Self {
            protocol,
            data: DatasetSpec::default(),
            data_dir: None,
            out: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(vec![e.to_string()]))?;
        let mut r = Reader::default();
        for (k, v) in &table {
            if !SECTIONS.iter().any(|(s, _)| s == k) {
                r.errs.push(format!("unknown section [{k}]"));
            } else if !v.is_table() {
                r.errs.push(format!("{k} must be a section"));
            }
        }
        for (name, keys) in SECTIONS {
            if let Some(Value::Table(t)) = table.get(*name) {
                for k in t.keys() {
                    if !keys.contains(&k.as_str()) {
                        r.errs.push(format!("unknown key {name}.{k}"));
                    }
                }
            }
        }
        let sec = |n: &str| table.get(n).and_then(Value::as_table).cloned().unwrap_or_default();
        let (run, privacy, model, data, mpc) = (sec("run"), sec("privacy"), sec("model"), sec("data"), sec("mpc"));

        let preset = match r.string(&run, "run.preset").as_deref() {
            None | Some("default") => Preset::Default,
            Some("benchmark") => Preset::Benchmark,
            Some(o) => {
                r.errs.push(format!("run.preset must be \"default\" or \"benchmark\" (got {o:?})"));
                Preset::Default
            }
        };
        let mut cfg = Config::preset(preset);
        let p = &mut cfg.protocol;
        if let Some(v) = r.string(&run, "run.variant") {
            match Variant::parse(&v) {
                Some(v) => p.variant = v,
                None => r.errs.push(format!(
                    "run.variant {v:?} is not one of Plain, GShuff, GBMF, GLBMF, LdpG, LdpGL"
                )),
            }
        }
        r.u64(&run, "run.seed", &mut p.seed);
        r.usize(&run, "run.batch", &mut p.batch);
        r.usize(&run, "run.epochs", &mut p.epochs);
        let mut ms = 0;
        if r.usize(&run, "run.max_steps", &mut ms) {
            p.max_steps = Some(ms);
        }
        r.f64(&run, "run.eta_s", &mut p.eta_s);
        r.f64(&run, "run.eta_i", &mut p.eta_i);
        r.bool(&run, "run.eval_each_epoch", &mut p.eval_each_epoch);
        if let Some(b) = r.string(&run, "run.backend") {
            match parse_backend(&b) {
                Some(k) => p.backend = k,
                None => r.errs.push(format!("run.backend must be \"oracle\" or \"rep3\" (got {b:?})")),
            }
        }
        if let Some(m) = r.string(&run, "run.local_update") {
            p.plain_local = match m.as_str() {
                "frozen" => LocalUpdate::Frozen,
                "adapters" => LocalUpdate::Adapters,
                "full" => LocalUpdate::Full,
                _ => {
                    r.errs.push(format!("run.local_update must be frozen, adapters or full (got {m:?})"));
                    p.plain_local
                }
            };
        }
        cfg.out = r.string(&run, "run.out").map(PathBuf::from);

        r.f64(&privacy, "privacy.epsilon", &mut p.epsilon);
        r.f64(&privacy, "privacy.delta", &mut p.delta);
        r.f64(&privacy, "privacy.gamma", &mut p.gamma);
        let mut s = 0.0;
        if r.f64(&privacy, "privacy.sigma", &mut s) {
            p.sigma = Some(s);
        }

        r.usize(&model, "model.hidden", &mut p.local.hidden);
        r.usize(&model, "model.embed", &mut p.local.embed);
        r.usize(&model, "model.rank", &mut p.local.rank);
        r.f64(&model, "model.lora_alpha", &mut p.local.lora_alpha);

        let d = &mut cfg.data;
        r.usize(&data, "data.samples", &mut d.samples_total);
        r.f64(&data, "data.train_fraction", &mut d.train_fraction);
        r.usize(&data, "data.features", &mut d.features);
        r.usize(&data, "data.clients", &mut d.clients);
        r.usize(&data, "data.classes", &mut d.classes);
        r.f64(&data, "data.margin", &mut d.margin);
        d.seed = p.seed;
        r.u64(&data, "data.seed", &mut d.seed);
        if let Some(g) = r.string(&data, "data.generator") {
            match g.as_str() {
                "linear-teacher" => d.generator = Generator::LinearTeacher,
                "gaussian-blobs" => d.generator = Generator::GaussianBlobs,
                _ => r.errs.push(format!(
                    "data.generator must be linear-teacher or gaussian-blobs (got {g:?})"
                )),
            }
        }
        cfg.data_dir = r.string(&data, "data.dir").map(PathBuf::from);
        p.classes = d.classes;

        let mut bits = (p.spec.total_bits as u64, p.spec.frac_bits as u64);
        r.u64(&mpc, "mpc.total_bits", &mut bits.0);
        r.u64(&mpc, "mpc.frac_bits", &mut bits.1);
        match FixedPointSpec::new(bits.0 as u32, bits.1 as u32) {
            Ok(spec) => p.spec = spec,
            Err(e) => r.errs.push(format!("mpc.total_bits/frac_bits: {e}")),
        }
        let mut setting = p.setting as u64;
        r.u64(&mpc, "mpc.setting", &mut setting);
        p.setting = setting.min(255) as u8;
        let mut band = 0;
        if r.usize(&mpc, "mpc.band", &mut band) {
            p.band = Some(band);
        }
        let mut lambda = 0.0;
        if r.f64(&mpc, "mpc.lambda", &mut lambda) {
            p.lambda = Some(lambda);
        }
        r.bool(&mpc, "mpc.sigma_t_squared", &mut p.sigma_t_squared);
        r.bool(&mpc, "mpc.trusted_dealer", &mut p.trusted_dealer);
        r.bool(&mpc, "mpc.identity_shuffle", &mut p.identity_shuffle);
        r.bool(&mpc, "mpc.emit_bounds", &mut p.emit_bounds);
        r.bool(&mpc, "mpc.audit", &mut p.audit);

        r.errs.extend(cfg.validate());
        if r.errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(r.errs))
        }
    }

    /// Cross-field checks. Dataset-dependent checks use the generated split size.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.data.validate();
        if errs.is_empty() && self.data_dir.is_none() {
            errs.extend(self.protocol.validate(self.data.train_size()));
        } else {
            errs.extend(self.protocol.validate(self.protocol.batch.max(1)));
        }
        errs
    }

    /// The local model shape for client inputs of width `input`.
    pub fn local_shape(&self, input: usize) -> LocalShape {
        LocalShape {
            input,
            ..self.protocol.local
        }
    }
}

pub fn parse_backend(s: &str) -> Option<BackendKind> {
    match s.to_ascii_lowercase().as_str() {
        "oracle" => Some(BackendKind::Oracle),
        "rep3" => Some(BackendKind::Rep3),
        _ => None,
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "run",
        &[
            "variant",
            "preset",
            "seed",
            "batch",
            "epochs",
            "max_steps",
            "eta_s",
            "eta_i",
            "eval_each_epoch",
            "backend",
            "local_update",
            "out",
        ],
    ),
    ("privacy", &["epsilon", "delta", "gamma", "sigma"]),
    ("model", &["hidden", "embed", "rank", "lora_alpha"]),
    (
        "data",
        &["samples", "train_fraction", "features", "clients", "classes", "generator", "seed", "margin", "dir"],
    ),
    (
        "mpc",
        &[
            "total_bits",
            "frac_bits",
            "setting",
            "band",
            "lambda",
            "sigma_t_squared",
            "trusted_dealer",
            "identity_shuffle",
            "emit_bounds",
            "audit",
        ],
    ),
];

/// Typed lookups that record mismatches instead of failing fast.
#[derive(Default)]
struct Reader {
    errs: Vec<String>,
}

impl Reader {
    fn get<'a>(t: &'a Table, path: &str) -> Option<&'a Value> {
        t.get(path.rsplit('.').next().expect("dotted key"))
    }

    fn string(&mut self, t: &Table, path: &str) -> Option<String> {
        match Self::get(t, path)? {
            Value::String(s) => Some(s.clone()),
            v => {
                self.errs.push(format!("{path} must be a string (got {v})"));
                None
            }
        }
    }

    fn f64(&mut self, t: &Table, path: &str, out: &mut f64) -> bool {
        match Self::get(t, path) {
            None => false,
            Some(Value::Float(x)) => {
                *out = *x;
                true
            }
            Some(Value::Integer(i)) => {
                *out = *i as f64;
                true
            }
            Some(v) => {
                self.errs.push(format!("{path} must be a number (got {v})"));
                false
            }
        }
    }

    fn u64(&mut self, t: &Table, path: &str, out: &mut u64) -> bool {
        match Self::get(t, path) {
            None => false,
            Some(Value::Integer(i)) if *i >= 0 => {
                *out = *i as u64;
                true
            }
            Some(v) => {
                self.errs.push(format!("{path} must be a non-negative integer (got {v})"));
                false
            }
        }
    }

    fn usize(&mut self, t: &Table, path: &str, out: &mut usize) -> bool {
        let mut v = *out as u64;
        let ok = self.u64(t, path, &mut v);
        if ok {
            *out = v as usize;
        }
        ok
    }

    fn bool(&mut self, t: &Table, path: &str, out: &mut bool) -> bool {
        match Self::get(t, path) {
            None => false,
            Some(Value::Boolean(b)) => {
                *out = *b;
                true
            }
            Some(v) => {
                self.errs.push(format!("{path} must be true or false (got {v})"));
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_paper_defaults() {
        let c = Config::parse("").unwrap();
        let p = &c.protocol;
        assert_eq!((p.batch, p.gamma, p.delta, p.eta_s), (128, 1.2, 1e-5, 0.01));
        assert_eq!(c.data.train_size(), 2560);
    }

    #[test]
    fn sections_map_to_fields() {
        let c = Config::parse(
            r#"
            [run]
            variant = "glbmf"
            preset = "benchmark"
            seed = 3
            epochs = 2
            backend = "rep3"
            [privacy]
            epsilon = 2
            sigma = 0.5
            [model]
            rank = 4
            [data]
            generator = "gaussian-blobs"
            classes = 3
            [mpc]
            setting = 2
            lambda = 0.01
            "#,
        )
        .unwrap();
        let p = &c.protocol;
        assert_eq!(p.variant, Variant::GlBmf);
        assert_eq!(p.eta_s, BENCHMARK_ETA_S);
        assert_eq!((p.seed, c.data.seed, p.epochs), (3, 3, 2));
        assert_eq!(p.backend, BackendKind::Rep3);
        assert_eq!((p.epsilon, p.sigma), (2.0, Some(0.5)));
        assert_eq!(p.local.rank, 4);
        assert_eq!((c.data.generator, c.data.classes, p.classes), (Generator::GaussianBlobs, 3, 3));
        assert_eq!((p.setting, p.lambda), (2, Some(0.01)));
    }

    #[test]
    fn every_problem_is_reported() {
        let err = Config::parse(
            r#"
            [run]
            batch = 100
            variant = "fancy"
            colour = "blue"
            [privacy]
            delta = 1.5
            epsilon = "big"
            [extras]
            x = 1
            "#,
        )
        .unwrap_err();
        let ConfigError::Invalid(errs) = err else { panic!() };
        let all = errs.join("\n");
        for needle in ["[extras]", "run.colour", "run.variant", "privacy.epsilon", "privacy.delta", "run.batch"] {
            assert!(all.contains(needle), "missing {needle} in\n{all}");
        }
    }
}
