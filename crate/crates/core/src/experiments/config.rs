//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! one of [`Config::KEYS`]; a misspelled key is an error rather than a
//! silently ignored setting. Lists are comma-separated.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

use super::model::{ModelConfig, Variant};
use super::optim::OptimizerConfig;
use super::router::{LsdiConfig, RouterSetup};
use super::tasks::SyntheticTask;
use super::train::TrainConfig;

/// Values that can appear on the right-hand side of a config line.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, bool, String);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($($(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr;)*) => {
        /// Every tunable of the experiment harness, with its default.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, rendered value)` for every key, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), ConfigValue::render(&self.$field))),*]
            }
        }
    };
}

config! {
    /// copy, sparse-recall, majority, spike, mixed or separable.
    task: String = "mixed".into();
    lag: usize = 8;
    n: usize = 32;
    n_classes: usize = 3;
    /// Gaussian distractor features appended to every token.
    noise_dims: usize = 2;
    d_model: usize = 16;
    d_state: usize = 16;
    k_max: usize = 100;
    b_hash: usize = 4;
    q_min: usize = 2;
    q_max: usize = 8;
    tau_assign: f64 = 0.7;
    tau_h: f64 = 0.5;
    depth: usize = 1;
    variant: String = "full".into();
    variants: Vec<String> = ["full", "no_imf", "no_filter", "no_ssm", "no_both", "static_r", "no_mix", "no_mi_loss"]
        .iter().map(|s| s.to_string()).collect();
    steps: usize = 200;
    batch: usize = 32;
    train_size: usize = 512;
    eval_size: usize = 512;
    /// sgd (momentum) or adam.
    optimizer: String = "sgd".into();
    lr: f64 = 0.05;
    momentum: f64 = 0.9;
    clip: f64 = 1.0;
    beta: f64 = 0.1;
    gamma: f64 = 0.05;
    eta: f64 = 0.1;
    tau_nce: f64 = 0.5;
    seed: u64 = 0;
    /// Number of consecutive seeds, starting at `seed`, for grids and sweeps.
    seeds: usize = 3;
    lags: Vec<usize> = vec![8, 32, 128, 512];
    k_values: Vec<usize> = vec![8, 16, 32, 64, 100, 200];
    ns: Vec<usize> = vec![256, 512, 1024, 2048, 4096];
    repeats: usize = 7;
    warmups: usize = 2;
    /// k, scaling or router.
    sweep: String = "k".into();
    lsdi_weights: Vec<f64> = vec![0.25, 0.5, 0.25];
    psr_threshold: f64 = 0.75;
    router_attention: bool = true;
    /// Router sequences hold `lag + 1 + router_pad` tokens.
    router_pad: usize = 0;
    /// Router attention window in tokens; 0 attends to the whole prefix.
    attn_window: usize = 16;
    /// Variant the routing gain is measured against.
    baseline: String = "no_filter".into();
    /// Diagnose presets: geometric, perturbed or spike.
    instances: Vec<String> = vec!["geometric".into(), "spike".into()];
    /// Pole of the geometric diagnose instances.
    decay: f64 = 0.6;
    /// Key noise scale of the perturbed instance.
    perturbation: f64 = 0.05;
    content_dim: usize = 3;
    fit_m: usize = 2;
    horizon: usize = 16;
    restarts: usize = 8;
}

impl Config {
    /// Parses a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    /// Canonical text: one `key = value` line per key, in declaration order.
    /// Parsing it back yields an identical config.
    pub fn resolved_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`Config::resolved_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_text().as_bytes()))
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        SyntheticTask::new(self.task.parse()?, self.lag, self.n, self.n_classes, self.noise_dims, self.seed)
    }

    pub fn model_config(&self, task: &SyntheticTask) -> ModelConfig {
        ModelConfig {
            d_in: task.feature_dim(),
            d_model: self.d_model,
            d_state: self.d_state,
            depth: self.depth,
            n_max: task.n,
            n_labels: task.num_labels(),
            k_max: self.k_max,
            b_hash: self.b_hash,
            q_min: self.q_min,
            q_max: self.q_max,
            tau_assign: self.tau_assign,
            tau_h: self.tau_h,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.steps,
            batch: self.batch,
            train_size: self.train_size,
            eval_size: self.eval_size,
            optimizer: OptimizerConfig {
                kind: self.optimizer.parse()?,
                lr: self.lr,
                momentum: self.momentum,
                clip: self.clip,
            },
            weights: LossWeights { beta: self.beta, gamma: self.gamma, eta: self.eta, tau_nce: self.tau_nce },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant_list(&self) -> Result<Vec<Variant>> {
        if self.variants.is_empty() {
            return Err(Error::Config("variant list is empty".into()));
        }
        self.variants.iter().map(|v| v.parse()).collect()
    }

    pub fn lsdi_config(&self) -> Result<LsdiConfig> {
        LsdiConfig::from_weights(&self.lsdi_weights, self.psr_threshold)
            .map_err(|e| Error::Config(format!("lsdi_weights: {e}")))
    }

    pub fn router_setup(&self) -> Result<RouterSetup> {
        Ok(RouterSetup {
            task: self.task()?,
            pad: self.router_pad,
            d_model: self.d_model,
            d_state: self.d_state,
            attention_enabled: self.router_attention,
            window: self.attn_window,
            train: self.train_config()?,
            lsdi: self.lsdi_config()?,
        })
    }

    /// Seeds `seed, seed + 1, …` (`seeds` of them).
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}
