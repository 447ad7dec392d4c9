use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fusion::{Architecture, FusionKind};
use crate::neurocore::SgdConfig;
use crate::synthgen::DeskDataConfig;
use crate::trainers::{KdSequence, TrainConfig, TrainMode};
use crate::{Error, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($ty:ty),*) => {$(
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> Result<Self> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("cannot parse {s:?} as {}", stringify!($ty))))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool);

impl ConfigValue for TrainMode {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

impl ConfigValue for KdSequence {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

impl ConfigValue for FusionKind {
    fn parse_value(s: &str) -> Result<Self> {
        match s.trim() {
            "concat" => Ok(FusionKind::Concat),
            "mean_pool" => Ok(FusionKind::MeanPool),
            other => Err(Error::config(format!("unknown fusion kind {other:?}"))),
        }
    }
    fn render(&self) -> String {
        match self {
            FusionKind::Concat => "concat".into(),
            FusionKind::MeanPool => "mean_pool".into(),
        }
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(T::parse_value)
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every knob of an experiment run. Parsed from flat `key = value` text;
        /// keys are the field names.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key.trim() {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::config(format!("{}: {e}", stringify!($field))))?;
                    } )*
                    other => return Err(Error::config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// Canonical `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), ConfigValue::render(&self.$field)) ),*]
            }
        }
    };
}

run_config! {
    /// Modality counts swept by experiments that vary `m`.
    m_values: Vec<usize> = vec![2, 3, 4, 5],
    /// Modality count of single-`m` experiments.
    m: usize = 3,
    num_classes: usize = 4,
    n_train: usize = 4000,
    n_test: usize = 1000,
    latent_dim: usize = 24,
    obs_dim: usize = 32,
    latents_per_modality: usize = 8,
    weak_predictive: usize = 1,
    strong_predictive: usize = 3,
    shared_pool: usize = 4,
    class_separation: f64 = 2.0,
    width: f64 = 1.0,
    fusion: FusionKind = FusionKind::Concat,
    epochs: usize = 300,
    batch_size: usize = 64,
    learning_rate: f64 = 0.01,
    weight_decay: f64 = 0.05,
    lr_decay: f64 = 0.9,
    lr_decay_every: usize = 100,
    mode: TrainMode = TrainMode::Vanilla,
    beta: f64 = 0.0,
    betas: Vec<f64> = vec![0.0, 2.0, 4.0, 6.0, 8.0],
    kd_sequence: KdSequence = KdSequence::WeakestToStrongest,
    kd_sequences: Vec<KdSequence> = KdSequence::ALL.to_vec(),
    kd_weight: f64 = 1.0,
    kd_epochs: usize = 100,
    teacher_epochs: usize = 100,
    ebr_interleave: usize = 10,
    md_weight: f64 = 1.0,
    noise_rate: f64 = 0.0,
    noise_rates: Vec<f64> = vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
    missing_rates: Vec<f64> = crate::substitution::STANDARD_RATES.to_vec(),
    /// Number of evenly spaced epochs at which models are snapshotted.
    snapshots: usize = 10,
    /// Relative singular-value cutoff of every rank the experiments report.
    rank_tol: f64 = 0.05,
    /// Epoch stride of gradient-rank recording.
    trace_every: usize = 10,
    tau: f64 = crate::diagnostics::TAU_ENC,
    /// Rows used for Jacobian-based diagnostics.
    diag_rows: usize = 512,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() || self.m_values.contains(&0) || self.m == 0 {
            return Err(Error::config("modality counts must be positive"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train and n_test must be positive"));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config("width must be positive"));
        }
        if self.missing_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::config("missing rates must lie in [0, 1)"));
        }
        if self.betas.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::config("betas must be non-negative"));
        }
        self.train_config(self.mode, 1).validate()
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn data_config(&self, m: usize) -> DeskDataConfig {
        DeskDataConfig {
            num_modalities: m,
            num_classes: self.num_classes,
            latent_dim: self.latent_dim,
            obs_dim: self.obs_dim,
            latents_per_modality: self.latents_per_modality,
            weak_predictive: self.weak_predictive,
            strong_predictive: self.strong_predictive,
            shared_pool: self.shared_pool,
            class_separation: self.class_separation,
            n_train: self.n_train,
            n_test: self.n_test,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let mut arch = Architecture::default().scaled(self.width);
        arch.fusion = self.fusion;
        arch
    }

    pub fn train_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                decay_factor: self.lr_decay,
                decay_every: self.lr_decay_every,
            },
            beta: self.beta,
            kd_sequence: self.kd_sequence,
            kd_weight: self.kd_weight,
            kd_epochs: self.kd_epochs,
            teacher_epochs: self.teacher_epochs,
            ebr_interleave: self.ebr_interleave,
            md_weight: self.md_weight,
            noise_rate: self.noise_rate,
            seed,
            rank_tol: self.rank_tol,
            trace_every: self.trace_every,
            ..TrainConfig::default()
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(s)?;
        Ok(cfg)
    }
}

/// Hex SHA-256 of arbitrary canonical text.
pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("betas", "0, 1.5,3").unwrap();
        cfg.set("mode", "ebr").unwrap();
        let back: RunConfig = cfg.to_text().parse().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.betas, vec![0.0, 1.5, 3.0]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg: RunConfig = "# header\n\nepochs = 7 # inline\n".parse().unwrap();
        assert_eq!(cfg.epochs, 7);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        assert!(matches!("epochs 7".parse::<RunConfig>(), Err(Error::Config(_))));
        assert!(matches!("nope = 1".parse::<RunConfig>(), Err(Error::Config(_))));
        assert!(matches!("epochs = x".parse::<RunConfig>(), Err(Error::Config(_))));
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
        assert_eq!(RunConfig::KEYS.len(), cfg.entries().len());
    }
}
