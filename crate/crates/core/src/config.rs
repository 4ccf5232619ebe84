//! Experiment configuration: a flat `key = value` document (TOML syntax),
//! presets, and command-line overrides.
//!
//! Required keys are `dataset`, `clients` and `seed`; everything else has a
//! default listed in [`ExperimentConfig::defaults`].

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;
use toml::{Table, Value};

use crate::contrastive::ContrastiveConfig;
use crate::ipwd::IpwdConfig;
use crate::models::{Family, Heterogeneity};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("key `{key}`: expected {expected}")]
    Type { key: String, expected: &'static str },
    #[error("key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("keys `{first}` and `{second}`: {message}")]
    Conflict {
        first: &'static str,
        second: &'static str,
        message: String,
    },
    #[error("unknown preset `{name}`; available: {available}")]
    UnknownPreset { name: String, available: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    Synthetic,
    FashionIdx,
    Ucihar,
}

impl DatasetChoice {
    pub fn name(self) -> &'static str {
        match self {
            DatasetChoice::Synthetic => "synthetic",
            DatasetChoice::FashionIdx => "fashion-idx",
            DatasetChoice::Ucihar => "ucihar",
        }
    }
}

impl FromStr for DatasetChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(DatasetChoice::Synthetic),
            "fashion-idx" => Ok(DatasetChoice::FashionIdx),
            "ucihar" => Ok(DatasetChoice::Ucihar),
            _ => Err("one of synthetic, fashion-idx, ucihar".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoIpwd,
    NoBcl,
    Baseline,
}

/// Distillation rounds performed by the baseline variant.
pub const BASELINE_DISTILL_ROUNDS: usize = 2;

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIpwd => "no_ipwd",
            Variant::NoBcl => "no_bcl",
            Variant::Baseline => "baseline",
        }
    }

    /// Whether round `round` (1-based) performs knowledge distillation.
    pub fn distills_in(self, round: usize) -> bool {
        self != Variant::Baseline || round <= BASELINE_DISTILL_ROUNDS
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_ipwd" => Ok(Variant::NoIpwd),
            "no_bcl" => Ok(Variant::NoBcl),
            "baseline" => Ok(Variant::Baseline),
            _ => Err("one of full, no_ipwd, no_bcl, baseline".into()),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetChoice,
    pub data_dir: PathBuf,
    pub clients: usize,
    pub participants: usize,
    pub rounds: usize,
    pub dirichlet_alpha: f64,
    pub heterogeneity: Heterogeneity,
    pub global_family: Family,
    pub feature_extent: usize,
    pub variant: Variant,
    pub ipwd_alpha: f64,
    pub ipwd_beta: f64,
    pub ipwd_slope: f64,
    pub ipwd_threshold: f64,
    pub frequency_floor: Option<f64>,
    pub temperature: f64,
    pub decode_weight: f64,
    pub layer_weights: Option<Vec<f64>>,
    pub contrastive_coefficient: f64,
    pub history: usize,
    pub kd_weight: f64,
    pub lr: f64,
    /// Server distillation rate; `None` reuses `lr`.
    pub server_lr: Option<f64>,
    pub generator_lr: f64,
    /// Bound on generated coordinates (standardized units).
    pub generator_scale: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub pseudo_batch: usize,
    pub fill_count: Option<usize>,
    pub generator_steps: usize,
    pub distill_steps: usize,
    pub synthetic_classes: usize,
    /// `None` uses one axis per class.
    pub synthetic_input_extent: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub workers: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "clients",
    "participants",
    "rounds",
    "dirichlet_alpha",
    "heterogeneity",
    "global_family",
    "feature_extent",
    "variant",
    "ipwd_alpha",
    "ipwd_beta",
    "ipwd_slope",
    "ipwd_threshold",
    "frequency_floor",
    "temperature",
    "decode_weight",
    "layer_weights",
    "contrastive_coefficient",
    "history",
    "kd_weight",
    "lr",
    "server_lr",
    "generator_lr",
    "generator_scale",
    "local_epochs",
    "batch_size",
    "pseudo_batch",
    "fill_count",
    "generator_steps",
    "distill_steps",
    "synthetic_classes",
    "synthetic_input_extent",
    "synthetic_train",
    "synthetic_test",
    "workers",
    "seed",
    "output_dir",
];

pub fn known_keys() -> &'static [&'static str] {
    KEYS
}

fn type_err(key: &str, expected: &'static str) -> ConfigError {
    ConfigError::Type {
        key: key.to_string(),
        expected,
    }
}

fn get_usize(t: &Table, key: &str) -> Result<Option<usize>, ConfigError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
        Some(_) => Err(type_err(key, "a nonnegative integer")),
    }
}

fn get_f64(t: &Table, key: &str) -> Result<Option<f64>, ConfigError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Float(f)) => Ok(Some(*f)),
        Some(Value::Integer(i)) => Ok(Some(*i as f64)),
        Some(_) => Err(type_err(key, "a number")),
    }
}

fn get_str<'a>(t: &'a Table, key: &str) -> Result<Option<&'a str>, ConfigError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(type_err(key, "a string")),
    }
}

fn get_parsed<T: FromStr<Err = String>>(t: &Table, key: &str) -> Result<Option<T>, ConfigError> {
    get_str(t, key)?
        .map(|s| {
            s.parse().map_err(|message| ConfigError::Invalid {
                key: key.to_string(),
                message,
            })
        })
        .transpose()
}

fn get_f64_list(t: &Table, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::Float(f) => Ok(*f),
                Value::Integer(i) => Ok(*i as f64),
                _ => Err(type_err(key, "an array of numbers")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(type_err(key, "an array of numbers")),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn quote(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

impl ExperimentConfig {
    /// All defaults for the three required values.
    pub fn defaults(dataset: DatasetChoice, clients: usize, seed: u64) -> Self {
        Self {
            dataset,
            data_dir: PathBuf::from("data"),
            clients,
            participants: clients.min(10),
            rounds: 100,
            dirichlet_alpha: 0.1,
            heterogeneity: Heterogeneity::Heterogeneous,
            global_family: Family::Shallow,
            feature_extent: 16,
            variant: Variant::Full,
            ipwd_alpha: 1.0,
            ipwd_beta: 1.0,
            ipwd_slope: 5.0,
            ipwd_threshold: 0.5,
            frequency_floor: None,
            temperature: 0.5,
            decode_weight: 1.0,
            layer_weights: None,
            contrastive_coefficient: 1.0,
            history: 1,
            kd_weight: 1.0,
            lr: 0.001,
            server_lr: None,
            generator_lr: 0.001,
            generator_scale: crate::generator::DEFAULT_OUTPUT_SCALE,
            local_epochs: 1,
            batch_size: 32,
            pseudo_batch: 64,
            fill_count: None,
            generator_steps: 10,
            distill_steps: 10,
            synthetic_classes: 3,
            synthetic_input_extent: None,
            synthetic_train: 1200,
            synthetic_test: 600,
            workers: 1,
            seed,
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        Self::from_table(&table)
    }

    pub fn from_table(t: &Table) -> Result<Self, ConfigError> {
        for (key, value) in t {
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::Unknown(key.clone()));
            }
            if matches!(value, Value::Table(_)) {
                return Err(type_err(key, "a scalar or array (nesting is not supported)"));
            }
        }
        let dataset = get_parsed(t, "dataset")?.ok_or(ConfigError::Missing("dataset"))?;
        let clients = get_usize(t, "clients")?.ok_or(ConfigError::Missing("clients"))?;
        let seed = match t.get("seed") {
            None => return Err(ConfigError::Missing("seed")),
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => return Err(type_err("seed", "a nonnegative integer")),
        };
        let mut c = Self::defaults(dataset, clients, seed);

        macro_rules! set {
            ($field:ident, $getter:ident) => {
                if let Some(v) = $getter(t, stringify!($field))? {
                    c.$field = v;
                }
            };
            ($field:ident, $getter:ident, opt) => {
                if let Some(v) = $getter(t, stringify!($field))? {
                    c.$field = Some(v);
                }
            };
        }
        if let Some(s) = get_str(t, "data_dir")? {
            c.data_dir = PathBuf::from(s);
        }
        if let Some(s) = get_str(t, "output_dir")? {
            c.output_dir = PathBuf::from(s);
        }
        set!(participants, get_usize);
        set!(rounds, get_usize);
        set!(dirichlet_alpha, get_f64);
        set!(heterogeneity, get_parsed);
        set!(global_family, get_parsed);
        set!(feature_extent, get_usize);
        set!(variant, get_parsed);
        set!(ipwd_alpha, get_f64);
        set!(ipwd_beta, get_f64);
        set!(ipwd_slope, get_f64);
        set!(ipwd_threshold, get_f64);
        set!(frequency_floor, get_f64, opt);
        set!(temperature, get_f64);
        set!(decode_weight, get_f64);
        set!(layer_weights, get_f64_list, opt);
        set!(contrastive_coefficient, get_f64);
        set!(history, get_usize);
        set!(kd_weight, get_f64);
        set!(lr, get_f64);
        set!(server_lr, get_f64, opt);
        set!(generator_lr, get_f64);
        set!(generator_scale, get_f64);
        set!(local_epochs, get_usize);
        set!(batch_size, get_usize);
        set!(pseudo_batch, get_usize);
        set!(fill_count, get_usize, opt);
        set!(generator_steps, get_usize);
        set!(distill_steps, get_usize);
        set!(synthetic_classes, get_usize);
        set!(synthetic_input_extent, get_usize, opt);
        set!(synthetic_train, get_usize);
        set!(synthetic_test, get_usize);
        set!(workers, get_usize);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: &str| ConfigError::Invalid {
            key: key.to_string(),
            message: message.to_string(),
        };
        if self.clients == 0 {
            return Err(invalid("clients", "must be at least 1"));
        }
        if self.participants == 0 {
            return Err(invalid("participants", "must be at least 1"));
        }
        if self.participants > self.clients {
            return Err(ConfigError::Conflict {
                first: "participants",
                second: "clients",
                message: format!(
                    "{} participants per round exceed {} clients",
                    self.participants, self.clients
                ),
            });
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        for (key, v) in [
            ("lr", self.lr),
            ("generator_lr", self.generator_lr),
            ("kd_weight", self.kd_weight),
            ("ipwd_alpha", self.ipwd_alpha),
            ("ipwd_beta", self.ipwd_beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, "must be finite and ≥ 0"));
            }
        }
        for (key, v) in [
            ("dirichlet_alpha", self.dirichlet_alpha),
            ("ipwd_slope", self.ipwd_slope),
            ("temperature", self.temperature),
            ("generator_scale", self.generator_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(key, "must be finite and > 0"));
            }
        }
        for (key, v) in [
            ("ipwd_threshold", self.ipwd_threshold),
            ("decode_weight", self.decode_weight),
            ("contrastive_coefficient", self.contrastive_coefficient),
        ] {
            if !v.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        if let Some(r) = self.server_lr {
            if !(r.is_finite() && r >= 0.0) {
                return Err(invalid("server_lr", "must be finite and ≥ 0"));
            }
        }
        if let Some(f) = self.frequency_floor {
            if !(f.is_finite() && f > 0.0) {
                return Err(invalid("frequency_floor", "must be finite and > 0"));
            }
        }
        if let Some(ws) = &self.layer_weights {
            if ws.is_empty() || ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(invalid("layer_weights", "must be nonempty, finite and ≥ 0"));
            }
        }
        for (key, v) in [
            ("history", self.history),
            ("batch_size", self.batch_size),
            ("pseudo_batch", self.pseudo_batch),
            ("feature_extent", self.feature_extent),
            ("workers", self.workers),
            ("synthetic_classes", self.synthetic_classes),
            ("synthetic_test", self.synthetic_test),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if self.synthetic_input_extent == Some(0) {
            return Err(invalid("synthetic_input_extent", "must be at least 1"));
        }
        if self.dataset == DatasetChoice::Synthetic && self.synthetic_train < self.clients {
            return Err(ConfigError::Conflict {
                first: "synthetic_train",
                second: "clients",
                message: "every client needs at least one sample".into(),
            });
        }
        Ok(())
    }

    pub fn synthetic_extent(&self) -> usize {
        self.synthetic_input_extent.unwrap_or(self.synthetic_classes)
    }

    pub fn server_rate(&self) -> f64 {
        self.server_lr.unwrap_or(self.lr)
    }

    pub fn ipwd(&self) -> IpwdConfig {
        let mut cfg = IpwdConfig::for_rounds(self.rounds);
        cfg.alpha = self.ipwd_alpha;
        cfg.beta = self.ipwd_beta;
        cfg.slope = self.ipwd_slope;
        cfg.threshold = self.ipwd_threshold;
        if let Some(f) = self.frequency_floor {
            cfg.frequency_floor = f;
        }
        cfg
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            decode_weight: self.decode_weight,
            layer_weights: self.layer_weights.clone(),
            coefficient: if self.variant == Variant::NoBcl {
                0.0
            } else {
                self.contrastive_coefficient
            },
            history: self.history,
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("dataset", quote(self.dataset.name())),
            ("data_dir", quote(&self.data_dir.to_string_lossy())),
            ("clients", self.clients.to_string()),
            ("participants", self.participants.to_string()),
            ("rounds", self.rounds.to_string()),
            ("dirichlet_alpha", fmt_f64(self.dirichlet_alpha)),
            ("heterogeneity", quote(self.heterogeneity.name())),
            ("global_family", quote(self.global_family.name())),
            ("feature_extent", self.feature_extent.to_string()),
            ("variant", quote(self.variant.name())),
            ("ipwd_alpha", fmt_f64(self.ipwd_alpha)),
            ("ipwd_beta", fmt_f64(self.ipwd_beta)),
            ("ipwd_slope", fmt_f64(self.ipwd_slope)),
            ("ipwd_threshold", fmt_f64(self.ipwd_threshold)),
        ];
        if let Some(f) = self.frequency_floor {
            out.push(("frequency_floor", fmt_f64(f)));
        }
        out.extend([
            ("temperature", fmt_f64(self.temperature)),
            ("decode_weight", fmt_f64(self.decode_weight)),
        ]);
        if let Some(ws) = &self.layer_weights {
            let items: Vec<String> = ws.iter().map(|w| fmt_f64(*w)).collect();
            out.push(("layer_weights", format!("[{}]", items.join(", "))));
        }
        out.extend([
            ("contrastive_coefficient", fmt_f64(self.contrastive_coefficient)),
            ("history", self.history.to_string()),
            ("kd_weight", fmt_f64(self.kd_weight)),
            ("lr", fmt_f64(self.lr)),
        ]);
        if let Some(r) = self.server_lr {
            out.push(("server_lr", fmt_f64(r)));
        }
        out.extend([
            ("generator_lr", fmt_f64(self.generator_lr)),
            ("generator_scale", fmt_f64(self.generator_scale)),
            ("local_epochs", self.local_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("pseudo_batch", self.pseudo_batch.to_string()),
        ]);
        if let Some(d) = self.synthetic_input_extent {
            out.push(("synthetic_input_extent", d.to_string()));
        }
        if let Some(n) = self.fill_count {
            out.push(("fill_count", n.to_string()));
        }
        out.extend([
            ("generator_steps", self.generator_steps.to_string()),
            ("distill_steps", self.distill_steps.to_string()),
            ("synthetic_classes", self.synthetic_classes.to_string()),
            ("synthetic_train", self.synthetic_train.to_string()),
            ("synthetic_test", self.synthetic_test.to_string()),
            ("workers", self.workers.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", quote(&self.output_dir.to_string_lossy())),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key=value`. The value is read as a TOML scalar or array;
    /// anything that does not parse is taken as a bare string.
    pub fn with_override(&self, assignment: &str) -> Result<Self, ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax(format!("override `{assignment}` lacks `=`")))?;
        let key = key.trim();
        let raw = raw.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::Unknown(key.to_string()));
        }
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        let mut table: Table = self
            .to_text()
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        table.insert(key.to_string(), value);
        Self::from_table(&table)
    }
}

pub const PRESET_SIZES: [usize; 6] = [10, 20, 50, 100, 200, 500];
pub const JR_SWEEP_CLIENTS: usize = 18;
pub const JR_SWEEP_RATES: [(usize, usize); 4] = [(1, 1), (2, 3), (1, 3), (1, 9)];
pub const LONG_ROUNDS: usize = 1000;

pub fn preset_names() -> Vec<String> {
    PRESET_SIZES
        .iter()
        .map(|n| format!("S@{n}"))
        .chain(std::iter::once("jr-sweep".to_string()))
        .collect()
}

/// Participants for a rate `num/den` of `clients`, at least one.
pub fn participants_for_rate(clients: usize, num: usize, den: usize) -> usize {
    (clients * num / den).max(1)
}

/// Configurations for a preset name. `S@N` yields one config; `jr-sweep`
/// yields one per participation rate. `long_rounds` selects 1000 rounds.
pub fn preset(name: &str, long_rounds: bool) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let rounds = if long_rounds { LONG_ROUNDS } else { 100 };
    if name == "jr-sweep" {
        return Ok(JR_SWEEP_RATES
            .iter()
            .map(|&(num, den)| {
                let mut c = ExperimentConfig::defaults(DatasetChoice::Ucihar, JR_SWEEP_CLIENTS, 0);
                c.participants = participants_for_rate(JR_SWEEP_CLIENTS, num, den);
                c.rounds = rounds;
                c.output_dir = PathBuf::from(format!("runs/jr-{num}-{den}"));
                c
            })
            .collect());
    }
    let n = name
        .strip_prefix("S@")
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|n| PRESET_SIZES.contains(n))
        .ok_or_else(|| ConfigError::UnknownPreset {
            name: name.to_string(),
            available: preset_names().join(", "),
        })?;
    let mut c = ExperimentConfig::defaults(DatasetChoice::Synthetic, n, 0);
    c.participants = 10;
    c.rounds = rounds;
    c.synthetic_train = c.synthetic_train.max(4 * n);
    c.output_dir = PathBuf::from(format!("runs/S@{n}"));
    Ok(vec![c])
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = \"synthetic\"\nclients = 20\nseed = 7\n";

    #[test]
    fn minimal_document_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c, ExperimentConfig::defaults(DatasetChoice::Synthetic, 20, 7));
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.participants, 10);
        assert_eq!(c.rounds, 100);
        assert_eq!(c.dirichlet_alpha, 0.1);
        assert!((c.ipwd().frequency_floor - 0.005).abs() < 1e-15);
    }

    #[test]
    fn participants_above_clients_names_both_keys() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}participants = 30\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("participants") && msg.contains("clients"), "{msg}");
    }

    #[test]
    fn errors_name_the_key() {
        let missing = ExperimentConfig::parse("dataset = \"synthetic\"\nseed = 1\n").unwrap_err();
        assert_eq!(missing, ConfigError::Missing("clients"));
        let unknown = ExperimentConfig::parse(&format!("{MINIMAL}bogus = 1\n")).unwrap_err();
        assert_eq!(unknown, ConfigError::Unknown("bogus".into()));
        let typed = ExperimentConfig::parse(&format!("{MINIMAL}rounds = \"ten\"\n")).unwrap_err();
        assert!(typed.to_string().contains("rounds"));
        let bad = ExperimentConfig::parse(&format!("{MINIMAL}lr = -1.0\n")).unwrap_err();
        assert!(bad.to_string().contains("`lr`"));
        let variant = ExperimentConfig::parse(&format!("{MINIMAL}variant = \"x\"\n")).unwrap_err();
        assert!(variant.to_string().contains("variant"));
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.layer_weights = Some(vec![0.25, 0.75]);
        c.frequency_floor = Some(0.01);
        c.fill_count = Some(3);
        c.server_lr = Some(0.002);
        c.variant = Variant::NoBcl;
        c.lr = 0.1 + 0.2;
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_are_typed() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let d = c.with_override("temperature=1000").unwrap();
        assert_eq!(d.temperature, 1000.0);
        let e = d.with_override("variant=no_ipwd").unwrap();
        assert_eq!(e.variant, Variant::NoIpwd);
        assert!(c.with_override("nothing=1").is_err());
        assert!(c.with_override("participants=99").is_err());
    }

    #[test]
    fn presets() {
        let s200 = &preset("S@200", false).unwrap()[0];
        assert_eq!((s200.clients, s200.participants, s200.rounds), (200, 10, 100));
        let s10 = &preset("S@10", true).unwrap()[0];
        assert_eq!(s10.participants, s10.clients);
        assert_eq!(s10.rounds, 1000);
        let sweep = preset("jr-sweep", false).unwrap();
        let parts: Vec<usize> = sweep.iter().map(|c| c.participants).collect();
        assert_eq!(parts, vec![18, 12, 6, 2]);
        assert!(sweep.iter().all(|c| c.dataset == DatasetChoice::Ucihar));
        assert_eq!(participants_for_rate(27, 1, 9), 3);
        let err = preset("S@7", false).unwrap_err().to_string();
        assert!(err.contains("S@10") && err.contains("jr-sweep"));
    }
}
