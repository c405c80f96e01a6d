//! Experiment configuration in flat `key=value` form.
//!
//! Sections are dotted prefixes (`attack.kind=LMA`). Blank lines and lines
//! starting with `#` are ignored. Every key has a default; [`KEYS`] lists
//! them all.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::{AttackKind, AttackSpec, SimilaritySource};
use crate::data::SplitPlan;
use crate::defences::{DefenceKind, DefenceSpec};
use crate::model::{Activation, Architecture, LossKind, LrDecay, TrainSchedule};
use crate::rng;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`")]
    Syntax { line: usize },
    #[error("unknown key `{key}`")]
    UnknownKey { key: String },
    #[error("key `{key}` given twice")]
    DuplicateKey { key: String },
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fd,
    Fedavg,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Fd => "fd",
            Branch::Fedavg => "fedavg",
        }
    }
}

/// Whether client learning rates decay over the whole run or restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientDecay {
    /// Linear to zero across `rounds * epochs` epochs, never restarting.
    Global,
    /// Linear to zero within each round.
    Round,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl ScheduleConfig {
    pub fn schedule(&self, decay: LrDecay) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Blobs { classes: usize, dim: usize, per_class: usize, spread: f64 },
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub private: f64,
    pub public: f64,
    pub validation: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub branch: Branch,
    pub clients: usize,
    pub alpha: f64,
    pub rounds: usize,
    pub seed: u64,
    /// Seeds a sweep repeats every run with; `seed` is ignored there.
    pub seeds: Vec<u64>,
    /// Send the server model to the clients at the start of each FD round.
    pub broadcast: bool,
    /// Loss used for client training and server distillation.
    pub loss: LossKind,
    /// `attack.seed` salts the attack stream; the stream itself also
    /// depends on `seed`.
    pub attack: AttackSpec,
    pub defence: DefenceSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub client: ScheduleConfig,
    pub client_decay: ClientDecay,
    pub server: ScheduleConfig,
    pub data: DataSource,
    pub split: SplitFractions,
}

/// Every key with its default value, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("branch", "fd"),
    ("clients", "20"),
    ("alpha", "0.45"),
    ("rounds", "10"),
    ("seed", "1"),
    ("seeds", "1"),
    ("broadcast", "true"),
    ("loss", "CEL"),
    ("attack.kind", "LMA"),
    ("attack.loss", "CEL"),
    ("attack.similarity", ""),
    ("attack.noise_scale", ""),
    ("attack.seed", "0"),
    ("defence.kind", "FILTER_SCORE"),
    ("defence.expguard", "true"),
    ("defence.scale", "min_max"),
    ("model.hidden", "32"),
    ("model.activation", "tanh"),
    ("client.epochs", "3"),
    ("client.batch_size", "16"),
    ("client.lr", "0.05"),
    ("client.momentum", "0.9"),
    ("client.weight_decay", "0.0005"),
    ("client.decay", "global"),
    ("server.epochs", "60"),
    ("server.batch_size", "32"),
    ("server.lr", "0.05"),
    ("server.momentum", "0.9"),
    ("server.weight_decay", "0.0005"),
    ("data.source", "blobs"),
    ("data.classes", "5"),
    ("data.dim", "20"),
    ("data.per_class", "2000"),
    ("data.spread", "0.4"),
    ("split.private", "0.5"),
    ("split.public", "0.25"),
    ("split.validation", "0.05"),
    ("split.test", "0.2"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_enum<T>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T, ConfigError>
where
    T: Copy,
{
    options
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(value.trim()))
        .map(|(_, v)| *v)
        .ok_or_else(|| ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: format!("expected one of {}", options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")),
        })
}

const LOSSES: &[(&str, LossKind)] = &[("CEL", LossKind::Cel), ("MSE", LossKind::Mse)];

fn loss_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Cel => "CEL",
        LossKind::Mse => "MSE",
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut config = Self {
            branch: Branch::Fd,
            clients: 0,
            alpha: 0.0,
            rounds: 0,
            seed: 0,
            seeds: Vec::new(),
            broadcast: true,
            loss: LossKind::Cel,
            attack: AttackSpec::none(),
            defence: DefenceSpec::plain(DefenceKind::Mean),
            hidden: Vec::new(),
            activation: Activation::Tanh,
            client: ScheduleConfig { epochs: 0, batch_size: 0, lr: 0.0, momentum: 0.0, weight_decay: 0.0 },
            client_decay: ClientDecay::Global,
            server: ScheduleConfig { epochs: 0, batch_size: 0, lr: 0.0, momentum: 0.0, weight_decay: 0.0 },
            data: DataSource::Blobs { classes: 0, dim: 0, per_class: 0, spread: 0.0 },
            split: SplitFractions { private: 0.0, public: 0.0, validation: 0.0, test: 0.0 },
        };
        for (key, value) in KEYS {
            config.set(key, value).expect("defaults parse");
        }
        config
    }
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "branch" => self.branch = parse_enum(key, v, &[("fd", Branch::Fd), ("fedavg", Branch::Fedavg)])?,
            "clients" => self.clients = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "rounds" => self.rounds = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "broadcast" => self.broadcast = parse_value(key, v)?,
            "loss" => self.loss = parse_enum(key, v, LOSSES)?,
            "attack.kind" => {
                self.attack.kind = v.parse().map_err(|reason| ConfigError::InvalidValue {
                    key: key.into(),
                    value: v.into(),
                    reason,
                })?
            }
            "attack.loss" if v.is_empty() => self.attack.loss = None,
            "attack.loss" => self.attack.loss = Some(parse_enum(key, v, LOSSES)?),
            "attack.similarity" => {
                self.attack.similarity = match v {
                    "" => None,
                    s if s.eq_ignore_ascii_case("pretrained") => Some(SimilaritySource::Pretrained),
                    path => Some(SimilaritySource::File(path.into())),
                }
            }
            "attack.noise_scale" if v.is_empty() => self.attack.noise_scale = None,
            "attack.noise_scale" => self.attack.noise_scale = Some(parse_value(key, v)?),
            "attack.seed" => self.attack.seed = parse_value(key, v)?,
            "defence.kind" => {
                self.defence.kind = v.parse().map_err(|reason| ConfigError::InvalidValue {
                    key: key.into(),
                    value: v.into(),
                    reason,
                })?
            }
            "defence.expguard" => self.defence.expguard = parse_value(key, v)?,
            "defence.scale" => {
                self.defence.scale = v.parse().map_err(|reason| ConfigError::InvalidValue {
                    key: key.into(),
                    value: v.into(),
                    reason,
                })?
            }
            "model.hidden" => self.hidden = parse_list(key, v)?,
            "model.activation" => {
                self.activation = parse_enum(key, v, &[("tanh", Activation::Tanh), ("relu", Activation::Relu)])?
            }
            "client.epochs" => self.client.epochs = parse_value(key, v)?,
            "client.batch_size" => self.client.batch_size = parse_value(key, v)?,
            "client.lr" => self.client.lr = parse_value(key, v)?,
            "client.momentum" => self.client.momentum = parse_value(key, v)?,
            "client.weight_decay" => self.client.weight_decay = parse_value(key, v)?,
            "client.decay" => {
                self.client_decay = parse_enum(key, v, &[("global", ClientDecay::Global), ("round", ClientDecay::Round)])?
            }
            "server.epochs" => self.server.epochs = parse_value(key, v)?,
            "server.batch_size" => self.server.batch_size = parse_value(key, v)?,
            "server.lr" => self.server.lr = parse_value(key, v)?,
            "server.momentum" => self.server.momentum = parse_value(key, v)?,
            "server.weight_decay" => self.server.weight_decay = parse_value(key, v)?,
            "data.source" => {
                self.data = match v {
                    s if s.eq_ignore_ascii_case("blobs") => match &self.data {
                        DataSource::Blobs { .. } => return Ok(()),
                        DataSource::File(_) => DataSource::Blobs { classes: 5, dim: 20, per_class: 500, spread: 0.35 },
                    },
                    "" => {
                        return Err(ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected `blobs` or a dataset path".into(),
                        })
                    }
                    path => DataSource::File(path.into()),
                }
            }
            "data.classes" | "data.dim" | "data.per_class" | "data.spread" => {
                let DataSource::Blobs { classes, dim, per_class, spread } = &mut self.data else {
                    return Err(ConfigError::Invalid(format!("`{key}` only applies to data.source=blobs")));
                };
                match key {
                    "data.classes" => *classes = parse_value(key, v)?,
                    "data.dim" => *dim = parse_value(key, v)?,
                    "data.per_class" => *per_class = parse_value(key, v)?,
                    _ => *spread = parse_value(key, v)?,
                }
            }
            "split.private" => self.split.private = parse_value(key, v)?,
            "split.public" => self.split.public = parse_value(key, v)?,
            "split.validation" => self.split.validation = parse_value(key, v)?,
            "split.test" => self.split.test = parse_value(key, v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Starts from the defaults, applies the file's settings and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut pending_data = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey { key: key.into() });
            }
            // blob parameters must wait for the data source
            if key.starts_with("data.") && key != "data.source" {
                if !KEYS.iter().any(|(k, _)| *k == key) {
                    return Err(ConfigError::UnknownKey { key: key.into() });
                }
                pending_data.push((key.to_string(), value.to_string()));
                continue;
            }
            config.set(key, value)?;
        }
        for (key, value) in pending_data {
            config.set(&key, &value)?;
        }
        // loss and similarity defaults only make sense for the attacks using them
        if !seen.contains("attack.loss") && !config.attack.kind.uses_loss() {
            config.attack.loss = None;
        }
        if !seen.contains("attack.noise_scale") && config.attack.kind == AttackKind::FedavgGauss {
            config.attack.noise_scale = Some(100.0);
        }
        if !seen.contains("attack.similarity") && config.attack.kind.uses_similarity() {
            config.attack.similarity = Some(SimilaritySource::Pretrained);
        }
        if seen.contains("defence.kind") && !seen.contains("defence.expguard") {
            config.defence.expguard = config.defence.kind == DefenceKind::FilterScore;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 0.5), got {}", self.alpha));
        }
        let byz = self.alpha * self.clients as f64;
        if (byz - byz.round()).abs() > 1e-9 {
            return bad(format!("alpha * clients = {byz} is not a whole number of clients"));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        self.attack.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.defence.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match (self.branch, self.attack.kind) {
            (Branch::Fd, k) if k.is_fedavg() => return bad(format!("{k} is a FedAvg attack")),
            (Branch::Fedavg, k) if !k.is_fedavg() && k != AttackKind::None => {
                return bad(format!("{k} is an FD attack"))
            }
            _ => {}
        }
        if self.branch == Branch::Fd && self.clients < self.defence.min_clients() {
            return bad(format!("{} needs at least {} clients", self.defence, self.defence.min_clients()));
        }
        for (name, s) in [("client", &self.client), ("server", &self.server)] {
            s.schedule(LrDecay::OwnEpochs)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("{name} schedule: {e}")))?;
        }
        if let DataSource::Blobs { classes, dim, per_class, spread } = self.data {
            if classes < 2 || dim < 2 || per_class == 0 || !(spread >= 0.0 && spread.is_finite()) {
                return bad("blobs need classes >= 2, dim >= 2, per_class >= 1 and spread >= 0".into());
            }
            self.architecture(dim, classes)?;
        }
        let f = self.split;
        let total = f.private + f.public + f.validation + f.test;
        if [f.private, f.public, f.validation, f.test].iter().any(|x| !(0.0..=1.0).contains(x)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must lie in [0, 1] and sum to 1, got {total}"));
        }
        Ok(())
    }

    pub fn byzantine_count(&self) -> usize {
        (self.alpha * self.clients as f64).round() as usize
    }

    pub fn architecture(&self, input_dim: usize, classes: usize) -> Result<Architecture, ConfigError> {
        Architecture::new(input_dim, self.hidden.clone(), classes, self.activation)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            clients: self.clients,
            private: self.split.private,
            public: self.split.public,
            validation: self.split.validation,
            test: self.split.test,
            seed: rng::derive_seed(&[rng::domain::SPLIT, self.seed]),
        }
    }

    /// The attack with its stream seed bound to the run seed.
    pub fn effective_attack(&self) -> AttackSpec {
        AttackSpec {
            seed: rng::derive_seed(&[rng::domain::ATTACK, self.seed, self.attack.seed]),
            ..self.attack.clone()
        }
    }

    /// All settings as `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |o: Option<String>| o.unwrap_or_default();
        let mut out: Vec<(&'static str, String)> = vec![
            ("branch", self.branch.name().into()),
            ("clients", self.clients.to_string()),
            ("alpha", self.alpha.to_string()),
            ("rounds", self.rounds.to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("broadcast", self.broadcast.to_string()),
            ("loss", loss_name(self.loss).into()),
            ("attack.kind", self.attack.kind.name().into()),
            ("attack.loss", opt(self.attack.loss.map(|l| loss_name(l).to_string()))),
            (
                "attack.similarity",
                opt(self.attack.similarity.as_ref().map(|s| match s {
                    SimilaritySource::Pretrained => "pretrained".to_string(),
                    SimilaritySource::File(p) => p.clone(),
                })),
            ),
            ("attack.noise_scale", opt(self.attack.noise_scale.map(|s| s.to_string()))),
            ("attack.seed", self.attack.seed.to_string()),
            ("defence.kind", self.defence.kind.name().into()),
            ("defence.expguard", self.defence.expguard.to_string()),
            ("defence.scale", self.defence.scale.name().into()),
            ("model.hidden", join(&self.hidden)),
            ("model.activation", match self.activation {
                Activation::Tanh => "tanh".into(),
                Activation::Relu => "relu".into(),
            }),
        ];
        for (prefix, s) in [("client", &self.client), ("server", &self.server)] {
            let keys: [&'static str; 5] = if prefix == "client" {
                ["client.epochs", "client.batch_size", "client.lr", "client.momentum", "client.weight_decay"]
            } else {
                ["server.epochs", "server.batch_size", "server.lr", "server.momentum", "server.weight_decay"]
            };
            out.push((keys[0], s.epochs.to_string()));
            out.push((keys[1], s.batch_size.to_string()));
            out.push((keys[2], s.lr.to_string()));
            out.push((keys[3], s.momentum.to_string()));
            out.push((keys[4], s.weight_decay.to_string()));
            if prefix == "client" {
                out.push((
                    "client.decay",
                    match self.client_decay {
                        ClientDecay::Global => "global".into(),
                        ClientDecay::Round => "round".into(),
                    },
                ));
            }
        }
        match &self.data {
            DataSource::Blobs { classes, dim, per_class, spread } => {
                out.push(("data.source", "blobs".into()));
                out.push(("data.classes", classes.to_string()));
                out.push(("data.dim", dim.to_string()));
                out.push(("data.per_class", per_class.to_string()));
                out.push(("data.spread", spread.to_string()));
            }
            DataSource::File(path) => out.push(("data.source", path.clone())),
        }
        out.push(("split.private", self.split.private.to_string()));
        out.push(("split.public", self.split.public.to_string()));
        out.push(("split.validation", self.split.validation.to_string()));
        out.push(("split.test", self.split.test.to_string()));
        out
    }

    /// Canonical text; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    /// SHA-256 of the canonical text, in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                write!(s, "{b:02x}").unwrap();
                s
            })
    }
}
