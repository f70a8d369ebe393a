//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers, plus presets and flag overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use fedssd_core::fed::{AlgorithmMode, FederationConfig, SeedSet};

/// Raised for any malformed or invalid configuration; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type CfgResult<T> = Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        dims: usize,
        n_per_class: usize,
        separation: f64,
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PartitionSpec {
    Dirichlet { delta: f64 },
    Quantity { labels_per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub algorithm: AlgorithmMode,
    pub auxiliary_per_class: usize,
    pub output_dir: PathBuf,
    pub seed_list: Vec<u64>,
}

impl ExperimentConfig {
    pub fn federation_config(&self, master_seed: u64) -> FederationConfig {
        FederationConfig {
            clients: self.clients,
            participation: self.participation,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            hidden: self.hidden.clone(),
            algorithm: self.algorithm.clone(),
            seeds: SeedSet::from_master(master_seed),
        }
    }

    pub fn validate(&self) -> CfgResult<()> {
        let err = |msg: String| Err(ConfigError(msg));
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dims,
                n_per_class,
                test_per_class,
                ..
            } => {
                if *classes < 2 {
                    return err("dataset.classes: must be >= 2".into());
                }
                if *dims < 2 {
                    return err("dataset.dims: must be >= 2".into());
                }
                if *n_per_class == 0 || *test_per_class == 0 {
                    return err("dataset.n_per_class / test_per_class: must be positive".into());
                }
                if *n_per_class <= self.auxiliary_per_class {
                    return err(format!(
                        "dataset.n_per_class ({}) must exceed auxiliary.per_class ({})",
                        n_per_class, self.auxiliary_per_class
                    ));
                }
            }
            DatasetSpec::Idx { .. } => {}
        }
        match &self.partition {
            PartitionSpec::Dirichlet { delta } => {
                if *delta <= 0.0 {
                    return err("partition.delta: must be positive".into());
                }
            }
            PartitionSpec::Quantity { labels_per_client } => {
                if *labels_per_client == 0 {
                    return err("partition.labels_per_client: must be positive".into());
                }
            }
        }
        if self.clients == 0 {
            return err("federation.clients: must be positive".into());
        }
        if !(0.0 < self.participation && self.participation <= 1.0) {
            return err("federation.participation: must be in (0, 1]".into());
        }
        if self.rounds == 0 {
            return err("federation.rounds: must be positive".into());
        }
        if self.local_epochs == 0 {
            return err("federation.local_epochs: must be positive".into());
        }
        if self.batch_size == 0 {
            return err("federation.batch_size: must be positive".into());
        }
        if self.learning_rate <= 0.0 {
            return err("federation.learning_rate: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("federation.momentum: must be in [0, 1)".into());
        }
        if self.hidden.contains(&0) {
            return err("federation.hidden: widths must be positive".into());
        }
        match &self.algorithm {
            AlgorithmMode::Ssd { m_max } if *m_max < 0.0 => {
                return err("algorithm.m_max: must be non-negative".into());
            }
            AlgorithmMode::Kl { alpha, tau } => {
                if *alpha < 0.0 {
                    return err("algorithm.alpha: must be non-negative".into());
                }
                if *tau <= 0.0 {
                    return err("algorithm.tau: must be positive".into());
                }
            }
            AlgorithmMode::Mse { alpha } if *alpha < 0.0 => {
                return err("algorithm.alpha: must be non-negative".into());
            }
            AlgorithmMode::Prox { mu } if *mu < 0.0 => {
                return err("algorithm.mu: must be non-negative".into());
            }
            _ => {}
        }
        if self.seed_list.is_empty() {
            return err("output.seeds: need at least one seed".into());
        }
        Ok(())
    }
}

/// Flag-level overrides; each `Some` wins over the file value.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub algo: Option<String>,
    pub m_max: Option<f64>,
    pub mu: Option<f64>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub rounds: Option<usize>,
    pub out: Option<PathBuf>,
}

struct RawConfig {
    entries: Vec<(String, String, String)>, // (section, key, value)
}

impl RawConfig {
    fn parse(text: &str) -> CfgResult<Self> {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    ConfigError(format!("line {}: unterminated section header", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            if section.is_empty() {
                return Err(ConfigError(format!(
                    "line {}: key `{}` appears before any [section]",
                    lineno + 1,
                    key.trim()
                )));
            }
            entries.push((
                section.clone(),
                key.trim().to_string(),
                value.trim().to_string(),
            ));
        }
        Ok(RawConfig { entries })
    }

    fn take(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(s, k, _)| s == section && k == key)
            .map(|(_, _, v)| v.as_str())
    }
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> CfgResult<T> {
    value.parse().map_err(|_| {
        ConfigError(format!(
            "{section}.{key}: cannot parse `{value}` as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> CfgResult<Vec<T>> {
    value
        .split(',')
        .map(|s| parse_value(section, key, s.trim()))
        .collect()
}

const KNOWN_KEYS: &[(&str, &str)] = &[
    ("dataset", "kind"),
    ("dataset", "classes"),
    ("dataset", "dims"),
    ("dataset", "n_per_class"),
    ("dataset", "separation"),
    ("dataset", "test_per_class"),
    ("dataset", "train_images"),
    ("dataset", "train_labels"),
    ("dataset", "test_images"),
    ("dataset", "test_labels"),
    ("partition", "strategy"),
    ("partition", "delta"),
    ("partition", "labels_per_client"),
    ("federation", "clients"),
    ("federation", "participation"),
    ("federation", "rounds"),
    ("federation", "local_epochs"),
    ("federation", "batch_size"),
    ("federation", "learning_rate"),
    ("federation", "momentum"),
    ("federation", "hidden"),
    ("algorithm", "mode"),
    ("algorithm", "m_max"),
    ("algorithm", "mu"),
    ("algorithm", "alpha"),
    ("algorithm", "tau"),
    ("auxiliary", "per_class"),
    ("output", "dir"),
    ("output", "seeds"),
];

pub fn algorithm_from_parts(
    mode: &str,
    m_max: f64,
    mu: f64,
    alpha: f64,
    tau: f64,
) -> CfgResult<AlgorithmMode> {
    match mode {
        "fedavg" => Ok(AlgorithmMode::FedAvg),
        "ssd" => Ok(AlgorithmMode::Ssd { m_max }),
        "fedprox" => Ok(AlgorithmMode::Prox { mu }),
        "kl" => Ok(AlgorithmMode::Kl { alpha, tau }),
        "mse" => Ok(AlgorithmMode::Mse { alpha }),
        other => Err(ConfigError(format!(
            "algorithm.mode: unknown mode `{other}` (expected fedavg|fedprox|kl|mse|ssd)"
        ))),
    }
}

/// Parses the config text and applies flag overrides. Unknown keys are
/// rejected; missing required keys are reported together.
pub fn parse_config(text: &str, overrides: &Overrides) -> CfgResult<ExperimentConfig> {
    let raw = RawConfig::parse(text)?;

    let known: BTreeSet<(&str, &str)> = KNOWN_KEYS.iter().copied().collect();
    for (section, key, _) in &raw.entries {
        if !known.contains(&(section.as_str(), key.as_str())) {
            return Err(ConfigError(format!("unknown key `{section}.{key}`")));
        }
    }

    let mut missing = Vec::new();
    let kind = raw.take("dataset", "kind");
    if kind.is_none() {
        missing.push("dataset.kind (synthetic|idx)");
    }
    let out_dir = overrides
        .out
        .clone()
        .or_else(|| raw.take("output", "dir").map(PathBuf::from));
    if out_dir.is_none() {
        missing.push("output.dir (or --out)");
    }
    if !missing.is_empty() {
        return Err(ConfigError(format!(
            "missing required keys: {}",
            missing.join(", ")
        )));
    }

    let dataset = match kind.unwrap() {
        "synthetic" => DatasetSpec::Synthetic {
            classes: match raw.take("dataset", "classes") {
                Some(v) => parse_value("dataset", "classes", v)?,
                None => 10,
            },
            dims: match raw.take("dataset", "dims") {
                Some(v) => parse_value("dataset", "dims", v)?,
                None => 20,
            },
            n_per_class: match raw.take("dataset", "n_per_class") {
                Some(v) => parse_value("dataset", "n_per_class", v)?,
                None => 150,
            },
            separation: match raw.take("dataset", "separation") {
                Some(v) => parse_value("dataset", "separation", v)?,
                None => 3.0,
            },
            test_per_class: match raw.take("dataset", "test_per_class") {
                Some(v) => parse_value("dataset", "test_per_class", v)?,
                None => 50,
            },
        },
        "idx" => {
            let mut need = Vec::new();
            for key in ["train_images", "train_labels", "test_images", "test_labels"] {
                if raw.take("dataset", key).is_none() {
                    need.push(format!("dataset.{key}"));
                }
            }
            if !need.is_empty() {
                return Err(ConfigError(format!(
                    "missing required keys: {}",
                    need.join(", ")
                )));
            }
            DatasetSpec::Idx {
                train_images: PathBuf::from(raw.take("dataset", "train_images").unwrap()),
                train_labels: PathBuf::from(raw.take("dataset", "train_labels").unwrap()),
                test_images: PathBuf::from(raw.take("dataset", "test_images").unwrap()),
                test_labels: PathBuf::from(raw.take("dataset", "test_labels").unwrap()),
            }
        }
        other => {
            return Err(ConfigError(format!(
                "dataset.kind: unknown kind `{other}` (expected synthetic|idx)"
            )));
        }
    };

    let partition = match raw.take("partition", "strategy").unwrap_or("dirichlet") {
        "dirichlet" => PartitionSpec::Dirichlet {
            delta: match raw.take("partition", "delta") {
                Some(v) => parse_value("partition", "delta", v)?,
                None => 0.5,
            },
        },
        "quantity" => PartitionSpec::Quantity {
            labels_per_client: match raw.take("partition", "labels_per_client") {
                Some(v) => parse_value("partition", "labels_per_client", v)?,
                None => 2,
            },
        },
        other => {
            return Err(ConfigError(format!(
                "partition.strategy: unknown strategy `{other}` (expected dirichlet|quantity)"
            )));
        }
    };

    let mode = overrides
        .algo
        .clone()
        .or_else(|| raw.take("algorithm", "mode").map(str::to_string))
        .unwrap_or_else(|| "fedavg".to_string());
    let m_max = match overrides.m_max {
        Some(v) => v,
        None => match raw.take("algorithm", "m_max") {
            Some(v) => parse_value("algorithm", "m_max", v)?,
            None => 0.01,
        },
    };
    let mu = match overrides.mu {
        Some(v) => v,
        None => match raw.take("algorithm", "mu") {
            Some(v) => parse_value("algorithm", "mu", v)?,
            None => 0.01,
        },
    };
    let alpha = match overrides.alpha {
        Some(v) => v,
        None => match raw.take("algorithm", "alpha") {
            Some(v) => parse_value("algorithm", "alpha", v)?,
            None => 1.0,
        },
    };
    let tau = match overrides.tau {
        Some(v) => v,
        None => match raw.take("algorithm", "tau") {
            Some(v) => parse_value("algorithm", "tau", v)?,
            None => 1.0,
        },
    };
    let algorithm = algorithm_from_parts(&mode, m_max, mu, alpha, tau)?;

    let config = ExperimentConfig {
        dataset,
        partition,
        clients: match raw.take("federation", "clients") {
            Some(v) => parse_value("federation", "clients", v)?,
            None => 10,
        },
        participation: match raw.take("federation", "participation") {
            Some(v) => parse_value("federation", "participation", v)?,
            None => 1.0,
        },
        rounds: match overrides.rounds {
            Some(v) => v,
            None => match raw.take("federation", "rounds") {
                Some(v) => parse_value("federation", "rounds", v)?,
                None => 30,
            },
        },
        local_epochs: match raw.take("federation", "local_epochs") {
            Some(v) => parse_value("federation", "local_epochs", v)?,
            None => 10,
        },
        batch_size: match raw.take("federation", "batch_size") {
            Some(v) => parse_value("federation", "batch_size", v)?,
            None => 64,
        },
        learning_rate: match raw.take("federation", "learning_rate") {
            Some(v) => parse_value("federation", "learning_rate", v)?,
            None => 0.01,
        },
        momentum: match raw.take("federation", "momentum") {
            Some(v) => parse_value("federation", "momentum", v)?,
            None => 0.9,
        },
        hidden: match raw.take("federation", "hidden") {
            Some(v) => parse_list("federation", "hidden", v)?,
            None => vec![64, 32],
        },
        algorithm,
        auxiliary_per_class: match raw.take("auxiliary", "per_class") {
            Some(v) => parse_value("auxiliary", "per_class", v)?,
            None => 64,
        },
        output_dir: out_dir.unwrap(),
        seed_list: match &overrides.seeds {
            Some(s) => s.clone(),
            None => match raw.take("output", "seeds") {
                Some(v) => parse_list("output", "seeds", v)?,
                None => vec![1],
            },
        },
    };
    config.validate()?;
    Ok(config)
}

/// Toy-scale preset recipes. Synthetic Gaussian data stands in for the
/// image benchmarks; the `toy-` prefix marks that these demonstrate the
/// qualitative behavior, not image-benchmark accuracy numbers.
pub fn preset(name: &str) -> CfgResult<&'static str> {
    match name {
        // Mild skew, full participation: N=10, C=1, E=10, b=64,
        // lr=0.01, momentum=0.9, Dir(0.5).
        "toy-default" => Ok("\
[dataset]
kind = synthetic
classes = 10
dims = 20
n_per_class = 150
separation = 3.0

[partition]
strategy = dirichlet
delta = 0.5

[federation]
clients = 10
participation = 1.0
rounds = 30
local_epochs = 10
batch_size = 64
learning_rate = 0.01
momentum = 0.9

[algorithm]
mode = fedavg

[auxiliary]
per_class = 64
"),
        // Heavier skew to surface the forgetting gap.
        "toy-forgetting" => Ok("\
[dataset]
kind = synthetic
classes = 10
dims = 20
n_per_class = 150
separation = 3.0

[partition]
strategy = dirichlet
delta = 0.1

[federation]
clients = 10
participation = 0.3
rounds = 30
local_epochs = 10
batch_size = 64
learning_rate = 0.05
momentum = 0.9

[algorithm]
mode = fedavg

[auxiliary]
per_class = 64
"),
        // Base for the three-way fedavg / fedprox / ssd comparison.
        "toy-comparison" => Ok("\
[dataset]
kind = synthetic
classes = 10
dims = 20
n_per_class = 150
separation = 3.0

[partition]
strategy = dirichlet
delta = 0.1

[federation]
clients = 10
participation = 0.3
rounds = 30
local_epochs = 10
batch_size = 64
learning_rate = 0.05
momentum = 0.9

[algorithm]
mode = fedavg
m_max = 0.1
mu = 0.01

[auxiliary]
per_class = 64
"),
        other => Err(ConfigError(format!(
            "unknown preset `{other}` (expected toy-default|toy-forgetting|toy-comparison)"
        ))),
    }
}
