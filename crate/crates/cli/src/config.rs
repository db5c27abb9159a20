//! Flat `key = value` run configuration shared by the config file and flags.

use std::fmt;
use std::path::{Path, PathBuf};

use cortigraph::synthgen::GenConfig;
use cortigraph::train::{LrSchedule, OptimizerKind, TrainConfig};
use cortigraph::VERSION;

#[derive(Debug, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Every accepted key with its help text. `preset` is applied before all
/// other keys regardless of where it appears.
pub const KEYS: &[(&str, &str)] = &[
    (
        "preset",
        "generator preset: full (1162 nodes, 121 subjects) or desk (128 nodes, 40 subjects)",
    ),
    (
        "seed",
        "master seed for generation, splitting, initialisation and shuffling",
    ),
    ("nodes", "target node count per graph"),
    (
        "vertices_per_node",
        "surface vertices aggregated into each node",
    ),
    ("n_ad", "number of AD subjects"),
    ("n_nc", "number of NC subjects"),
    ("sigma_t", "edge kernel width in mm"),
    (
        "thinning_factor",
        "thickness multiplier in affected AD regions (1 disables the signal)",
    ),
    (
        "affected_fraction",
        "fraction of regions thinned in AD subjects",
    ),
    ("n_regions", "number of contiguous cortical regions"),
    ("mean_thickness", "population mean thickness in mm"),
    ("subject_sd", "between-subject thickness sd"),
    ("region_sd", "between-region thickness sd"),
    ("vertex_sd", "per-vertex thickness noise sd"),
    ("epochs", "training epochs"),
    ("lr", "base learning rate"),
    ("lr_gamma", "learning-rate decay factor"),
    (
        "lr_step",
        "epochs between decays (0 keeps the rate constant)",
    ),
    ("optimizer", "adam or sgd"),
    ("batch_size", "graphs per optimizer step"),
    ("val_fraction", "held-out fraction of each class"),
    ("batchnorm", "true or false"),
    ("lambda_lp", "weight of the link-prediction auxiliary loss"),
    (
        "lambda_e",
        "weight of the assignment-entropy auxiliary loss",
    ),
    ("activation", "sigmoid or relu"),
    ("aggregator", "weighted or mean"),
    ("hidden", "hidden width of graph layers"),
    (
        "fc_hidden",
        "hidden width of the first fully connected layer",
    ),
    ("out_dir", "output directory (gen, train)"),
    ("dataset_dir", "dataset directory (train, eval)"),
    ("checkpoint", "checkpoint file (eval, predict)"),
    ("graph", "graph file (predict)"),
    ("eval_csv", "optional CSV written by eval"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub lr_gamma: f64,
    /// 0 keeps the learning rate constant.
    pub lr_step: usize,
    pub out_dir: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::with_preset(Preset::Full)
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("invalid value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError(format!(
            "invalid value for {key}: {value:?} (expected true or false)"
        ))),
    }
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            ConfigError(format!(
                "line {}: expected key = value, got {raw:?}",
                no + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let gen = match preset {
            Preset::Full => GenConfig::default(),
            Preset::Desk => GenConfig::desk(),
        };
        RunConfig {
            preset,
            seed: 0,
            gen,
            train: TrainConfig::default(),
            lr_gamma: 0.5,
            lr_step: 50,
            out_dir: None,
            dataset_dir: None,
            checkpoint: None,
            graph: None,
            eval_csv: None,
        }
    }

    /// Applies `pairs` in order, with any `preset` taking effect first.
    /// Later pairs override earlier ones.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        for (k, _) in pairs {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(ConfigError(format!("unknown config key {k:?}")));
            }
        }
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            None => Preset::Full,
            Some((_, v)) => match v.as_str() {
                "full" => Preset::Full,
                "desk" => Preset::Desk,
                other => return Err(ConfigError(format!("unknown preset {other:?}"))),
            },
        };
        let mut cfg = RunConfig::with_preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            ..self.gen.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let schedule = if self.lr_step == 0 {
            LrSchedule::Constant
        } else {
            LrSchedule::Step {
                gamma: self.lr_gamma,
                every: self.lr_step,
            }
        };
        TrainConfig {
            seed: self.seed,
            schedule,
            ..self.train.clone()
        }
    }

    /// Value of `key` in the same textual form accepted by [`RunConfig::from_pairs`].
    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.gen;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key {
            "preset" => self.preset.name().to_string(),
            "seed" => self.seed.to_string(),
            "nodes" => g.nodes_target.to_string(),
            "vertices_per_node" => g.vertices_per_node.to_string(),
            "n_ad" => g.n_ad.to_string(),
            "n_nc" => g.n_nc.to_string(),
            "sigma_t" => g.sigma_t.to_string(),
            "thinning_factor" => g.thinning_factor.to_string(),
            "affected_fraction" => g.affected_fraction.to_string(),
            "n_regions" => g.n_regions.to_string(),
            "mean_thickness" => g.mean_thickness.to_string(),
            "subject_sd" => g.subject_sd.to_string(),
            "region_sd" => g.region_sd.to_string(),
            "vertex_sd" => g.vertex_sd.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr" => t.learning_rate.to_string(),
            "lr_gamma" => self.lr_gamma.to_string(),
            "lr_step" => self.lr_step.to_string(),
            "optimizer" => match t.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam { .. } => "adam".into(),
            },
            "batch_size" => t.batch_size.to_string(),
            "val_fraction" => t.val_fraction.to_string(),
            "batchnorm" => t.use_batchnorm.to_string(),
            "lambda_lp" => t.lambda_lp.to_string(),
            "lambda_e" => t.lambda_e.to_string(),
            "activation" => t.activation.name().to_string(),
            "aggregator" => t.aggregator.name().to_string(),
            "hidden" => t.hidden.to_string(),
            "fc_hidden" => t.fc_hidden.to_string(),
            "out_dir" => path(&self.out_dir)?,
            "dataset_dir" => path(&self.dataset_dir)?,
            "checkpoint" => path(&self.checkpoint)?,
            "graph" => path(&self.graph)?,
            "eval_csv" => path(&self.eval_csv)?,
            _ => return None,
        })
    }

    /// Full config echo, loadable with `--config`. Floats use Rust's
    /// shortest round-trip formatting, so reloading is exact.
    pub fn to_text(&self) -> String {
        let mut out = format!("# cortigraph {VERSION} run manifest\n");
        for (key, _) in KEYS {
            if let Some(v) = self.get(key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    pub fn require<'a>(
        &self,
        path: &'a Option<PathBuf>,
        key: &str,
    ) -> Result<&'a Path, ConfigError> {
        path.as_deref().ok_or_else(|| {
            ConfigError(format!(
                "missing required setting {key} (use --{key} or the config file)"
            ))
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let g = &mut self.gen;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "nodes" => g.nodes_target = parse(key, v)?,
            "vertices_per_node" => g.vertices_per_node = parse(key, v)?,
            "n_ad" => g.n_ad = parse(key, v)?,
            "n_nc" => g.n_nc = parse(key, v)?,
            "sigma_t" => g.sigma_t = parse(key, v)?,
            "thinning_factor" => g.thinning_factor = parse(key, v)?,
            "affected_fraction" => g.affected_fraction = parse(key, v)?,
            "n_regions" => g.n_regions = parse(key, v)?,
            "mean_thickness" => g.mean_thickness = parse(key, v)?,
            "subject_sd" => g.subject_sd = parse(key, v)?,
            "region_sd" => g.region_sd = parse(key, v)?,
            "vertex_sd" => g.vertex_sd = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "lr" => t.learning_rate = parse(key, v)?,
            "lr_gamma" => self.lr_gamma = parse(key, v)?,
            "lr_step" => self.lr_step = parse(key, v)?,
            "optimizer" => {
                t.optimizer = match v {
                    "adam" => OptimizerKind::adam(),
                    "sgd" => OptimizerKind::Sgd,
                    _ => {
                        return Err(ConfigError(format!(
                            "invalid value for optimizer: {v:?} (adam or sgd)"
                        )))
                    }
                }
            }
            "batch_size" => t.batch_size = parse(key, v)?,
            "val_fraction" => t.val_fraction = parse(key, v)?,
            "batchnorm" => t.use_batchnorm = parse_bool(key, v)?,
            "lambda_lp" => t.lambda_lp = parse(key, v)?,
            "lambda_e" => t.lambda_e = parse(key, v)?,
            "activation" => {
                t.activation = match v {
                    "sigmoid" | "relu" => parse(key, v)?,
                    _ => {
                        return Err(ConfigError(format!(
                            "invalid value for activation: {v:?} (sigmoid or relu)"
                        )))
                    }
                }
            }
            "aggregator" => t.aggregator = parse(key, v)?,
            "hidden" => t.hidden = parse(key, v)?,
            "fc_hidden" => t.fc_hidden = parse(key, v)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "dataset_dir" => self.dataset_dir = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "graph" => self.graph = Some(PathBuf::from(v)),
            "eval_csv" => self.eval_csv = Some(PathBuf::from(v)),
            other => return Err(ConfigError(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}
