//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # four-task addition
//! seed = 0
//! tasks = moons, blobs, rings, xor-grid
//! network.layer_dims = 8, 32, 32, 2
//! run.iterations = 4
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! at most once; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dvmerge::dvbasi::RunConfig;
use dvmerge::objectives::ObjectiveKind;
use dvmerge::refnet::{Activation, MlpSpec, TaskKind, TaskSpace, TrainHyper};

/// Seed offsets for each consumer of the root seed. Fine-tuning and data
/// generation add the task index on top.
pub const DATA_SEED_OFFSET: u64 = 1000;
pub const FINETUNE_SEED_OFFSET: u64 = 2000;
pub const RUN_SEED_OFFSET: u64 = 3000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source, l, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

const KEYS: &[&str] = &[
    "seed",
    "output.dir",
    "tasks",
    "data.input_dim",
    "data.background",
    "network.layer_dims",
    "network.activation",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.learning_rate",
    "merge.method",
    "run.iterations",
    "run.max_epochs",
    "run.patience",
    "run.alpha0",
    "run.objective",
    "run.batch_size",
    "run.learning_rate",
    "negation.target",
    "negation.control",
    "tta.target",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub tasks: Vec<TaskKind>,
    pub space: TaskSpace,
    pub network: MlpSpec,
    pub finetune: TrainHyper,
    pub run: RunConfig,
    pub negation_target: Option<String>,
    pub negation_control: Option<String>,
    pub tta_target: Option<String>,
}

struct Entries {
    source: String,
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn err(&self, line: Option<usize>, message: impl Into<String>) -> ConfigError {
        ConfigError {
            source: self.source.clone(),
            line,
            message: message.into(),
        }
    }

    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn required(&self, key: &str) -> Result<(usize, &str), ConfigError> {
        self.raw(key)
            .ok_or_else(|| self.err(None, format!("missing required key `{key}`")))
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|e| self.err(Some(line), format!("bad value for `{key}`: {e}"))),
        }
    }

    fn list<T: FromStr>(&self, line: usize, key: &str, v: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| self.err(Some(line), format!("bad entry `{}` in `{key}`: {e}", s.trim())))
            })
            .collect()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: path.display().to_string(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text`; `source` names it in diagnostics.
    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let mut e = Entries {
            source: source.to_string(),
            map: BTreeMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(e.err(Some(line), format!("expected `key = value`, got `{trimmed}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(e.err(Some(line), format!("unknown key `{k}`")));
            }
            if v.is_empty() {
                return Err(e.err(Some(line), format!("empty value for `{k}`")));
            }
            if let Some((first, _)) = e.map.get(k) {
                return Err(e.err(Some(line), format!("duplicate key `{k}` (first set on line {first})")));
            }
            e.map.insert(k.to_string(), (line, v.to_string()));
        }

        let (line, tasks) = e.required("tasks")?;
        let tasks: Vec<TaskKind> = e.list(line, "tasks", tasks)?;
        let mut ids: Vec<String> = tasks.iter().map(ToString::to_string).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(e.err(Some(line), "task list contains duplicates"));
        }

        let (line, dims) = e.required("network.layer_dims")?;
        let dims: Vec<usize> = e.list(line, "network.layer_dims", dims)?;
        let activation: Activation = e.parse("network.activation", Activation::Tanh)?;
        let network = MlpSpec::new(dims, activation).map_err(|err| e.err(Some(line), err.to_string()))?;

        let space = TaskSpace {
            input_dim: e.parse("data.input_dim", TaskSpace::default().input_dim)?,
            background: e.parse("data.background", TaskSpace::default().background)?,
        };
        if network.input_dim() != space.input_dim {
            return Err(e.err(
                Some(line),
                format!(
                    "network input width {} differs from data.input_dim {}",
                    network.input_dim(),
                    space.input_dim
                ),
            ));
        }
        if network.classes() != 2 {
            return Err(e.err(Some(line), "synthetic tasks have 2 classes; the last layer width must be 2"));
        }

        if let Some((line, m)) = e.raw("merge.method") {
            if m != "task_arithmetic" {
                return Err(e.err(Some(line), format!("unsupported merge.method `{m}` (only task_arithmetic)")));
            }
        }

        let th = TrainHyper::default();
        let finetune = TrainHyper {
            epochs: e.parse("finetune.epochs", th.epochs)?,
            batch_size: e.parse("finetune.batch_size", th.batch_size)?,
            learning_rate: e.parse("finetune.learning_rate", th.learning_rate)?,
            seed: 0,
            record_history: false,
        };
        let rc = RunConfig::default();
        let objective: ObjectiveKind = e.parse("run.objective", rc.objective.clone())?;
        let run = RunConfig {
            iterations: e.parse("run.iterations", rc.iterations)?,
            max_epochs: e.parse("run.max_epochs", rc.max_epochs)?,
            patience: e.parse("run.patience", rc.patience)?,
            alpha0: e.parse("run.alpha0", rc.alpha0)?,
            objective,
            seed: 0,
            batch_size: e.parse("run.batch_size", rc.batch_size)?,
            learning_rate: e.parse("run.learning_rate", rc.learning_rate)?,
            threads: 1,
        };
        run.validate().map_err(|err| e.err(None, err.to_string()))?;

        let cfg = Self {
            seed: e.parse("seed", 0)?,
            output_dir: e.parse("output.dir", PathBuf::from("out"))?,
            tasks,
            space,
            network,
            finetune,
            run,
            negation_target: e.raw("negation.target").map(|(_, v)| v.to_string()),
            negation_control: e.raw("negation.control").map(|(_, v)| v.to_string()),
            tta_target: e.raw("tta.target").map(|(_, v)| v.to_string()),
        };
        for key in ["negation.target", "negation.control", "tta.target"] {
            if let Some((line, v)) = e.raw(key) {
                if !cfg.task_ids().iter().any(|t| t == v) {
                    return Err(e.err(Some(line), format!("`{key}` names unknown task `{v}`")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(ToString::to_string).collect()
    }

    pub fn data_seed(&self, task_index: usize) -> u64 {
        self.seed.wrapping_add(DATA_SEED_OFFSET + task_index as u64)
    }

    pub fn init_seed(&self) -> u64 {
        self.seed
    }

    pub fn finetune_hyper(&self, task_index: usize) -> TrainHyper {
        TrainHyper {
            seed: self.seed.wrapping_add(FINETUNE_SEED_OFFSET + task_index as u64),
            ..self.finetune
        }
    }

    pub fn run_config(&self, threads: usize) -> RunConfig {
        RunConfig {
            seed: self.seed.wrapping_add(RUN_SEED_OFFSET),
            threads,
            ..self.run.clone()
        }
    }
}
