//! Run configuration: a flat `key=value` text format with dotted keys.
//!
//! Unknown keys are rejected, as are keys that do not apply to the selected
//! environment or algorithm. The resolved configuration (all defaults filled
//! in) can be echoed back to a deterministic key-sorted text block; parsing
//! that echo reproduces the configuration exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::env::{Bitseq, BitseqConfig, Env, EnvError, Hypergrid, HypergridConfig};
use crate::nn::Loss;
use crate::numerics::derive_seed;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("duplicate key {0}")]
    Duplicate(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("key {key} does not apply when {context}")]
    Inapplicable { key: String, context: String },
    #[error("invalid value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required key {0}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    SoftDqn,
    SubTb,
}

impl Algo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::SoftDqn => "softdqn",
            Algo::SubTb => "subtb",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MentsUse {
    Off,
    Inference,
    Train,
    Both,
}

impl MentsUse {
    pub fn as_str(&self) -> &'static str {
        match self {
            MentsUse::Off => "off",
            MentsUse::Inference => "inference",
            MentsUse::Train => "train",
            MentsUse::Both => "both",
        }
    }

    pub fn at_inference(&self) -> bool {
        matches!(self, MentsUse::Inference | MentsUse::Both)
    }

    pub fn at_training(&self) -> bool {
        matches!(self, MentsUse::Train | MentsUse::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplayModeKind {
    None,
    Uniform,
    Prioritized,
}

impl ReplayModeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplayModeKind::None => "none",
            ReplayModeKind::Uniform => "uniform",
            ReplayModeKind::Prioritized => "prioritized",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    L1,
    Spearman,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::L1 => "l1",
            MetricKind::Spearman => "spearman",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvSettings {
    Hypergrid(HypergridConfig),
    Bitseq(BitseqConfig),
}

impl EnvSettings {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSettings::Hypergrid(_) => "hypergrid",
            EnvSettings::Bitseq(_) => "bitseq",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch: usize,
    pub iters: u64,
    pub lr: f64,
    pub target_period: u64,
    pub loss: Loss,
    pub explore_eps: f64,
    pub ckpt_period: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySettings {
    pub mode: ReplayModeKind,
    pub capacity: usize,
    pub alpha: f64,
    pub beta0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MentsSettings {
    pub use_mode: MentsUse,
    pub rounds: u32,
    pub eps: f64,
    pub terminal_reward_access: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub samples: usize,
    pub period: u64,
    pub test_seed: u64,
    pub ptheta_samples: usize,
    pub metric: MetricKind,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub env: EnvSettings,
    pub algo: Algo,
    pub train: TrainSettings,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub subtb_lambda: f64,
    pub replay: ReplaySettings,
    pub ments: MentsSettings,
    pub eval: EvalSettings,
    pub oracle_cap: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "env",
    "grid.dim",
    "grid.side",
    "grid.r0",
    "grid.r1",
    "grid.r2",
    "bits.n",
    "bits.k",
    "bits.modes",
    "bits.mode_seed",
    "algo",
    "train.batch",
    "train.iters",
    "train.lr",
    "train.target_period",
    "train.loss",
    "train.explore_eps",
    "train.ckpt_period",
    "net.hidden",
    "net.layers",
    "subtb.lambda",
    "replay.mode",
    "replay.capacity",
    "replay.alpha",
    "replay.beta0",
    "ments.use",
    "ments.rounds",
    "ments.eps",
    "ments.terminal_reward_access",
    "eval.samples",
    "eval.period",
    "eval.test_seed",
    "eval.ptheta_samples",
    "eval.metric",
    "oracle.cap",
];

/// Parse `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax(lineno + 1))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(ConfigError::Duplicate(key));
        }
    }
    Ok(map)
}

struct Resolver {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl Resolver {
    fn new(map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(Resolver {
            map,
            used: Default::default(),
        })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                reason: format!("cannot parse {v:?}"),
            }),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.into(),
                reason: format!("cannot parse {v:?}"),
            }),
        }
    }

    /// Every key that was set but never consulted is inapplicable.
    fn finish(self, context: &str) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !self.used.contains(key) {
                return Err(ConfigError::Inapplicable {
                    key: key.clone(),
                    context: context.to_string(),
                });
            }
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::from_map(parse_text(text)?)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut r = Resolver::new(map)?;

        let seed: u64 = r.parse("seed", 0)?;
        let out_dir = r.raw("out").map(PathBuf::from);

        let env_name = r.raw("env").ok_or(ConfigError::Missing("env".into()))?;
        let env = match env_name.as_str() {
            "hypergrid" => {
                let mut g = HypergridConfig::new(r.parse("grid.dim", 2)?, r.parse("grid.side", 8)?);
                g.r0 = r.parse("grid.r0", g.r0)?;
                g.r1 = r.parse("grid.r1", g.r1)?;
                g.r2 = r.parse("grid.r2", g.r2)?;
                EnvSettings::Hypergrid(g)
            }
            "bitseq" => EnvSettings::Bitseq(BitseqConfig::new(
                r.parse("bits.n", 16)?,
                r.parse("bits.k", 8)?,
                r.parse("bits.modes", 20)?,
                r.parse("bits.mode_seed", 0)?,
            )),
            other => {
                return Err(ConfigError::BadValue {
                    key: "env".into(),
                    reason: format!("unknown environment {other:?}"),
                })
            }
        };

        let algo = match r.raw("algo").as_deref().unwrap_or("softdqn") {
            "softdqn" => Algo::SoftDqn,
            "subtb" => Algo::SubTb,
            other => {
                return Err(ConfigError::BadValue {
                    key: "algo".into(),
                    reason: format!("unknown algorithm {other:?}"),
                })
            }
        };

        let loss = match r.raw("train.loss").as_deref().unwrap_or("mse") {
            "mse" => Loss::Mse,
            "huber" => Loss::Huber(1.0),
            other => {
                return Err(ConfigError::BadValue {
                    key: "train.loss".into(),
                    reason: format!("expected mse or huber, got {other:?}"),
                })
            }
        };
        let train = TrainSettings {
            batch: r.parse("train.batch", 16)?,
            iters: r.parse("train.iters", 1000)?,
            lr: r.parse("train.lr", 1e-3)?,
            target_period: r.parse("train.target_period", 3)?,
            loss,
            explore_eps: r.parse("train.explore_eps", 0.0)?,
            ckpt_period: r.parse("train.ckpt_period", 0)?,
        };

        let hidden_units = r.parse("net.hidden", 256)?;
        let hidden_layers = r.parse("net.layers", 2)?;
        let subtb_lambda = if algo == Algo::SubTb {
            r.parse("subtb.lambda", 0.9)?
        } else {
            0.9
        };

        let replay_mode = match r.raw("replay.mode").as_deref().unwrap_or("none") {
            "none" => ReplayModeKind::None,
            "uniform" => ReplayModeKind::Uniform,
            "prioritized" => ReplayModeKind::Prioritized,
            other => {
                return Err(ConfigError::BadValue {
                    key: "replay.mode".into(),
                    reason: format!("expected none, uniform or prioritized, got {other:?}"),
                })
            }
        };
        let replay = ReplaySettings {
            mode: replay_mode,
            capacity: r.parse("replay.capacity", 100_000)?,
            alpha: r.parse("replay.alpha", 0.5)?,
            beta0: r.parse("replay.beta0", 0.4)?,
        };

        let ments_use = match r.raw("ments.use").as_deref().unwrap_or("off") {
            "off" => MentsUse::Off,
            "inference" => MentsUse::Inference,
            "train" => MentsUse::Train,
            "both" => MentsUse::Both,
            other => {
                return Err(ConfigError::BadValue {
                    key: "ments.use".into(),
                    reason: format!("expected off, inference, train or both, got {other:?}"),
                })
            }
        };
        let ments = MentsSettings {
            use_mode: ments_use,
            rounds: r.parse("ments.rounds", 16)?,
            eps: r.parse("ments.eps", 0.01)?,
            terminal_reward_access: r.parse("ments.terminal_reward_access", false)?,
        };

        let metric = match r.raw("eval.metric").as_deref().unwrap_or("auto") {
            "auto" => match env {
                EnvSettings::Hypergrid(_) => MetricKind::L1,
                EnvSettings::Bitseq(_) => MetricKind::Spearman,
            },
            "l1" => MetricKind::L1,
            "spearman" => MetricKind::Spearman,
            other => {
                return Err(ConfigError::BadValue {
                    key: "eval.metric".into(),
                    reason: format!("expected auto, l1 or spearman, got {other:?}"),
                })
            }
        };
        let eval = EvalSettings {
            samples: r.parse("eval.samples", 200_000)?,
            period: r.parse("eval.period", 100)?,
            test_seed: r
                .parse_opt("eval.test_seed")?
                .unwrap_or_else(|| derive_seed(seed, "testset")),
            ptheta_samples: r.parse("eval.ptheta_samples", 16)?,
            metric,
        };

        let oracle_cap = r.parse("oracle.cap", 250_000)?;
        r.finish(&format!("env={} algo={}", env.name(), algo.as_str()))?;

        let cfg = RunConfig {
            seed,
            out_dir,
            env,
            algo,
            train,
            hidden_units,
            hidden_layers,
            subtb_lambda,
            replay,
            ments,
            eval,
            oracle_cap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::BadValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.train.batch < 1 {
            return bad("train.batch", "must be >= 1");
        }
        if self.train.iters < 1 {
            return bad("train.iters", "must be >= 1");
        }
        if self.train.target_period < 1 {
            return bad("train.target_period", "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.train.explore_eps) {
            return bad("train.explore_eps", "must be in [0, 1]");
        }
        if self.train.lr < 0.0 {
            return bad("train.lr", "must be >= 0");
        }
        if self.hidden_layers < 1 || self.hidden_units < 1 {
            return bad("net.layers", "network needs at least one hidden layer");
        }
        if self.ments.rounds < 1 {
            return bad("ments.rounds", "must be >= 1");
        }
        if self.ments.eps < 0.0 {
            return bad("ments.eps", "must be >= 0");
        }
        if self.replay.capacity < 1 {
            return bad("replay.capacity", "must be >= 1");
        }
        if self.replay.alpha < 0.0 {
            return bad("replay.alpha", "must be >= 0");
        }
        if !(0.0 < self.replay.beta0 && self.replay.beta0 <= 1.0) {
            return bad("replay.beta0", "must be in (0, 1]");
        }
        if self.eval.samples < 1 || self.eval.period < 1 || self.eval.ptheta_samples < 1 {
            return bad("eval.samples", "eval settings must be >= 1");
        }
        if self.algo == Algo::SubTb {
            if self.replay.mode != ReplayModeKind::None {
                return Err(ConfigError::Invalid(
                    "subtb trains on-policy; set replay.mode=none".into(),
                ));
            }
            if self.ments.use_mode != MentsUse::Off {
                return Err(ConfigError::Invalid(
                    "ments applies on top of softdqn; set ments.use=off for subtb".into(),
                ));
            }
        }
        if self.ments.use_mode.at_training() && self.replay.mode != ReplayModeKind::None {
            return Err(ConfigError::Invalid(
                "search-improved targets are computed at sampling time and cannot be replayed; \
                 use replay.mode=none with ments.use=train/both"
                    .into(),
            ));
        }
        if self.eval.metric == MetricKind::Spearman
            && matches!(self.env, EnvSettings::Hypergrid(_))
        {
            return Err(ConfigError::Invalid(
                "spearman needs the bitseq test set; hypergrid runs use eval.metric=l1".into(),
            ));
        }
        Ok(())
    }

    /// The fully resolved key set, suitable for echoing to disk and for the
    /// checkpoint config echo. Parsing the echo reproduces this config.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        if let Some(out) = &self.out_dir {
            put("out", out.display().to_string());
        }
        put("env", self.env.name().to_string());
        match &self.env {
            EnvSettings::Hypergrid(g) => {
                put("grid.dim", g.dim.to_string());
                put("grid.side", g.side.to_string());
                put("grid.r0", g.r0.to_string());
                put("grid.r1", g.r1.to_string());
                put("grid.r2", g.r2.to_string());
            }
            EnvSettings::Bitseq(b) => {
                put("bits.n", b.n.to_string());
                put("bits.k", b.k.to_string());
                put("bits.modes", b.num_modes.to_string());
                put("bits.mode_seed", b.mode_seed.to_string());
            }
        }
        put("algo", self.algo.as_str().to_string());
        put("train.batch", self.train.batch.to_string());
        put("train.iters", self.train.iters.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.target_period", self.train.target_period.to_string());
        put(
            "train.loss",
            match self.train.loss {
                Loss::Mse => "mse".to_string(),
                Loss::Huber(_) => "huber".to_string(),
            },
        );
        put("train.explore_eps", self.train.explore_eps.to_string());
        put("train.ckpt_period", self.train.ckpt_period.to_string());
        put("net.hidden", self.hidden_units.to_string());
        put("net.layers", self.hidden_layers.to_string());
        if self.algo == Algo::SubTb {
            put("subtb.lambda", self.subtb_lambda.to_string());
        }
        put("replay.mode", self.replay.mode.as_str().to_string());
        put("replay.capacity", self.replay.capacity.to_string());
        put("replay.alpha", self.replay.alpha.to_string());
        put("replay.beta0", self.replay.beta0.to_string());
        put("ments.use", self.ments.use_mode.as_str().to_string());
        put("ments.rounds", self.ments.rounds.to_string());
        put("ments.eps", self.ments.eps.to_string());
        put(
            "ments.terminal_reward_access",
            self.ments.terminal_reward_access.to_string(),
        );
        put("eval.samples", self.eval.samples.to_string());
        put("eval.period", self.eval.period.to_string());
        put("eval.test_seed", self.eval.test_seed.to_string());
        put(
            "eval.ptheta_samples",
            self.eval.ptheta_samples.to_string(),
        );
        put("eval.metric", self.eval.metric.as_str().to_string());
        put("oracle.cap", self.oracle_cap.to_string());
        m
    }

    pub fn echo_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.echo() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Construct the configured environment.
    pub fn build_env(&self) -> Result<std::sync::Arc<dyn Env>, EnvError> {
        Ok(match &self.env {
            EnvSettings::Hypergrid(g) => std::sync::Arc::new(Hypergrid::new(g.clone())?),
            EnvSettings::Bitseq(b) => std::sync::Arc::new(Bitseq::new(b.clone())?),
        })
    }

    /// Hidden layer sizes for the network builders.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        vec![self.hidden_units; self.hidden_layers]
    }

    /// Stable identifier derived from the resolved configuration and seed.
    pub fn run_id(&self) -> String {
        let text = self.echo_text();
        format!("{:016x}", crate::numerics::fnv1a64(text.as_bytes()))
    }
}
