//! Run configuration: defaults, then a `key = value` file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lococo::cache::{PolicyConfig, PolicyKind};
use lococo::compressor::{ReluPlacement, DEFAULT_KERNEL_SIZE};
use lococo::model::{EvalConfig, ModelConfig};
use lococo::training::{CalibrationSetup, TrainConfig};
use serde::Serialize;

/// A configuration problem detected before any work starts. Maps to exit
/// code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    KernelSize,
    MemorySize,
    Policy,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kernel_size" => Ok(Axis::KernelSize),
            "memory_size" => Ok(Axis::MemorySize),
            "policy" => Ok(Axis::Policy),
            _ => Err(format!(
                "unknown ablation axis '{s}' (expected kernel_size, memory_size or policy)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub policy: PolicyKind,
    pub policies: Vec<PolicyKind>,
    /// Memory sizes `M`; every command but `eval` takes exactly one.
    pub memory: Vec<usize>,
    #[serde(skip)]
    memory_set: bool,
    pub block_size: usize,
    pub kernel_size: usize,
    pub relu: ReluPlacement,
    pub n_sink: usize,
    pub window: Option<usize>,
    pub heavy_fraction: f64,
    pub hybrid_heavy: usize,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_conv: f64,
    pub linear_decay: bool,
    pub detach_cache: bool,
    pub seq_len: usize,
    pub eval_length: usize,
    pub holdout: f64,
    pub model: ModelConfig,
    pub prompt: String,
    pub n_new: usize,
    pub axis: Option<Axis>,
    pub values: Vec<String>,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        let tc = TrainConfig::default();
        Self {
            command: command.to_string(),
            corpus: None,
            eval_corpus: None,
            checkpoint: None,
            output: None,
            out_dir: PathBuf::from("out"),
            policy: PolicyKind::Lococo,
            policies: vec![
                PolicyKind::Concat,
                PolicyKind::Lococo,
                PolicyKind::H2o,
                PolicyKind::SinkWindow,
            ],
            memory: vec![16],
            memory_set: false,
            block_size: 8,
            kernel_size: DEFAULT_KERNEL_SIZE,
            relu: ReluPlacement::PostConv,
            n_sink: 4,
            window: None,
            heavy_fraction: 0.5,
            hybrid_heavy: 4,
            seed: 0,
            steps: tc.steps,
            batch_size: tc.batch_size,
            lr_base: 3e-3,
            lr_conv: tc.learning_rate_conv,
            linear_decay: tc.linear_decay,
            detach_cache: tc.detach_cache_between_blocks,
            seq_len: tc.seq_len,
            eval_length: 64,
            holdout: 0.1,
            model: ModelConfig::default(),
            prompt: String::new(),
            n_new: 0,
            axis: None,
            values: Vec::new(),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let value = value.trim();
        match key {
            "corpus" => self.corpus = Some(value.into()),
            "eval_corpus" => self.eval_corpus = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "output" => self.output = Some(value.into()),
            "out_dir" => self.out_dir = value.into(),
            "policy" => self.policy = parse(key, value)?,
            "policies" => self.policies = parse_list(key, value)?,
            "memory" => {
                self.memory = parse_list(key, value)?;
                self.memory_set = true;
            }
            "block_size" => self.block_size = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "relu" => {
                self.relu = match value {
                    "post_conv" => ReluPlacement::PostConv,
                    "pre_conv" => ReluPlacement::PreConv,
                    _ => return Err(invalid(format!("relu must be post_conv or pre_conv, got '{value}'"))),
                }
            }
            "n_sink" => self.n_sink = parse(key, value)?,
            "window" => self.window = Some(parse(key, value)?),
            "heavy_fraction" => self.heavy_fraction = parse(key, value)?,
            "hybrid_heavy" => self.hybrid_heavy = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_base" => self.lr_base = parse(key, value)?,
            "lr_conv" => self.lr_conv = parse(key, value)?,
            "linear_decay" => self.linear_decay = parse(key, value)?,
            "detach_cache" => self.detach_cache = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "eval_length" => self.eval_length = parse(key, value)?,
            "holdout" => self.holdout = parse(key, value)?,
            "d_model" => self.model.d_model = parse(key, value)?,
            "n_layers" => self.model.n_layers = parse(key, value)?,
            "n_heads" => self.model.n_heads = parse(key, value)?,
            "head_dim" => self.model.head_dim = parse(key, value)?,
            "max_context" => self.model.max_context = parse(key, value)?,
            "mlp_ratio" => self.model.mlp_ratio = parse(key, value)?,
            "rope_base" => self.model.rope_base = parse(key, value)?,
            "interpolation_scale" => self.model.interpolation_scale = parse(key, value)?,
            "prompt" => self.prompt = value.to_string(),
            "n_new" => self.n_new = parse(key, value)?,
            "axis" => self.axis = Some(parse(key, value)?),
            "values" => {
                self.values = value
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect()
            }
            _ => return Err(invalid(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Reads a `key = value` file. Blank lines and `#` comments are skipped;
    /// repeated keys are rejected.
    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            let k = k.trim();
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(invalid(format!("{}:{}: key '{k}' set twice", path.display(), n + 1)));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Fills in derived fields after all settings are applied.
    pub fn finish(&mut self) -> anyhow::Result<()> {
        if self.model.d_model.is_multiple_of(self.model.n_heads.max(1)) {
            self.model.head_dim = self.model.d_model / self.model.n_heads.max(1);
        }
        if let Some(w) = self.window {
            let m = self.n_sink + w;
            if self.memory_set && self.memory != [m] {
                return Err(invalid(format!(
                    "window {w} with {} sinks means memory {m}, which contradicts memory = {:?}",
                    self.n_sink, self.memory
                )));
            }
            self.memory = vec![m];
        }
        if self.memory.is_empty() {
            return Err(invalid("memory list is empty"));
        }
        if self.block_size == 0 {
            return Err(invalid("block_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(invalid("holdout must lie in [0, 1)"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn single_memory(&self) -> anyhow::Result<usize> {
        match self.memory.as_slice() {
            [m] => Ok(*m),
            _ => Err(invalid(format!("{} takes a single memory size", self.command))),
        }
    }

    pub fn policy_config(&self, kind: PolicyKind, memory: usize) -> anyhow::Result<PolicyConfig> {
        let p = PolicyConfig {
            n_sink: self.n_sink,
            heavy_fraction: self.heavy_fraction,
            hybrid_heavy: self.hybrid_heavy,
            ..PolicyConfig::new(kind, memory)
        };
        p.validate(self.block_size).map_err(|e| invalid(e.to_string()))?;
        Ok(p)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate_base: self.lr_base,
            learning_rate_conv: self.lr_conv,
            steps: self.steps,
            batch_size: self.batch_size,
            linear_decay: self.linear_decay,
            seed,
            seq_len: self.seq_len,
            detach_cache_between_blocks: self.detach_cache,
        }
    }

    pub fn calibration_setup(&self, kernel_size: usize) -> CalibrationSetup {
        CalibrationSetup {
            block_size: self.block_size,
            kernel_size,
            relu: self.relu,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            context_length: self.eval_length,
            block_size: self.block_size,
        }
    }

    pub fn require<'a>(&self, what: &str, v: &'a Option<PathBuf>) -> anyhow::Result<&'a Path> {
        let p = v
            .as_deref()
            .ok_or_else(|| invalid(format!("{} needs '{what}'", self.command)))?;
        Ok(p)
    }

    /// Path of an input file that must exist.
    pub fn input<'a>(&self, what: &str, v: &'a Option<PathBuf>) -> anyhow::Result<&'a Path> {
        let p = self.require(what, v)?;
        if !p.is_file() {
            return Err(invalid(format!("{what} file {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| invalid(format!("bad value '{value}' for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nmemory = 8, 16\npolicy = h2o\n\nseed=7\n").unwrap();
        let mut c = RunConfig::defaults("eval");
        c.apply_file(&path).unwrap();
        c.set("seed", "9").unwrap();
        c.finish().unwrap();
        assert_eq!(c.memory, vec![8, 16]);
        assert_eq!(c.policy, PolicyKind::H2o);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let mut c = RunConfig::defaults("eval");
        assert!(c.set("memroy", "8").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "seed = 1\nseed = 2\n").unwrap();
        assert!(c.apply_file(&path).is_err());
        std::fs::write(&path, "just words\n").unwrap();
        assert!(c.apply_file(&path).is_err());
    }

    #[test]
    fn window_sets_memory() {
        let mut c = RunConfig::defaults("eval");
        c.set("n_sink", "2").unwrap();
        c.set("window", "6").unwrap();
        c.finish().unwrap();
        assert_eq!(c.memory, vec![8]);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = RunConfig::defaults("eval");
        assert!(c.set("policy", "lru").is_err());
        assert!(c.set("block_size", "-1").is_err());
        assert!(c.set("axis", "depth").is_err());
        c.set("kernel_size", "4").unwrap();
        assert!(c.finish().is_err());
    }
}
