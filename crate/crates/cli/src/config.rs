//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file,
//! `--set key=value` pairs, then the dedicated flags (`--seed`, `--dims`,
//! `--loss`, `--bidirectional`). The resolved value of every key is echoed
//! into the run manifest.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use matchsrnn::lcs::{PlantedConfig, SimConfig};
use matchsrnn::train::{LossKind, TrainConfig};
use serde::Serialize;

use crate::CliError;

/// How `simulate-lcs` reduces gate vectors when backtracing a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathDim {
    /// The dimension picked by the visualization rule.
    Viz,
    /// Mean over hidden dimensions.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// LCS simulation data. `sim.seed` follows the run seed.
    pub sim: SimConfig,
    /// Size of the separately generated LCS validation set.
    pub n_valid: usize,
    /// Planted-subsequence ranking/classification data.
    pub planted: PlantedConfig,
    pub rank_queries: usize,
    pub rank_test_queries: usize,
    pub rank_negatives: usize,
    pub class_pairs: usize,
    pub class_test_pairs: usize,
    pub gc_instances: usize,
    pub gc_eps: f64,
    pub gc_tol: f64,
    pub gc_init_scale: f64,
    pub gc_max_per_array: usize,
    /// Test pairs used for the path-agreement statistic.
    pub path_pairs: usize,
    pub path_dim: PathDim,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            n_valid: 1000,
            planted: PlantedConfig::default(),
            rank_queries: 500,
            rank_test_queries: 200,
            rank_negatives: 4,
            class_pairs: 2000,
            class_test_pairs: 500,
            gc_instances: 24,
            gc_eps: 1e-5,
            gc_tol: 1e-5,
            gc_init_scale: 0.5,
            gc_max_per_array: 24,
            path_pairs: 200,
            path_dim: PathDim::Viz,
        };
        c.set_seed(c.train.seed);
        c
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Input(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Input(format!("invalid boolean {value:?} for {key}"))),
    }
}

/// `d_e,c,d`
pub fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [de, c, d] if de > 0 && c > 0 && d > 0 => Ok((de, c, d)),
        _ => Err(format!("expected three positive sizes d_e,c,d, got {s:?}")),
    }
}

impl RunConfig {
    /// One seed drives everything: training order and initialization use
    /// it directly, generated data uses fixed offsets from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sim.seed = seed;
        self.planted.seed = seed.wrapping_add(2);
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        if key.trim() == "seed" {
            self.set_seed(parse(key, v)?);
            return Ok(());
        }
        let t = &mut self.train;
        match key.trim() {
            "embed_dim" => t.embed_dim = parse(key, v)?,
            "interaction_dim" => t.interaction_dim = parse(key, v)?,
            "hidden_dim" => t.hidden_dim = parse(key, v)?,
            "dims" => (t.embed_dim, t.interaction_dim, t.hidden_dim) = parse_dims(v).map_err(CliError::Input)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "adagrad_eps" => t.adagrad_eps = parse(key, v)?,
            "init_scale" => t.init_scale = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "bidirectional" => t.bidirectional = parse_bool(key, v)?,
            "loss" => t.loss = v.parse::<LossKind>()?,
            "freeze_embeddings" => t.freeze_embeddings = parse_bool(key, v)?,
            "alphabet" => self.sim.alphabet = parse(key, v)?,
            "min_len" => self.sim.min_len = parse(key, v)?,
            "max_len" => self.sim.max_len = parse(key, v)?,
            "n_train" => self.sim.n_train = parse(key, v)?,
            "n_test" => self.sim.n_test = parse(key, v)?,
            "n_valid" => self.n_valid = parse(key, v)?,
            "rank_alphabet" => self.planted.alphabet = parse(key, v)?,
            "rank_min_len" => self.planted.min_len = parse(key, v)?,
            "rank_max_len" => self.planted.max_len = parse(key, v)?,
            "planted_len" => self.planted.planted = parse(key, v)?,
            "max_negative_lcs" => self.planted.max_negative_lcs = parse(key, v)?,
            "rank_queries" => self.rank_queries = parse(key, v)?,
            "rank_test_queries" => self.rank_test_queries = parse(key, v)?,
            "rank_negatives" => self.rank_negatives = parse(key, v)?,
            "class_pairs" => self.class_pairs = parse(key, v)?,
            "class_test_pairs" => self.class_test_pairs = parse(key, v)?,
            "gc_instances" => self.gc_instances = parse(key, v)?,
            "gc_eps" => self.gc_eps = parse(key, v)?,
            "gc_tol" => self.gc_tol = parse(key, v)?,
            "gc_init_scale" => self.gc_init_scale = parse(key, v)?,
            "gc_max_per_array" => self.gc_max_per_array = parse(key, v)?,
            "path_pairs" => self.path_pairs = parse(key, v)?,
            "path_dim" => {
                self.path_dim = match v {
                    "viz" => PathDim::Viz,
                    "average" => PathDim::Average,
                    _ => return Err(CliError::Input(format!("path_dim must be viz or average, got {v:?}"))),
                }
            }
            other => return Err(CliError::Input(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a config file. `#` starts a comment; blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("config line {}: expected key = value", k + 1)))?;
            self.set(key, value).map_err(|e| CliError::Input(format!("config line {}: {e}", k + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key with its resolved value, in the file syntax.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("embed_dim", t.embed_dim.to_string());
        kv("interaction_dim", t.interaction_dim.to_string());
        kv("hidden_dim", t.hidden_dim.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("adagrad_eps", t.adagrad_eps.to_string());
        kv("init_scale", t.init_scale.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("bidirectional", t.bidirectional.to_string());
        kv("loss", t.loss.name().to_string());
        kv("freeze_embeddings", t.freeze_embeddings.to_string());
        kv("alphabet", self.sim.alphabet.to_string());
        kv("min_len", self.sim.min_len.to_string());
        kv("max_len", self.sim.max_len.to_string());
        kv("n_train", self.sim.n_train.to_string());
        kv("n_test", self.sim.n_test.to_string());
        kv("n_valid", self.n_valid.to_string());
        kv("rank_alphabet", self.planted.alphabet.to_string());
        kv("rank_min_len", self.planted.min_len.to_string());
        kv("rank_max_len", self.planted.max_len.to_string());
        kv("planted_len", self.planted.planted.to_string());
        kv("max_negative_lcs", self.planted.max_negative_lcs.to_string());
        kv("rank_queries", self.rank_queries.to_string());
        kv("rank_test_queries", self.rank_test_queries.to_string());
        kv("rank_negatives", self.rank_negatives.to_string());
        kv("class_pairs", self.class_pairs.to_string());
        kv("class_test_pairs", self.class_test_pairs.to_string());
        kv("gc_instances", self.gc_instances.to_string());
        kv("gc_eps", self.gc_eps.to_string());
        kv("gc_tol", self.gc_tol.to_string());
        kv("gc_init_scale", self.gc_init_scale.to_string());
        kv("gc_max_per_array", self.gc_max_per_array.to_string());
        kv("path_pairs", self.path_pairs.to_string());
        kv(
            "path_dim",
            match self.path_dim {
                PathDim::Viz => "viz",
                PathDim::Average => "average",
            }
            .into(),
        );
        s
    }
}
