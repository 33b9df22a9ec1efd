//! Flat `key = value` configuration with `#` comments. Every key has a
//! default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advtext::adversary::{AttackConfig, FreeLbConfig};
use advtext::carl::CarlConfig;
use advtext::trainer::{Mode, TrainConfig};

use crate::error::CliError;

/// `(key, default)`; an empty default means unset.
const KEYS: &[(&str, &str)] = &[
    ("mode", "plain"),
    ("seed", "0"),
    ("learning_rate", "0.00001"),
    ("batch_size", "32"),
    ("max_steps", "1000"),
    ("eval_every", "100"),
    ("freelb.gamma", "0.6"),
    ("freelb.alpha", "0.1"),
    ("freelb.epsilon", "0"),
    ("freelb.n_steps", "2"),
    ("carl.m", "64"),
    ("carl.temperature", "0.07"),
    ("carl.momentum", "0.5"),
    ("carl.start_step", "500"),
    ("carl.include_positive", "false"),
    ("rar.w_r", "0.1"),
    ("model.vocab_size", "0"),
    ("model.embed_dim", "32"),
    ("model.hidden_dim", "32"),
    ("model.max_len", "16"),
    ("attack.k_steps", "3"),
    ("attack.alpha", "0.1"),
    ("attack.epsilon", "0.1"),
    ("attack.gamma", "0"),
    ("attack.seed", "0"),
    ("data.train", ""),
    ("data.dev", ""),
    ("data.test", ""),
    ("data.min_freq", "1"),
    ("data.max_vocab", "30000"),
    ("eval.split", "dev"),
    ("out_dir", "out"),
    ("checkpoint", ""),
    ("baseline_checkpoint", ""),
    ("vocab", ""),
    ("report", ""),
    ("output", ""),
    ("grid.gamma", ""),
    ("grid.alpha", ""),
    ("grid.epsilon", ""),
    ("grid.n_steps", ""),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> Option<&'static str> {
    KEYS.iter().map(|&(k, _)| k).find(|&k| k == key)
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = CliConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("{origin}:{}: expected `key = value`", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k =
            known(key).ok_or_else(|| CliError::config(format!("unknown config key {key:?}")))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a config key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::config(format!("bad value {raw:?} for {key}")))
    }

    /// Comma-separated values; empty means none.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(vec![]);
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("bad value {s:?} in {key}")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }

    /// Every key in canonical order; loading this text reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|&(k, _)| format!("{k} = {}\n", self.values[k]))
            .collect()
    }

    pub fn freelb(&self) -> Result<FreeLbConfig, CliError> {
        let f = FreeLbConfig {
            gamma: self.get("freelb.gamma")?,
            alpha: self.get("freelb.alpha")?,
            epsilon: self.get("freelb.epsilon")?,
            n_steps: self.get("freelb.n_steps")?,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn carl(&self) -> Result<CarlConfig, CliError> {
        let c = CarlConfig {
            m: self.get("carl.m")?,
            temperature: self.get("carl.temperature")?,
            momentum: self.get("carl.momentum")?,
            start_step: self.get("carl.start_step")?,
            include_positive: self.get("carl.include_positive")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mode: Mode = self.get("mode")?;
        let cfg = TrainConfig {
            mode,
            freelb: self.freelb()?,
            carl: (mode == Mode::Carl).then(|| self.carl()).transpose()?,
            w_r: self.get("rar.w_r")?,
            learning_rate: self.get("learning_rate")?,
            batch_size: self.get("batch_size")?,
            max_steps: self.get("max_steps")?,
            eval_every: self.get("eval_every")?,
            seed: self.get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One attack per listed epsilon.
    pub fn attacks(&self) -> Result<Vec<AttackConfig>, CliError> {
        let eps: Vec<f64> = self.list("attack.epsilon")?;
        if eps.is_empty() {
            return Err(CliError::config("attack.epsilon needs at least one value"));
        }
        eps.into_iter()
            .map(|epsilon| {
                let a = AttackConfig {
                    k_steps: self.get("attack.k_steps")?,
                    alpha: self.get("attack.alpha")?,
                    epsilon,
                    gamma: self.get("attack.gamma")?,
                    seed: self.get("attack.seed")?,
                };
                a.validate()?;
                Ok(a)
            })
            .collect()
    }

    pub fn grid(&self) -> Result<GridSpec, CliError> {
        let base = self.freelb()?;
        let or_base = |v: Vec<f64>, b: f64| if v.is_empty() { vec![b] } else { v };
        let grid = GridSpec {
            gamma: or_base(self.list("grid.gamma")?, base.gamma),
            alpha: or_base(self.list("grid.alpha")?, base.alpha),
            epsilon: or_base(self.list("grid.epsilon")?, base.epsilon),
            n_steps: {
                let n: Vec<usize> = self.list("grid.n_steps")?;
                if n.is_empty() {
                    vec![base.n_steps]
                } else {
                    n
                }
            },
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Checks every typed value up front so bad configs fail before any work.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config()?;
        self.carl()?;
        self.attacks()?;
        for key in [
            "model.vocab_size",
            "model.embed_dim",
            "model.hidden_dim",
            "model.max_len",
        ] {
            self.get::<usize>(key)?;
        }
        if self.get::<usize>("model.max_len")? < 2 {
            return Err(CliError::config("model.max_len must be at least 2"));
        }
        self.get::<usize>("data.min_freq")?;
        self.get::<usize>("data.max_vocab")?;
        match self.raw("eval.split") {
            "train" | "dev" | "test" => Ok(()),
            other => Err(CliError::config(format!(
                "eval.split must be train, dev or test, not {other:?}"
            ))),
        }
    }
}

/// Value lists for each FreeLB hyperparameter; training runs on their
/// cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub n_steps: Vec<usize>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let check = |name: &str, vals: &[f64], (lo, hi): (f64, f64)| {
            if vals.is_empty() {
                return Err(CliError::config(format!("grid.{name} is empty")));
            }
            match vals.iter().find(|v| !(lo..=hi).contains(*v)) {
                Some(v) => Err(CliError::config(format!(
                    "grid.{name} value {v} is outside [{lo}, {hi}]"
                ))),
                None => Ok(()),
            }
        };
        check("gamma", &self.gamma, FreeLbConfig::GAMMA_BOUNDS)?;
        check("alpha", &self.alpha, FreeLbConfig::ALPHA_BOUNDS)?;
        check("epsilon", &self.epsilon, FreeLbConfig::EPSILON_BOUNDS)?;
        let (lo, hi) = FreeLbConfig::N_STEPS_BOUNDS;
        if self.n_steps.is_empty() {
            return Err(CliError::config("grid.n_steps is empty"));
        }
        if let Some(n) = self.n_steps.iter().find(|n| !(lo..=hi).contains(*n)) {
            return Err(CliError::config(format!(
                "grid.n_steps value {n} is outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Points in listed order: gamma varies slowest, n_steps fastest.
    pub fn points(&self) -> Vec<FreeLbConfig> {
        let mut out = Vec::new();
        for &gamma in &self.gamma {
            for &alpha in &self.alpha {
                for &epsilon in &self.epsilon {
                    for &n_steps in &self.n_steps {
                        out.push(FreeLbConfig {
                            gamma,
                            alpha,
                            epsilon,
                            n_steps,
                        });
                    }
                }
            }
        }
        out
    }
}
