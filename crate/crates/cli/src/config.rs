//! `key=value` run configuration, presets and resolution into library types.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use paglab::attack::{NormKind, PgdConfig, ThreatModel};
use paglab::loss::PagLossConfig;
use paglab::reps::Scheme;
use paglab::train::{OptimizerConfig, OptimizerKind, Regime, TrainConfig};

/// Every recognized key with its default value, in output order.
const DEFAULTS: &[(&str, &str)] = &[
    ("dataset", "toy"),
    ("test_dataset", ""),
    ("data_seed", ""),
    ("toy_train_per_mode", "1000"),
    ("toy_test_per_mode", "100"),
    ("classes", ""),
    ("limit", ""),
    ("hidden", "32"),
    ("regime", "vanilla"),
    ("epochs", "100"),
    ("batch_size", "128"),
    ("optimizer", "adam"),
    ("lr", "0.01"),
    ("momentum", "0.9"),
    ("weight_decay", "0"),
    ("seed", "0"),
    ("lambda", "0.4"),
    ("cosine_eps", "1e-8"),
    ("scheme", ""),
    ("pool", "100"),
    ("reps_seed", ""),
    ("reps", ""),
    ("teacher", ""),
    ("train_norm", "l2"),
    ("train_epsilon", "15"),
    ("train_steps", "10"),
    ("train_step_size", "auto"),
    ("train_random_init", "true"),
    ("eval_norm", "l2"),
    ("eval_epsilon", "15"),
    ("eval_steps", "10"),
    ("eval_step_size", "2"),
    ("eval_random_init", "false"),
    ("eval_seed", "0"),
    ("clamp", ""),
    ("checkpoint", ""),
    ("grid_x1", "-60,60"),
    ("grid_x2", "-120,120"),
    ("grid_size", "600,600"),
    ("lambdas", "0,0.1,0.4,1"),
];

pub const PRESETS: &[(&str, &str)] = &[
    ("toy-vanilla", "regime=vanilla\n"),
    ("toy-pag-oi", "regime=pag\nscheme=one-image\nlambda=0.5\n"),
    ("toy-pag-cm", "regime=pag\nscheme=class-mean\nlambda=0.4\n"),
    ("toy-pag-nn", "regime=pag\nscheme=nearest-neighbor\nlambda=0.4\npool=100\n"),
    ("toy-at", "regime=adversarial\n"),
    ("toy-rigd", "regime=pag\nscheme=rigd\nlambda=0.4\n"),
    (
        "images-pag-cm",
        "dataset=images:data_batch_1.bin\nlimit=500\nhidden=64\nregime=pag\nscheme=class-mean\n\
         lambda=0.4\noptimizer=sgd\nbatch_size=64\nepochs=10\nweight_decay=0.0001\n\
         eval_norm=linf\neval_epsilon=0.03137254901960784\neval_steps=20\neval_step_size=auto\n\
         eval_random_init=true\nclamp=0,1\n",
    ),
];

/// Fully resolvable run configuration. Values stay as text until resolved so
/// the written config reproduces the run exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                anyhow!("unknown preset `{name}` (available: {})", names.join(", "))
            })?;
        let mut cfg = Self::default();
        cfg.merge_text(text, &format!("preset {name}"))?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| k == key)
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        slot.1 = value.trim().to_string();
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got `{assignment}`"))?;
        self.set(k.trim(), v)
    }

    /// Merges `key=value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).with_context(|| format!("{source}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("config key `{key}` is not defined"))
    }

    fn opt(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key).map(|_| self.parse(key)).transpose()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.opt(key).map(PathBuf::from)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn data_seed(&self) -> Result<u64> {
        Ok(self.parse_opt("data_seed")?.unwrap_or(self.seed()?))
    }

    pub fn reps_seed(&self) -> Result<u64> {
        Ok(self.parse_opt("reps_seed")?.unwrap_or(self.seed()?))
    }

    pub fn classes(&self) -> Result<Option<usize>> {
        self.parse_opt("classes")
    }

    pub fn limit(&self) -> Result<Option<usize>> {
        self.parse_opt("limit")
    }

    pub fn hidden(&self) -> Result<Vec<usize>> {
        parse_list(self.get("hidden"), "hidden")
    }

    pub fn scheme(&self) -> Result<Option<Scheme>> {
        Ok(self.opt("scheme").map(str::parse).transpose()?)
    }

    pub fn lambdas(&self) -> Result<Vec<f64>> {
        let list: Vec<f64> = parse_list(self.get("lambdas"), "lambdas")?;
        if list.is_empty() {
            bail!("lambdas must list at least one value");
        }
        Ok(list)
    }

    pub fn clamp(&self) -> Result<Option<(f64, f64)>> {
        match self.opt("clamp") {
            None => Ok(None),
            Some(_) => {
                let v: Vec<f64> = parse_list(self.get("clamp"), "clamp")?;
                match v[..] {
                    [lo, hi] => Ok(Some((lo, hi))),
                    _ => bail!("clamp must be `lo,hi`"),
                }
            }
        }
    }

    pub fn pag_loss(&self) -> Result<PagLossConfig> {
        Ok(PagLossConfig::new(self.parse("lambda")?, self.parse("cosine_eps")?)?)
    }

    pub fn train_threat(&self) -> Result<ThreatModel> {
        Ok(ThreatModel::new(
            self.parse::<NormKind>("train_norm")?,
            self.parse("train_epsilon")?,
            self.clamp()?,
        )?)
    }

    pub fn train_pgd(&self) -> Result<PgdConfig> {
        let mut c = PgdConfig::new(
            self.parse("train_steps")?,
            step_size(self.get("train_step_size"))?,
            self.parse("train_random_init")?,
        )?;
        c.seed = self.seed()?;
        Ok(c)
    }

    /// Attack used for evaluation. `None` when the radius is zero.
    pub fn eval_attack(&self) -> Result<Option<(PgdConfig, ThreatModel)>> {
        let eps: f64 = self.parse("eval_epsilon")?;
        if eps == 0.0 {
            return Ok(None);
        }
        let threat = ThreatModel::new(self.parse::<NormKind>("eval_norm")?, eps, self.clamp()?)?;
        let mut pgd = PgdConfig::new(
            self.parse("eval_steps")?,
            step_size(self.get("eval_step_size"))?,
            self.parse("eval_random_init")?,
        )?;
        pgd.seed = self.parse("eval_seed")?;
        Ok(Some((pgd, threat)))
    }

    pub fn regime(&self) -> Result<Regime> {
        Ok(match self.get("regime") {
            "vanilla" => Regime::Vanilla,
            "pag" => Regime::Pag(self.pag_loss()?),
            "adversarial" | "at" => Regime::Adversarial {
                pgd: self.train_pgd()?,
                threat: self.train_threat()?,
            },
            other => bail!("unknown regime `{other}` (expected vanilla, pag or adversarial)"),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let lr = self.parse("lr")?;
        let weight_decay = self.parse("weight_decay")?;
        let optimizer = match self.parse::<OptimizerKind>("optimizer")? {
            OptimizerKind::Adam => OptimizerConfig::Adam { lr, weight_decay },
            OptimizerKind::SgdMomentum => OptimizerConfig::SgdMomentum {
                lr,
                momentum: self.parse("momentum")?,
                weight_decay,
            },
        };
        let cfg = TrainConfig {
            regime: self.regime()?,
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            optimizer,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(x_min, x_max, y_min, y_max, width, height)`
    pub fn grid(&self) -> Result<(f64, f64, f64, f64, usize, usize)> {
        let x1: Vec<f64> = parse_list(self.get("grid_x1"), "grid_x1")?;
        let x2: Vec<f64> = parse_list(self.get("grid_x2"), "grid_x2")?;
        let size: Vec<usize> = parse_list(self.get("grid_size"), "grid_size")?;
        match (&x1[..], &x2[..], &size[..]) {
            ([a, b], [c, d], [w, h]) if a < b && c < d && *w > 0 && *h > 0 => Ok((*a, *b, *c, *d, *w, *h)),
            _ => bail!("grid needs grid_x1=lo,hi grid_x2=lo,hi grid_size=w,h with lo<hi and positive sizes"),
        }
    }

    /// Every key on its own line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

fn step_size(raw: &str) -> Result<Option<f64>> {
    match raw {
        "" | "auto" => Ok(None),
        v => Ok(Some(v.parse().map_err(|e| anyhow!("step size `{v}`: {e}"))?)),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| anyhow!("config key `{key}`: `{s}`: {e}")))
        .collect()
}
