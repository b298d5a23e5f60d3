//! Subcommand implementations. Each writes its artifacts into an output
//! directory and returns the headline numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use paglab::attack::{self, PgdConfig, ThreatModel};
use paglab::data::{self, Dataset, ToySizes};
use paglab::model::{self, Metadata, Mlp};
use paglab::reps::{self, RepStore, Scheme};
use paglab::train::{self, Regime, TrainOutcome};
use serde_json::{json, Value};

use crate::boundary::{self, Grid, Margins};
use crate::config::RunConfig;

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

fn load_spec(spec: &str, cfg: &RunConfig) -> Result<Dataset> {
    let (kind, path) = spec.split_once(':').unwrap_or((spec, ""));
    let ds = match kind {
        "csv" => data::load_csv(Path::new(path), cfg.classes()?)?,
        "images" => data::load_image_batches(Path::new(path), cfg.limit()?)?,
        _ => bail!("unknown dataset `{spec}` (expected toy, csv:PATH or images:PATH)"),
    };
    match cfg.limit()? {
        Some(n) if kind == "csv" && n < ds.len() => Ok(ds.take(n)?),
        _ => Ok(ds),
    }
}

fn spec_path(spec: &str) -> Option<PathBuf> {
    spec.split_once(':').map(|(_, p)| PathBuf::from(p))
}

/// Training and evaluation sets. The toy generator provides both; file
/// datasets evaluate on `test_dataset` when given, otherwise on themselves.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let spec = cfg.get("dataset");
    let (train, default_test) = if spec == "toy" {
        let sizes = ToySizes {
            train_per_mode: cfg.parse("toy_train_per_mode")?,
            test_per_mode: cfg.parse("toy_test_per_mode")?,
        };
        let (a, b) = data::toy_generate(cfg.data_seed()?, sizes)?;
        (a, Some(b))
    } else {
        (load_spec(spec, cfg)?, None)
    };
    let test = match cfg.get("test_dataset") {
        "" => default_test.unwrap_or_else(|| train.clone()),
        t => load_spec(t, cfg)?,
    };
    if test.dim() != train.dim() {
        bail!("test set has dimension {}, training set {}", test.dim(), train.dim());
    }
    Ok(Datasets { train, test })
}

pub fn model_dims(cfg: &RunConfig, train: &Dataset) -> Result<Vec<usize>> {
    let mut dims = vec![train.dim()];
    dims.extend(cfg.hidden()?);
    dims.push(train.classes());
    Ok(dims)
}

fn load_teacher(cfg: &RunConfig) -> Result<Mlp> {
    let Some(path) = cfg.path("teacher") else {
        bail!("the rigd scheme needs a teacher checkpoint (--teacher PATH)");
    };
    let (m, _) = model::load(&path).with_context(|| format!("loading teacher {}", path.display()))?;
    Ok(m)
}

/// Loads `reps` when set, otherwise builds targets for the configured scheme.
pub fn resolve_reps(cfg: &RunConfig, train: &Dataset) -> Result<RepStore> {
    if let Some(path) = cfg.path("reps") {
        return Ok(RepStore::load_for(&path, train)?);
    }
    let Some(scheme) = cfg.scheme()? else {
        bail!("no representative scheme given (set scheme=one-image|class-mean|nearest-neighbor|rigd or reps=PATH)");
    };
    let seed = cfg.reps_seed()?;
    Ok(match scheme {
        Scheme::OneImage => reps::one_image(train, seed)?,
        Scheme::ClassMean => reps::class_mean(train)?,
        Scheme::NearestNeighbor => reps::nearest_neighbor(train, cfg.parse("pool")?, seed)?,
        Scheme::Rigd => reps::rigd(train, &load_teacher(cfg)?)?,
    })
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(data::sha256_hex(&bytes))
}

/// Writes `config.txt` and `manifest.txt`.
fn write_run_files(out: &Path, command: &str, cfg: &RunConfig, ds: Option<&Datasets>) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;

    let mut m = String::new();
    writeln!(m, "paglab {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(m, "command={command}")?;
    if let Some(ds) = ds {
        writeln!(m, "train_dataset={}", ds.train.content_hash())?;
        writeln!(m, "test_dataset={}", ds.test.content_hash())?;
    }
    let mut inputs = vec![];
    for key in ["dataset", "test_dataset"] {
        if let Some(p) = spec_path(cfg.get(key)) {
            inputs.push((key, p));
        }
    }
    for key in ["reps", "teacher", "checkpoint"] {
        if let Some(p) = cfg.path(key) {
            inputs.push((key, p));
        }
    }
    for (key, p) in inputs {
        writeln!(m, "input.{key}={} sha256={}", p.display(), file_hash(&p)?)?;
    }
    fs::write(out.join("manifest.txt"), m)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub zero_grad_steps: usize,
    pub attack: Option<(PgdConfig, ThreatModel)>,
    pub samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        let attack = self.attack.as_ref().map(|(pgd, threat)| {
            json!({
                "norm": threat.norm.to_string(),
                "epsilon": threat.epsilon,
                "steps": pgd.steps,
                "step_size": pgd.resolved_step_size(threat),
                "random_init": pgd.random_init,
                "seed": pgd.seed,
                "clamp": threat.clamp.map(|(lo, hi)| vec![lo, hi]),
            })
        });
        json!({
            "clean_acc": self.clean_acc,
            "robust_acc": self.robust_acc,
            "samples": self.samples,
            "zero_grad_steps": self.zero_grad_steps,
            "attack": attack,
        })
    }
}

/// Clean and robust accuracy on `test`. With a zero radius the robust
/// accuracy equals the clean one.
pub fn evaluate(cfg: &RunConfig, model: &Mlp, test: &Dataset) -> Result<EvalReport> {
    let clean_acc = attack::clean_accuracy(model, test)?;
    let attack = cfg.eval_attack()?;
    let (robust_acc, zero_grad_steps) = match &attack {
        None => (clean_acc, 0),
        Some((pgd, threat)) => {
            let r = attack::robust_report(model, test, pgd, threat)?;
            (r.robust_accuracy, r.zero_grad_steps)
        }
    };
    Ok(EvalReport {
        clean_acc,
        robust_acc,
        zero_grad_steps,
        attack,
        samples: test.len(),
    })
}

pub struct MakeRepsSummary {
    pub store: RepStore,
    pub path: PathBuf,
}

pub fn make_reps(cfg: &RunConfig, out: &Path) -> Result<MakeRepsSummary> {
    let ds = load_datasets(cfg)?;
    if cfg.scheme()?.is_none() {
        bail!("make-reps needs a scheme (--scheme one-image|class-mean|nearest-neighbor|rigd)");
    }
    let store = resolve_reps(cfg, &ds.train)?;
    write_run_files(out, "make-reps", cfg, Some(&ds))?;
    let path = out.join("reps.bin");
    store.save(&path)?;
    Ok(MakeRepsSummary { store, path })
}

pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub eval: EvalReport,
    pub checkpoint: PathBuf,
}

fn train_metadata(cfg: &RunConfig, regime: &Regime, reps: Option<&RepStore>, ds: &Datasets) -> Metadata {
    let mut meta = Metadata::new();
    meta.insert("regime".into(), regime.name().into());
    meta.insert("seed".into(), cfg.get("seed").into());
    meta.insert("epochs".into(), cfg.get("epochs").into());
    meta.insert("train_dataset".into(), ds.train.content_hash());
    if let Regime::Pag(loss) = regime {
        meta.insert("lambda".into(), format!("{:?}", loss.lambda));
    }
    if let Some(store) = reps {
        meta.insert("scheme".into(), store.scheme.tag().into());
        if store.scheme == Scheme::Rigd {
            meta.insert("note".into(), "rigd targets come from a teacher; treat as an upper bound".into());
        }
    }
    meta
}

fn train_with(cfg: &RunConfig, ds: &Datasets, store: Option<&RepStore>) -> Result<(TrainOutcome, EvalReport)> {
    let tc = cfg.train_config()?;
    let init = Mlp::init(&model_dims(cfg, &ds.train)?, cfg.seed()?)?;
    let outcome = train::train(&init, &ds.train, &tc, store)?;
    let eval = evaluate(cfg, &outcome.model, &ds.test)?;
    Ok((outcome, eval))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let ds = load_datasets(cfg)?;
    let regime = cfg.regime()?;
    let store = match regime {
        Regime::Pag(_) => Some(resolve_reps(cfg, &ds.train)?),
        _ => None,
    };
    let (outcome, eval) = train_with(cfg, &ds, store.as_ref())?;

    write_run_files(out, "train", cfg, Some(&ds))?;
    if let Some(s) = &store {
        s.save(&out.join("reps.bin"))?;
    }
    let checkpoint = out.join("checkpoint.bin");
    model::save(&outcome.model, &train_metadata(cfg, &regime, store.as_ref(), &ds), &checkpoint)?;
    train::write_metrics_csv(&out.join("metrics.csv"), regime.name(), &outcome.log)?;
    let mut report = eval.to_json();
    report["regime"] = json!(regime.name());
    if let Some(s) = &store {
        report["scheme"] = json!(s.scheme.tag());
        report["upper_bound"] = json!(s.scheme == Scheme::Rigd);
    }
    write_json(&out.join("eval.json"), &report)?;
    Ok(TrainSummary {
        outcome,
        eval,
        checkpoint,
    })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Mlp> {
    let Some(path) = cfg.path("checkpoint") else {
        bail!("no checkpoint given (--checkpoint PATH)");
    };
    let (m, _) = model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(m)
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(cfg)?;
    let ds = load_datasets(cfg)?;
    let report = evaluate(cfg, &model, &ds.test)?;
    write_run_files(out, "eval", cfg, Some(&ds))?;
    write_json(&out.join("eval.json"), &report.to_json())?;
    Ok(report)
}

fn margin_json(m: &Margins) -> Value {
    json!({ "per_class": m.per_class, "overall": m.overall })
}

pub fn export_boundary(cfg: &RunConfig, out: &Path) -> Result<Margins> {
    let model = load_checkpoint(cfg)?;
    let ds = load_datasets(cfg)?;
    let (a, b, c, d, width, height) = cfg.grid()?;
    let grid = Grid {
        x1: (a, b),
        x2: (c, d),
        width,
        height,
    };
    let preds = boundary::predict_grid(&model, &grid)?;
    let margins = boundary::margins(&grid, &preds, &ds.test);

    write_run_files(out, "export-boundary", cfg, Some(&ds))?;
    fs::write(out.join("boundary.ppm"), boundary::ppm(&grid, &preds))?;
    fs::write(out.join("grid.csv"), boundary::grid_csv(&grid, &preds))?;
    fs::write(out.join("points.csv"), boundary::points_csv(&model, &ds.test)?)?;
    write_json(
        &out.join("boundary.json"),
        &json!({
            "grid": { "x1": [a, b], "x2": [c, d], "width": width, "height": height },
            "margin": margin_json(&margins),
        }),
    )?;
    Ok(margins)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

pub fn sweep_lambda(cfg: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    if cfg.get("regime") != "pag" {
        bail!("sweep-lambda needs regime=pag");
    }
    let ds = load_datasets(cfg)?;
    let store = resolve_reps(cfg, &ds.train)?;
    let mut rows = vec![];
    for lambda in cfg.lambdas()? {
        let mut run = cfg.clone();
        run.set("lambda", &format!("{lambda:?}"))?;
        let (_, eval) = train_with(&run, &ds, Some(&store))?;
        rows.push(SweepRow {
            lambda,
            clean_acc: eval.clean_acc,
            robust_acc: eval.robust_acc,
        });
    }
    write_run_files(out, "sweep-lambda", cfg, Some(&ds))?;
    store.save(&out.join("reps.bin"))?;
    let mut csv = String::from("lambda,clean_acc,robust_acc\n");
    for r in &rows {
        writeln!(csv, "{:?},{:?},{:?}", r.lambda, r.clean_acc, r.robust_acc)?;
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}
