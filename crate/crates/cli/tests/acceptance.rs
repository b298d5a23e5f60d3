//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use paglab::attack::{self, l2_norm, project, NormKind, ThreatModel};
use paglab::autodiff::Tape;
use paglab::loss::{pag_total_loss, PagLossConfig};
use paglab::model::Mlp;
use paglab::reps::RepStore;
use paglab::Tensor;
use paglab_cli::commands::{self, TrainSummary};
use paglab_cli::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }

    fn check(&mut self, name: &str, outcome: Result<(bool, String)>) {
        match outcome {
            Ok((pass, detail)) => self.line(name, pass, detail),
            Err(e) => self.line(name, false, format!("error: {e:#}")),
        }
    }
}

struct Run {
    summary: TrainSummary,
    elapsed: Duration,
}

/// Re-raises a shared setup failure inside a later criterion.
fn again(e: &anyhow::Error) -> anyhow::Error {
    anyhow::anyhow!("{e:#}")
}

fn preset(name: &str, sets: &[(&str, &str)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(name)?;
    for (k, v) in sets {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn train(root: &Path, tag: &str, cfg: &RunConfig) -> Result<Run> {
    let start = Instant::now();
    let summary = commands::train(cfg, &root.join(tag))?;
    Ok(Run {
        summary,
        elapsed: start.elapsed(),
    })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let mut report = Report { failures: 0 };

    let vanilla = train(root, "vanilla", &RunConfig::preset("toy-vanilla").unwrap());
    let nn: Vec<Result<Run>> = (0..3)
        .map(|seed| {
            let s = seed.to_string();
            train(root, &format!("nn{seed}"), &preset("toy-pag-nn", &[("seed", &s)])?)
        })
        .collect();

    report.check(
        "clean accuracy of vanilla and nearest-neighbor models",
        (|| {
            let v = vanilla.as_ref().map_err(again)?;
            let n = nn[0].as_ref().map_err(again)?;
            let pass = v.summary.eval.clean_acc >= 0.99
                && n.summary.eval.clean_acc >= 0.99
                && v.elapsed.as_secs() <= 120
                && n.elapsed.as_secs() <= 120;
            Ok((
                pass,
                format!(
                    "vanilla {:.3} in {:.1}s, nearest-neighbor {:.3} in {:.1}s (need >= 0.99, <= 120s)",
                    v.summary.eval.clean_acc,
                    secs(v.elapsed),
                    n.summary.eval.clean_acc,
                    secs(n.elapsed)
                ),
            ))
        })(),
    );

    report.check(
        "vanilla model is not robust",
        (|| {
            let v = vanilla.as_ref().map_err(again)?;
            let cfg = RunConfig::preset("toy-vanilla")?.with("checkpoint", &v.summary.checkpoint)?;
            let start = Instant::now();
            let r = commands::eval(&cfg, &root.join("vanilla-eval"))?;
            let t = start.elapsed();
            Ok((
                r.robust_acc <= 0.05 && t.as_secs() <= 60,
                format!("robust {:.3} in {:.1}s (need <= 0.05, <= 60s)", r.robust_acc, secs(t)),
            ))
        })(),
    );

    report.check(
        "nearest-neighbor models are robust for seeds 0, 1, 2",
        (|| {
            let mut parts = vec![];
            let mut pass = true;
            for (seed, run) in nn.iter().enumerate() {
                let run = run.as_ref().map_err(again)?;
                pass &= run.summary.eval.robust_acc >= 0.5 && run.elapsed.as_secs() <= 180;
                parts.push(format!(
                    "seed {seed}: {:.3} in {:.1}s",
                    run.summary.eval.robust_acc,
                    secs(run.elapsed)
                ));
            }
            Ok((pass, format!("{} (need >= 0.5, <= 180s)", parts.join(", "))))
        })(),
    );

    report.check(
        "every representative scheme beats vanilla robustness",
        (|| {
            let base = vanilla.as_ref().map_err(again)?.summary.eval.robust_acc;
            let oi = train(root, "oi", &RunConfig::preset("toy-pag-oi")?)?;
            let cm = train(root, "cm", &RunConfig::preset("toy-pag-cm")?)?;
            let nn0 = nn[0].as_ref().map_err(again)?;
            let at = train(root, "at", &RunConfig::preset("toy-at")?)?;
            let rigd_cfg = RunConfig::preset("toy-rigd")?.with("teacher", &at.summary.checkpoint)?;
            let rigd = train(root, "rigd", &rigd_cfg)?;
            let rows = [
                ("one-image", oi.summary.eval.robust_acc),
                ("class-mean", cm.summary.eval.robust_acc),
                ("nearest-neighbor", nn0.summary.eval.robust_acc),
                ("rigd (teacher upper bound)", rigd.summary.eval.robust_acc),
            ];
            let pass = rows.iter().all(|(_, r)| *r > base);
            let list: Vec<String> = rows.iter().map(|(n, r)| format!("{n} {r:.3}")).collect();
            Ok((
                pass,
                format!(
                    "vanilla {base:.3}; {} (adversarial teacher {:.3})",
                    list.join(", "),
                    at.summary.eval.robust_acc
                ),
            ))
        })(),
    );

    report.check(
        "lambda sweep trades clean accuracy for robustness",
        (|| {
            let rows = commands::sweep_lambda(&RunConfig::preset("toy-pag-nn")?, &root.join("sweep"))?;
            ensure!(rows.len() >= 2, "sweep returned {} rows", rows.len());
            let (first, last) = (rows[0], rows[rows.len() - 1]);
            let monotone = rows.windows(2).all(|w| w[1].clean_acc <= w[0].clean_acc + 0.02);
            let list: Vec<String> = rows
                .iter()
                .map(|r| format!("{}: clean {:.3} robust {:.3}", r.lambda, r.clean_acc, r.robust_acc))
                .collect();
            Ok((last.robust_acc > first.robust_acc && monotone, list.join("; ")))
        })(),
    );

    report.check("image-format data end to end", images(root));
    report.check("gradients match finite differences", gradient_suite());
    report.check("projection invariants on 1000 random cases", projection_cases());
    report.check("every command is reproducible", reproducibility(root));

    report.check(
        "nearest-neighbor decision boundary sits farther from the data",
        (|| {
            let v = vanilla.as_ref().map_err(again)?;
            let n = nn[0].as_ref().map_err(again)?;
            let margin = |run: &Run, tag: &str| -> Result<f64> {
                let cfg = RunConfig::default().with("checkpoint", &run.summary.checkpoint)?;
                let m = commands::export_boundary(&cfg, &root.join(tag))?;
                Ok(m.overall.unwrap_or(f64::INFINITY))
            };
            let (mv, mn) = (margin(v, "vanilla-bd")?, margin(n, "nn-bd")?);
            Ok((mn > mv, format!("mean margin vanilla {mv:.2}, nearest-neighbor {mn:.2}")))
        })(),
    );

    if report.failures == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", report.failures);
        ExitCode::FAILURE
    }
}

trait With: Sized {
    fn with(self, key: &str, path: &Path) -> Result<Self>;
}

impl With for RunConfig {
    fn with(mut self, key: &str, path: &Path) -> Result<Self> {
        self.set(key, &path.display().to_string())?;
        Ok(self)
    }
}

fn images(root: &Path) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut bytes = Vec::with_capacity(500 * paglab::data::IMAGE_RECORD);
    for i in 0..500 {
        bytes.push((i % 10) as u8);
        bytes.extend((0..paglab::data::IMAGE_PIXELS).map(|_| rng.gen::<u8>()));
    }
    let file = root.join("data_batch_1.bin");
    fs::write(&file, &bytes)?;
    let cfg = preset(
        "images-pag-cm",
        &[
            ("dataset", &format!("images:{}", file.display())),
            ("hidden", "16"),
            ("epochs", "1"),
            ("eval_steps", "2"),
        ],
    )?;
    let out = root.join("images");
    let start = Instant::now();
    let summary = commands::train(&cfg, &out)?;
    let store = RepStore::load(&out.join("reps.bin"))?;
    let ds = commands::load_datasets(&cfg)?.train;
    ensure!(ds.len() == 500 && ds.dim() == 3072 && ds.classes() == 10, "unexpected dataset shape");
    store.check_matches(&ds)?;

    // class-mean invariants: one representative per class, all with the mean sample norm
    let mean_norm = (0..ds.len()).map(|i| l2_norm(ds.sample(i))).sum::<f64>() / ds.len() as f64;
    let mut worst = 0.0f64;
    for c in 0..10 {
        let rep = |i: usize| -> Vec<f64> { store.target(i, c).iter().zip(ds.sample(i)).map(|(g, x)| g + x).collect() };
        let r0 = rep(0);
        worst = worst.max((l2_norm(&r0) - mean_norm).abs() / mean_norm);
        for i in (1..ds.len()).step_by(37) {
            let ri = rep(i);
            worst = worst.max(r0.iter().zip(&ri).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let finite = summary.outcome.log.iter().all(|r| r.train_loss.is_finite());
    Ok((
        finite && worst < 1e-9,
        format!(
            "500 records, loss {:.4}, clean {:.3}, robust {:.3}, invariant error {worst:.1e}, {:.1}s",
            summary.outcome.log[0].train_loss,
            summary.eval.clean_acc,
            summary.eval.robust_acc,
            secs(start.elapsed())
        ),
    ))
}

fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-4;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Input gradients, parameter gradients and the double-backprop objective of
/// small networks against central differences.
fn gradient_suite() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..100 {
        let model = Mlp::init(&[2, 4, 2], seed)?;
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y = (seed % 2) as usize;
        let cfg = PagLossConfig::new(0.6, 1e-8)?;

        let loss_at = |m: &Mlp, x: &[f64]| -> Result<f64> {
            let tape = Tape::new();
            let params = m.bind_constant(&tape);
            let xv = tape.leaf("x", Tensor::vector(x.to_vec()))?;
            let t: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
            Ok(tape.scalar(pag_total_loss(&tape, m, &params, xv, y, &t, &cfg)?.total)?)
        };

        // parameters, through the input-gradient terms
        let tape = Tape::new();
        let params = model.bind(&tape)?;
        let xv = tape.leaf("x", Tensor::vector(x.clone()))?;
        let t: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
        let total = pag_total_loss(&tape, &model, &params, xv, y, &t, &cfg)?.total;
        let analytic: Vec<f64> = tape
            .grad_values(total, &params.ordered())?
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect();
        let numeric = fd(
            |theta| {
                let mut m = model.clone();
                m.set_flat_params(theta).unwrap();
                loss_at(&m, &x).unwrap()
            },
            &model.flat_params(),
        );
        worst = worst.max(rel(&analytic, &numeric));

        // input gradient of the cross-entropy
        let analytic = attack::loss_input_gradient(&model, &x, y)?;
        let numeric = fd(
            |p| {
                let z = model.forward(p).unwrap();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
            },
            &x,
        );
        worst = worst.max(rel(&analytic, &numeric));
        cases += 1;
    }
    let t = start.elapsed();
    Ok((
        worst <= 1e-3 && t.as_secs() <= 60,
        format!("{cases} networks, max relative error {worst:.2e}, {:.1}s (need <= 1e-3, <= 60s)", secs(t)),
    ))
}

fn projection_cases() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for i in 0..1000 {
        let norm = if i % 2 == 0 { NormKind::L2 } else { NormKind::Linf };
        let eps = rng.gen_range(0.01..10.0);
        let t = ThreatModel::new(norm, eps, None)?;
        let n = rng.gen_range(1..10);
        let scale = rng.gen_range(0.01..30.0);
        let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let p = project(&delta, &t);
        let inside = |v: &[f64]| match norm {
            NormKind::L2 => l2_norm(v) <= eps * (1.0 + 1e-12),
            NormKind::Linf => v.iter().all(|d| d.abs() <= eps),
        };
        let again = project(&p, &t);
        let idempotent = again.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        let identity = !inside(&delta) || p == delta;
        if !(inside(&p) && idempotent && identity) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} of 1000 cases violate inside-ball, idempotence or identity")))
}

fn run_cli(args: &[String]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_paglab")).args(args).output()?;
    ensure!(
        out.status.success(),
        "paglab {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![];
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        files.push((entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?));
    }
    files.sort();
    Ok(files)
}

fn reproducibility(root: &Path) -> Result<(bool, String)> {
    let base = root.join("repro");
    let quick = [
        "--set", "toy_train_per_mode=100", "--set", "toy_test_per_mode=20", "--set", "epochs=5", "--set",
        "pool=20", "--set", "grid_size=60,60", "--set", "lambdas=0,0.5",
    ];
    let teacher = base.join("teacher");
    let ckpt = teacher.join("checkpoint.bin");
    let mut setup: Vec<String> = ["train", "--preset", "toy-at", "--out"].iter().map(|s| s.to_string()).collect();
    setup.push(teacher.display().to_string());
    setup.extend(quick.iter().map(|s| s.to_string()));
    run_cli(&setup)?;

    let commands: Vec<(&str, Vec<String>)> = vec![
        ("make-reps", vec!["make-reps".into(), "--scheme".into(), "nearest-neighbor".into()]),
        ("train", vec!["train".into(), "--preset".into(), "toy-pag-nn".into()]),
        (
            "train-rigd",
            vec![
                "train".into(),
                "--preset".into(),
                "toy-rigd".into(),
                "--teacher".into(),
                ckpt.display().to_string(),
            ],
        ),
        ("eval", vec!["eval".into(), "--checkpoint".into(), ckpt.display().to_string()]),
        ("export-boundary", vec!["export-boundary".into(), "--checkpoint".into(), ckpt.display().to_string()]),
        ("sweep-lambda", vec!["sweep-lambda".into(), "--preset".into(), "toy-pag-nn".into()]),
    ];
    let mut differing = vec![];
    let mut files = 0;
    for (name, args) in &commands {
        let mut outputs = vec![];
        for rep in 0..2 {
            let out = base.join(format!("{name}-{rep}"));
            let mut full = args.clone();
            full.push("--out".into());
            full.push(out.display().to_string());
            full.extend(quick.iter().map(|s| s.to_string()));
            run_cli(&full)?;
            outputs.push(dir_bytes(&out)?);
        }
        files += outputs[0].len();
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            differing.push(*name);
        }
    }
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} commands, {files} files byte-identical across reruns", commands.len())
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    ))
}
