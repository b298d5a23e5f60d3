//! Precomputed target directions `g(x, c)` for every training sample and
//! class.
//!
//! Representative schemes set `g(x, c) = r_c(x) - x` for a point `r_c(x)`
//! standing in for class `c`. The distillation scheme copies a teacher
//! model's input-gradient of logit `c` at `x`.
//!
//! Store layout (integers little-endian):
//!
//! ```text
//! "PAGREP01" | u32 N | u32 C | u32 M | u32 len, scheme tag
//!   | u32 len, parameter text (key=value lines)
//!   | N*C*M f64 targets in (sample, class, dim) order
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mlp, Reader};
use crate::rng;
use crate::tensor::Tensor;

pub const STORE_MAGIC: &[u8; 8] = b"PAGREP01";
pub const DEFAULT_POOL_SIZE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    OneImage,
    ClassMean,
    NearestNeighbor,
    Rigd,
}

impl Scheme {
    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::OneImage => "one-image",
            Scheme::ClassMean => "class-mean",
            Scheme::NearestNeighbor => "nearest-neighbor",
            Scheme::Rigd => "rigd",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-image" | "oi" => Ok(Scheme::OneImage),
            "class-mean" | "cm" => Ok(Scheme::ClassMean),
            "nearest-neighbor" | "nn" => Ok(Scheme::NearestNeighbor),
            "rigd" => Ok(Scheme::Rigd),
            other => Err(Error::Config(format!(
                "unknown scheme `{other}` (expected one-image, class-mean, nearest-neighbor or rigd)"
            ))),
        }
    }
}

/// Target directions for every `(sample, class)` pair of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct RepStore {
    samples: usize,
    classes: usize,
    dim: usize,
    targets: Vec<f64>,
    pub scheme: Scheme,
    /// Scheme parameters plus the dataset hash, written into the header.
    pub params: BTreeMap<String, String>,
}

impl RepStore {
    fn new(dataset: &Dataset, scheme: Scheme, targets: Vec<f64>, mut params: BTreeMap<String, String>) -> Self {
        params.insert("dataset".into(), dataset.content_hash());
        Self {
            samples: dataset.len(),
            classes: dataset.classes(),
            dim: dataset.dim(),
            targets,
            scheme,
            params,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self, sample: usize, class: usize) -> &[f64] {
        let start = (sample * self.classes + class) * self.dim;
        &self.targets[start..start + self.dim]
    }

    /// Targets of one sample, one slice per class.
    pub fn targets_for(&self, sample: usize) -> Vec<&[f64]> {
        (0..self.classes).map(|c| self.target(sample, c)).collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.targets
    }

    /// Checks the store was built for `dataset`.
    pub fn check_matches(&self, dataset: &Dataset) -> Result<()> {
        let mismatch = |what: &str, store: usize, data: usize| {
            Err(Error::StoreMismatch(format!("{what}: store has {store}, dataset has {data}")))
        };
        if self.samples != dataset.len() {
            return mismatch("sample count", self.samples, dataset.len());
        }
        if self.classes != dataset.classes() {
            return mismatch("class count", self.classes, dataset.classes());
        }
        if self.dim != dataset.dim() {
            return mismatch("dimension", self.dim, dataset.dim());
        }
        if let Some(h) = self.params.get("dataset") {
            if *h != dataset.content_hash() {
                return Err(Error::StoreMismatch("dataset content hash differs".into()));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.targets.len() * 8);
        out.extend_from_slice(STORE_MAGIC);
        for n in [self.samples, self.classes, self.dim] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for text in [self.scheme.tag().to_string(), self.param_text()] {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        for v in &self.targets {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "rep store");
        if r.take(8)? != STORE_MAGIC {
            return Err(Error::Format("not a rep store: bad magic bytes".into()));
        }
        let samples = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let scheme: Scheme = r.string()?.parse()?;
        let params = parse_params(&r.string()?)?;
        let targets = r.f64s(samples * classes * dim)?;
        r.finish()?;
        Ok(Self {
            samples,
            classes,
            dim,
            targets,
            scheme,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Loads a store and verifies it belongs to `dataset`.
    pub fn load_for(path: &Path, dataset: &Dataset) -> Result<Self> {
        let store = Self::load(path)?;
        store.check_matches(dataset)?;
        Ok(store)
    }

    fn param_text(&self) -> String {
        self.params.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn parse_params(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("malformed store parameter line `{l}`")))
        })
        .collect()
}

fn offsets_from(dataset: &Dataset, representatives: &[Vec<f64>]) -> Vec<f64> {
    let mut targets = Vec::with_capacity(dataset.len() * dataset.classes() * dataset.dim());
    for i in 0..dataset.len() {
        let x = dataset.sample(i);
        for r in representatives {
            targets.extend(r.iter().zip(x).map(|(a, b)| a - b));
        }
    }
    targets
}

/// One uniformly chosen training sample per class as a global representative.
pub fn one_image(dataset: &Dataset, seed: u64) -> Result<RepStore> {
    dataset.require_all_classes()?;
    let mut rng = rng::stream(seed, &[0x01]);
    let mut chosen = Vec::with_capacity(dataset.classes());
    let representatives: Vec<Vec<f64>> = (0..dataset.classes())
        .map(|c| {
            let members = dataset.class_indices(c);
            let pick = members[rng.gen_range(0..members.len())];
            chosen.push(pick.to_string());
            dataset.sample(pick).to_vec()
        })
        .collect();
    let mut params = BTreeMap::new();
    params.insert("seed".into(), seed.to_string());
    params.insert("representatives".into(), chosen.join(","));
    Ok(RepStore::new(
        dataset,
        Scheme::OneImage,
        offsets_from(dataset, &representatives),
        params,
    ))
}

/// Mean norm of the samples.
pub fn mean_sample_norm(dataset: &Dataset) -> f64 {
    (0..dataset.len())
        .map(|i| crate::attack::l2_norm(dataset.sample(i)))
        .sum::<f64>()
        / dataset.len() as f64
}

/// Unscaled per-class means.
pub fn class_means(dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset.require_all_classes()?;
    let mut sums = vec![vec![0.0; dataset.dim()]; dataset.classes()];
    let mut counts = vec![0usize; dataset.classes()];
    for i in 0..dataset.len() {
        let c = dataset.label(i);
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(dataset.sample(i)) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect())
}

/// Class means rescaled to the average training-sample norm.
pub fn class_mean(dataset: &Dataset) -> Result<RepStore> {
    let target_norm = mean_sample_norm(dataset);
    let representatives: Vec<Vec<f64>> = class_means(dataset)?
        .into_iter()
        .map(|m| {
            let n = crate::attack::l2_norm(&m);
            let scale = if n > 0.0 { target_norm / n } else { 1.0 };
            m.into_iter().map(|v| v * scale).collect()
        })
        .collect();
    let mut params = BTreeMap::new();
    params.insert("norm".into(), format!("{target_norm:?}"));
    Ok(RepStore::new(
        dataset,
        Scheme::ClassMean,
        offsets_from(dataset, &representatives),
        params,
    ))
}

/// Per-class pools of `pool_size` indices drawn i.i.d. (with replacement).
pub fn sample_pools(dataset: &Dataset, pool_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if pool_size == 0 {
        return Err(Error::Config("pool size must be at least 1".into()));
    }
    dataset.require_all_classes()?;
    let mut rng = rng::stream(seed, &[0x22]);
    Ok((0..dataset.classes())
        .map(|c| {
            let members = dataset.class_indices(c);
            (0..pool_size)
                .map(|_| members[rng.gen_range(0..members.len())])
                .collect()
        })
        .collect())
}

/// Nearest pool member to `x` by L2 distance, skipping members equal to `x`.
/// Ties go to the lowest dataset index.
pub fn nearest_in_pool(dataset: &Dataset, pool: &[usize], x: &[f64]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &j in pool {
        let cand = dataset.sample(j);
        if cand == x {
            continue;
        }
        let d: f64 = cand.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let better = match best {
            None => true,
            Some((bd, bj)) => d < bd || (d == bd && j < bj),
        };
        if better {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Each sample's nearest neighbor within a fixed random pool of each class.
pub fn nearest_neighbor(dataset: &Dataset, pool_size: usize, seed: u64) -> Result<RepStore> {
    let pools = sample_pools(dataset, pool_size, seed)?;
    let mut targets = Vec::with_capacity(dataset.len() * dataset.classes() * dataset.dim());
    for i in 0..dataset.len() {
        let x = dataset.sample(i);
        for (c, pool) in pools.iter().enumerate() {
            let j = nearest_in_pool(dataset, pool, x).ok_or(Error::EmptyPool { sample: i, class: c })?;
            targets.extend(dataset.sample(j).iter().zip(x).map(|(a, b)| a - b));
        }
    }
    let mut params = BTreeMap::new();
    params.insert("pool".into(), pool_size.to_string());
    params.insert("seed".into(), seed.to_string());
    Ok(RepStore::new(dataset, Scheme::NearestNeighbor, targets, params))
}

/// Input-gradient of every class logit of `model` at `x`.
pub fn logit_input_gradients(model: &Mlp, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let params = model.bind_constant(&tape);
    let xv = tape.leaf("x", Tensor::vector(x.to_vec()))?;
    let logits = model.logits(&tape, &params, xv)?;
    (0..model.classes())
        .map(|c| {
            let z = tape.index(logits, c)?;
            Ok(tape.grad_values(z, &[xv])?.remove(0).into_data())
        })
        .collect()
}

/// Teacher input-gradients as targets.
pub fn rigd(dataset: &Dataset, teacher: &Mlp) -> Result<RepStore> {
    if teacher.input_dim() != dataset.dim() {
        return Err(Error::InputDim {
            expected: teacher.input_dim(),
            got: dataset.dim(),
        });
    }
    if teacher.classes() != dataset.classes() {
        return Err(Error::StoreMismatch(format!(
            "teacher has {} classes, dataset has {}",
            teacher.classes(),
            dataset.classes()
        )));
    }
    let mut targets = Vec::with_capacity(dataset.len() * dataset.classes() * dataset.dim());
    for i in 0..dataset.len() {
        for g in logit_input_gradients(teacher, dataset.sample(i))? {
            targets.extend(g);
        }
    }
    let mut params = BTreeMap::new();
    params.insert("teacher".into(), teacher.content_hash());
    Ok(RepStore::new(dataset, Scheme::Rigd, targets, params))
}
