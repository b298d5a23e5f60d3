//! Datasets: the two-class toy generator, CSV ingestion and 10-class
//! 32x32x3 binary image batches.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Mode centers (first coordinate) of the two toy classes.
pub const TOY_CLASS0_CENTERS: [f64; 3] = [-50.0, -10.0, 30.0];
pub const TOY_CLASS1_CENTERS: [f64; 3] = [-30.0, 10.0, 50.0];

pub const IMAGE_PIXELS: usize = 32 * 32 * 3;
pub const IMAGE_RECORD: usize = IMAGE_PIXELS + 1;
pub const IMAGE_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labeled samples stored as a flat row-major `N x M` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Format(format!(
                "{} feature values do not form {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ClassOutOfRange { class: bad, classes });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Indices of the samples labeled `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Fails with [`Error::EmptyClass`] naming the first class without samples.
    pub fn require_all_classes(&self) -> Result<()> {
        let mut seen = vec![false; self.classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        match seen.iter().position(|s| !s) {
            Some(c) => Err(Error::EmptyClass(c)),
            None => Ok(()),
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.features[..n * self.dim].to_vec(),
            self.labels[..n].to_vec(),
            self.dim,
            self.classes,
            self.split,
            self.provenance.clone(),
        )
    }

    /// SHA-256 over dimensions, labels and feature bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Writes `x0,...,x{M-1},label` rows with a header line.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for i in 0..self.len() {
            for v in self.sample(i) {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Per-mode sample counts for the toy generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToySizes {
    pub train_per_mode: usize,
    pub test_per_mode: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        Self {
            train_per_mode: 1000,
            test_per_mode: 100,
        }
    }
}

/// Two classes with three Gaussian modes each on the line `x2 = 2 x1`.
///
/// Each mode draws `x1 ~ N(c, 1)`. Train and test use independent streams
/// derived from `seed`.
pub fn toy_generate(seed: u64, sizes: ToySizes) -> Result<(Dataset, Dataset)> {
    if sizes.train_per_mode == 0 || sizes.test_per_mode == 0 {
        return Err(Error::Config("toy per-mode counts must be at least 1".into()));
    }
    let train = toy_split(seed, sizes.train_per_mode, Split::Train)?;
    let test = toy_split(seed, sizes.test_per_mode, Split::Test)?;
    Ok((train, test))
}

fn toy_split(seed: u64, per_mode: usize, split: Split) -> Result<Dataset> {
    let stream_id = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = rng::stream(seed, &[0x70_79, stream_id]);
    let mut features = Vec::with_capacity(per_mode * 12);
    let mut labels = Vec::with_capacity(per_mode * 6);
    for (class, centers) in [TOY_CLASS0_CENTERS, TOY_CLASS1_CENTERS].iter().enumerate() {
        for &c in centers {
            let normal = Normal::new(c, 1.0).expect("unit variance is valid");
            for _ in 0..per_mode {
                let x1: f64 = normal.sample(&mut rng);
                features.push(x1);
                features.push(2.0 * x1);
                labels.push(class);
            }
        }
    }
    Dataset::new(
        features,
        labels,
        2,
        2,
        split,
        format!("toy(seed={seed},per_mode={per_mode},split={split})"),
    )
}

/// Reads rows of `M` floats followed by an integer label.
///
/// A first line that does not parse as numbers is treated as a header. The
/// dimension comes from the first data row. With `classes = None` the class
/// count is one more than the largest label.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let numeric = fields.iter().all(|f| f.parse::<f64>().is_ok());
        if !numeric && dim.is_none() && features.is_empty() && idx == 0 {
            continue;
        }
        if fields.len() < 2 {
            return Err(parse_err(line_no, "need at least one feature and a label".into()));
        }
        let row_dim = fields.len() - 1;
        match dim {
            None => dim = Some(row_dim),
            Some(d) if d != row_dim => {
                return Err(parse_err(line_no, format!("expected {} fields, found {}", d + 1, fields.len())))
            }
            _ => {}
        }
        for f in &fields[..row_dim] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line_no, format!("non-numeric field `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite value `{f}`")));
            }
            features.push(v);
        }
        let label_field = fields[row_dim];
        let label: usize = label_field
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid label `{label_field}`")))?;
        if let Some(c) = classes {
            if label >= c {
                return Err(parse_err(line_no, format!("label {label} out of range for {c} classes")));
            }
        }
        labels.push(label);
    }
    let dim = dim.ok_or(Error::EmptyDataset)?;
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        features,
        labels,
        dim,
        classes,
        Split::Train,
        format!("csv({})", path.display()),
    )
}

/// Reads fixed 3073-byte records: one label byte, then 3072 pixel bytes as
/// R, G, B planes. Pixels are scaled to `[0, 1]`.
pub fn load_image_batches(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_image_batches(&bytes, limit, &path.display().to_string())
}

pub fn parse_image_batches(bytes: &[u8], limit: Option<usize>, source: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(IMAGE_RECORD) {
        return Err(Error::Format(format!(
            "{source}: truncated record ({} bytes is not a multiple of {IMAGE_RECORD})",
            bytes.len()
        )));
    }
    let available = bytes.len() / IMAGE_RECORD;
    let n = limit.map_or(available, |l| l.min(available));
    let mut features = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(IMAGE_RECORD).take(n) {
        let label = record[0] as usize;
        if label >= IMAGE_CLASSES {
            return Err(Error::ClassOutOfRange {
                class: label,
                classes: IMAGE_CLASSES,
            });
        }
        labels.push(label);
        features.extend(record[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Dataset::new(
        features,
        labels,
        IMAGE_PIXELS,
        IMAGE_CLASSES,
        Split::Train,
        format!("image-batches({source},n={n})"),
    )
}
