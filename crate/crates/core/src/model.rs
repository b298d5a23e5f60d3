//! Fully-connected ReLU classifiers and their checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "PAGLAB01" | u32 version | u32 dim-count | dim-count x u32 dims
//!   | per layer: weight [out x in] f64 row-major, then bias [out] f64
//!   | u32 metadata length | metadata (UTF-8 JSON object of strings)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PAGLAB01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Free-form training metadata stored alongside the weights.
pub type Metadata = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// A multilayer perceptron with ReLU between layers and raw logits out.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Parameter variables of an [`Mlp`] on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundParams {
    /// Weights and biases interleaved in layer order, matching [`Mlp::flat_params`].
    pub fn ordered(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

impl Mlp {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = rng::stream(seed, &[0x1_417]);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Tensor::from_parts(vec![fan_out, fan_in], data),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::InvalidDims(Vec::new()))?;
        let mut dims = vec![first.weight.shape().get(1).copied().unwrap_or(0)];
        for layer in &layers {
            let ws = layer.weight.shape();
            if ws.len() != 2 || ws[1] != *dims.last().unwrap() || layer.bias.shape() != [ws[0]] {
                return Err(Error::Format(format!(
                    "layer weight {:?} / bias {:?} inconsistent with input dim {}",
                    ws,
                    layer.bias.shape(),
                    dims.last().unwrap()
                )));
            }
            dims.push(ws[0]);
        }
        validate_dims(&dims)?;
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// All parameters as one vector: `w0, b0, w1, b1, ...`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.numel();
                t.data_mut().copy_from_slice(&params[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Registers every parameter as a named differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> Result<BoundParams> {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            weights.push(tape.leaf(&format!("w{i}"), l.weight.clone())?);
            biases.push(tape.leaf(&format!("b{i}"), l.bias.clone())?);
        }
        Ok(BoundParams { weights, biases })
    }

    /// Places the parameters on the tape as constants.
    pub fn bind_constant(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            weights: self.layers.iter().map(|l| tape.constant(l.weight.clone())).collect(),
            biases: self.layers.iter().map(|l| tape.constant(l.bias.clone())).collect(),
        }
    }

    /// Pre-softmax scores for a rank-1 input recorded on `tape`.
    pub fn logits(&self, tape: &Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        if shape != [self.input_dim()] {
            return Err(Error::InputDim {
                expected: self.input_dim(),
                got: shape.iter().product(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            let pre = tape.add(tape.matmul(params.weights[i], h)?, params.biases[i])?;
            h = if i == last { pre } else { tape.relu(pre)? };
        }
        Ok(h)
    }

    /// Direct evaluation without a tape.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::InputDim {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let w = l.weight.data();
            let cols = h.len();
            h = l
                .bias
                .data()
                .iter()
                .enumerate()
                .map(|(r, &b)| {
                    let z = b + w[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(&h)
                        .map(|(a, x)| a * x)
                        .sum::<f64>();
                    if i == last || z > 0.0 {
                        z
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        Ok(h)
    }

    /// Index of the largest logit; ties resolve to the lowest class.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// SHA-256 of the checkpoint encoding without metadata.
    pub fn content_hash(&self) -> String {
        let bytes = encode_checkpoint(self, &Metadata::new()).expect("empty metadata encodes");
        crate::data::hex(&Sha256::digest(bytes))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn encode_checkpoint(model: &Mlp, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.dims.len() as u32).to_le_bytes());
    for &d in &model.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for l in &model.layers {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_string(metadata).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated {}: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("invalid UTF-8 in {}", self.what)))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {}",
                self.bytes.len() - self.pos,
                self.what
            )));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Mlp, Metadata)> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let dims = (0..count)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    validate_dims(&dims)?;
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let weight = Tensor::from_parts(vec![w[1], w[0]], r.f64s(w[0] * w[1])?);
        let bias = Tensor::from_parts(vec![w[1]], r.f64s(w[1])?);
        layers.push(Layer { weight, bias });
    }
    let meta_text = r.string()?;
    r.finish()?;
    let metadata: Metadata =
        serde_json::from_str(&meta_text).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    Ok((Mlp { dims, layers }, metadata))
}

pub fn save(model: &Mlp, metadata: &Metadata, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Mlp, Metadata)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_determinism() {
        let m = Mlp::init(&[2, 32, 2], 0).unwrap();
        assert_eq!(m.layers()[0].weight.shape(), &[32, 2]);
        assert_eq!(m.layers()[1].weight.shape(), &[2, 32]);
        assert!(m.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let bound = 1.0 / 2f64.sqrt();
        assert!(m.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
        assert_eq!(m, Mlp::init(&[2, 32, 2], 0).unwrap());
        assert_ne!(m, Mlp::init(&[2, 32, 2], 1).unwrap());
    }

    #[test]
    fn init_rejects_degenerate_dims() {
        assert!(matches!(Mlp::init(&[5], 0), Err(Error::InvalidDims(_))));
        assert!(matches!(Mlp::init(&[2, 0, 2], 0), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let layer = Layer {
            weight: Tensor::zeros(&[3, 2]),
            bias: Tensor::vector(vec![0.5, -1.0, 2.0]),
        };
        let m = Mlp::from_layers(vec![layer]).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape).unwrap();
        let x = tape.constant(Tensor::vector(vec![7.0, -3.0]));
        let z = m.logits(&tape, &p, x).unwrap();
        assert_eq!(tape.value(z).unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let layer = Layer {
            weight: Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap(),
            bias: Tensor::vector(vec![0.25, 1.0]),
        };
        let m = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(m.forward(&[2.0, -4.0]).unwrap(), vec![2.0 - 8.0 + 0.25, -6.0 - 2.0 + 1.0]);
    }

    #[test]
    fn logits_reject_wrong_dim() {
        let m = Mlp::init(&[2, 4, 2], 0).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape).unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(m.logits(&tape, &p, x), Err(Error::InputDim { expected: 2, got: 3 })));
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_version_and_truncation() {
        let m = Mlp::init(&[2, 3, 2], 5).unwrap();
        let bytes = encode_checkpoint(&m, &Metadata::new()).unwrap();
        let (back, _) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));

        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&0u32.to_le_bytes());
        let err = decode_checkpoint(&old).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 0, .. }));
        assert!(err.to_string().contains("unsupported version"));

        assert!(decode_checkpoint(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut m = Mlp::init(&[3, 4, 2], 2).unwrap();
        let mut p = m.flat_params();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        p[0] = 42.0;
        m.set_flat_params(&p).unwrap();
        assert_eq!(m.layers()[0].weight.data()[0], 42.0);
    }
}
