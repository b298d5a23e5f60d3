mod common;

use common::*;
use paglab::autodiff::Tape;
use paglab::model::{self, argmax, Metadata, Mlp};
use paglab::Tensor;
use rand::Rng;

/// Straightforward loops over the layer matrices.
fn reference_logits(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = m.layers().len() - 1;
    for (i, layer) in m.layers().iter().enumerate() {
        let (rows, cols) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let w = layer.weight.data();
        let mut next = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = layer.bias.data()[r];
            for c in 0..cols {
                acc += w[r * cols + c] * h[c];
            }
            next[r] = if i == last { acc } else { acc.max(0.0) };
        }
        h = next;
    }
    h
}

fn tape_logits(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let tape = Tape::new();
    let params = m.bind(&tape).unwrap();
    let xv = tape.constant(Tensor::vector(x.to_vec()));
    tape.value(m.logits(&tape, &params, xv).unwrap()).unwrap().into_data()
}

#[test]
fn logits_match_reference_loops() {
    let mut r = rng(1);
    for (k, dims) in [[3usize, 5, 4].as_slice(), &[2, 8, 8, 2], &[6, 3]].iter().enumerate() {
        let m = Mlp::init(dims, k as u64).unwrap();
        for _ in 0..20 {
            let x = uniform(&mut r, dims[0], -4.0, 4.0);
            let want = reference_logits(&m, &x);
            for got in [tape_logits(&m, &x), m.forward(&x).unwrap()] {
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }
}

#[test]
fn bias_free_network_is_positively_homogeneous() {
    let mut r = rng(2);
    let mut m = Mlp::init(&[3, 6, 3], 4).unwrap();
    for l in m.layers_mut() {
        l.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
    }
    for _ in 0..20 {
        let x = uniform(&mut r, 3, -2.0, 2.0);
        let c = r.gen_range(0.1..10.0);
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&scaled).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u * c - v).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn shifting_all_output_biases_keeps_predictions() {
    let mut r = rng(3);
    let m = Mlp::init(&[2, 5, 3], 9).unwrap();
    let mut shifted = m.clone();
    let last = shifted.layers().len() - 1;
    shifted.layers_mut()[last].bias.data_mut().iter_mut().for_each(|b| *b += 3.5);
    for _ in 0..50 {
        let x = uniform(&mut r, 2, -5.0, 5.0);
        assert_eq!(m.predict(&x).unwrap(), shifted.predict(&x).unwrap());
    }
}

#[test]
fn argmax_prefers_first_maximum() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[2.0]), 0);
}

#[test]
fn wrong_input_dimension_is_an_error() {
    let m = Mlp::init(&[3, 2], 0).unwrap();
    assert!(m.forward(&[1.0, 2.0]).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut r = rng(4);
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        let dims = [r.gen_range(1..5), r.gen_range(1..7), r.gen_range(2..4)];
        let m = Mlp::init(&dims, seed).unwrap();
        let mut meta = Metadata::new();
        meta.insert("seed".into(), seed.to_string());
        meta.insert("note".into(), "quotes \" and\nnewlines".into());
        let path = dir.path().join(format!("m{seed}.bin"));
        model::save(&m, &meta, &path).unwrap();
        let (back, back_meta) = model::load(&path).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.dims(), m.dims());
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(back.flat_params()), bits(m.flat_params()));
        for _ in 0..10 {
            let x = uniform(&mut r, dims[0], -3.0, 3.0);
            assert_eq!(bits(back.forward(&x).unwrap()), bits(m.forward(&x).unwrap()));
        }
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = Mlp::init(&[2, 3, 2], 0).unwrap();
    let bytes = model::encode_checkpoint(&m, &Metadata::new()).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(model::decode_checkpoint(&bad_magic).is_err());

    let mut bad_version = bytes.clone();
    bad_version[8..12].copy_from_slice(&7u32.to_le_bytes());
    let err = model::decode_checkpoint(&bad_version).unwrap_err().to_string();
    assert!(err.contains("unsupported version"), "{err}");

    assert!(model::decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn init_is_seeded() {
    let a = Mlp::init(&[2, 16, 2], 7).unwrap();
    let b = Mlp::init(&[2, 16, 2], 7).unwrap();
    let c = Mlp::init(&[2, 16, 2], 8).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
    assert_ne!(a.flat_params(), c.flat_params());
    let bound = 1.0 / 2f64.sqrt();
    assert!(a.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
}
