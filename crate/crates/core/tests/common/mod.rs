#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use transfer_risk::matcore::{Matrix, RngStream};
use transfer_risk::pipeline::RunConfig;
use transfer_risk::similarity::Estimator;
use transfer_risk::zoo::{NetworkDescriptor, TensorShape, TrainedModel};

pub fn example_config(out: &Path) -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/example.conf");
    let mut cfg = RunConfig::load(path).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

/// Every file under `root`, keyed by its relative path.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// File contents with the report timestamp removed.
pub fn without_timestamp(name: &Path, bytes: &[u8]) -> Vec<u8> {
    if name != Path::new("report.json") {
        return bytes.to_vec();
    }
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v.as_object_mut().unwrap().remove("generated_at");
    serde_json::to_vec(&v).unwrap()
}

/// Relative paths whose contents differ (ignoring the report timestamp).
pub fn tree_diff(a: &Path, b: &Path) -> Vec<PathBuf> {
    let (ta, tb) = (tree(a), tree(b));
    let mut diff: Vec<PathBuf> = ta.keys().filter(|k| !tb.contains_key(*k)).cloned().collect();
    for (k, va) in &ta {
        if let Some(vb) = tb.get(k) {
            if without_timestamp(k, va) != without_timestamp(k, vb) {
                diff.push(k.clone());
            }
        }
    }
    diff.extend(tb.keys().filter(|k| !ta.contains_key(*k)).cloned());
    diff
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub fn orthogonal(d: usize, rng: &mut RngStream) -> Matrix {
    let g = rng.normal_matrix(d, d);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| g.get(i, j)).collect();
        for u in &cols {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= p * ui;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.iter().map(|a| a / norm).collect());
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i]).unwrap()
}

/// HSIC straight from the defining sums over index tuples.
pub fn brute_hsic(k: &Matrix, l: &Matrix, est: Estimator) -> f64 {
    let n = k.rows();
    match est {
        Estimator::Biased => {
            let h = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for a in 0..n {
                        for b in 0..n {
                            // tr(K H L H) = sum K_ij H_ja L_ab H_bi
                            total += k.get(i, j) * h(j, a) * l.get(a, b) * h(b, i);
                        }
                    }
                }
            }
            total / ((n - 1) * (n - 1)) as f64
        }
        Estimator::Unbiased => {
            let kt = |i: usize, j: usize| if i == j { 0.0 } else { k.get(i, j) };
            let lt = |i: usize, j: usize| if i == j { 0.0 } else { l.get(i, j) };
            let mut tr = 0.0;
            let (mut sk, mut sl, mut cross) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    tr += kt(i, j) * lt(j, i);
                    sk += kt(i, j);
                    sl += lt(i, j);
                }
            }
            for i in 0..n {
                for j in 0..n {
                    for a in 0..n {
                        cross += kt(i, j) * lt(j, a);
                    }
                }
            }
            let n = n as f64;
            (tr + sk * sl / ((n - 1.0) * (n - 2.0)) - 2.0 * cross / (n - 2.0)) / (n * (n - 3.0))
        }
    }
}

pub fn random_inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.uniform()).unwrap()
}

/// Central differences of each example's own loss.
pub fn finite_difference(model: &TrainedModel, x: &Matrix, labels: &[usize], h: f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + h);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - h);
            let lp = model.loss(&plus, labels).unwrap()[i];
            let lm = model.loss(&minus, labels).unwrap()[i];
            g.set(i, j, (lp - lm) / (2.0 * h));
        }
    }
    g
}

pub fn small_networks() -> Vec<NetworkDescriptor> {
    let img = TensorShape::Image {
        channels: 1,
        height: 6,
        width: 6,
    };
    let img2 = TensorShape::Image {
        channels: 2,
        height: 5,
        width: 5,
    };
    vec![
        NetworkDescriptor::mlp("m0", 4, &[5], 2, 0).unwrap(),
        NetworkDescriptor::mlp("m1", 6, &[8, 4], 3, 1).unwrap(),
        NetworkDescriptor::mlp("m2", 3, &[3, 3, 3], 2, 2).unwrap(),
        NetworkDescriptor::mlp("m3", 8, &[16], 4, 3).unwrap(),
        NetworkDescriptor::mlp("m4", 5, &[2], 5, 4).unwrap(),
        NetworkDescriptor::cnn("c0", img, &[(2, 3)], &[6], 3, 5).unwrap(),
        NetworkDescriptor::cnn("c1", img, &[(3, 2), (2, 2)], &[], 2, 6).unwrap(),
        NetworkDescriptor::cnn("c2", img2, &[(2, 3)], &[4], 2, 7).unwrap(),
        NetworkDescriptor::cnn("c3", img, &[(1, 5)], &[3], 4, 8).unwrap(),
        NetworkDescriptor::cnn("c4", img2, &[(4, 2)], &[5, 5], 3, 9).unwrap(),
    ]
}
