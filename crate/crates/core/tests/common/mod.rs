//! Helpers shared by integration test targets.
#![allow(dead_code)]

use causald_core::distill::{FdaHead, TeacherOutputs};
use causald_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_outputs(rng: &mut ChaCha8Rng, k: usize, n: usize, dm: usize, d: usize) -> TeacherOutputs {
    TeacherOutputs {
        mediators: (0..k).map(|_| random_tensor(rng, n, dm, 1.0)).collect(),
        targets: (0..k).map(|_| random_tensor(rng, n, d, 1.0)).collect(),
    }
}

pub fn param(head: &FdaHead, name: &str) -> Tensor {
    head.store.get(head.store.find(name).unwrap()).clone()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `v (1 x r) * m (r x c)`.
pub fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols())
        .map(|c| v.iter().enumerate().map(|(r, x)| x * m.row(r)[c]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar loop over teachers and in-batch samples.
pub fn brute_force_label(head: &FdaHead, t: &TeacherOutputs, js: &Tensor, student: &Tensor) -> Vec<f64> {
    let (w1, w2) = (param(head, "fda.w1"), param(head, "fda.w2"));
    let (a, b, c) = (param(head, "fda.psi.a"), param(head, "fda.psi.b"), param(head, "fda.psi.c"));
    let b1 = param(head, "fda.psi.b1");
    let ow = param(head, "fda.psi.out_w");
    let ob = param(head, "fda.psi.out_b").item();
    let n = js.rows();
    let k = t.mediators.len();
    (0..n)
        .map(|i| {
            let q = vecmat(student.row(i), &w2);
            let logits: Vec<f64> = (0..k).map(|kk| dot(&vecmat(t.mediators[kk].row(i), &w1), &q)).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let mut out = 0.0;
            for (kk, &logit) in logits.iter().enumerate() {
                let alpha = (logit - mx).exp() / z;
                let mut mean = 0.0;
                for j in 0..n {
                    let mut input = js.row(j).to_vec();
                    input.extend_from_slice(t.mediators[kk].row(i));
                    input.extend_from_slice(t.targets[kk].row(i));
                    let mut h = 0.0;
                    for u in 0..b1.len() {
                        let mut pre = b1.data()[u];
                        for (r, x) in input.iter().enumerate() {
                            let w = if r < a.rows() {
                                a.row(r)[u]
                            } else if r < a.rows() + b.rows() {
                                b.row(r - a.rows())[u]
                            } else {
                                c.row(r - a.rows() - b.rows())[u]
                            };
                            pre += x * w;
                        }
                        h += pre.max(0.0) * ow.data()[u];
                    }
                    mean += sigmoid(h + ob) / n as f64;
                }
                out += alpha * mean;
            }
            out
        })
        .collect()
}
