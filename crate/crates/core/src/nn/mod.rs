//! Minimal dense-tensor kernel with reverse-mode differentiation.
//!
//! The graph operations in [`Graph`] are the differentiable building blocks
//! of both learned models; the free functions below are forward-only
//! conveniences that evaluate a single operation on plain tensors.

mod graph;
mod params;
mod sparse;
mod tensor;

use alloc::format;
use alloc::vec::Vec;

pub use graph::{Gradients, Graph, Var, PROB_FLOOR};
pub use params::{glorot, AdamConfig, Param, ParamId, ParamSet};
pub use sparse::SparseRows;
pub use tensor::Tensor;

use crate::{Error, Result};

fn eval<F>(f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let out = f(&mut g)?;
    Ok(g.value(out).clone())
}

/// `x W + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    eval(|g| {
        let (x, w, b) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        g.linear(x, w, Some(b))
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    eval(|g| {
        let x = g.input(x.clone());
        Ok(g.relu(x))
    })
    .expect("relu is total")
}

/// Softmax of a matrix along `axis` (0 = down columns, 1 = along rows).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    match axis {
        1 => eval(|g| {
            let x = g.input(x.clone());
            g.softmax(x)
        }),
        0 => Ok(softmax(&x.transpose(), 1)?.transpose()),
        _ => Err(Error::Shape(format!("softmax axis {axis} on a matrix"))),
    }
}

/// `softmax(q k^T / sqrt(d) + mask) v` for one sequence; `padding[j]` removes
/// key position `j` from every query's attention.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, padding: &[bool]) -> Result<Tensor> {
    let valid: Vec<bool> = padding.iter().map(|p| !p).collect();
    eval(|g| {
        let (q, k, v) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let seq = g.value(q).rows();
        g.attention(q, k, v, seq, &valid)
    })
}

/// Code length in bits of `labels` (symbols `1..=255`) under softmax(logits).
pub fn cross_entropy_255(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    Ok(eval(|g| {
        let x = g.input(logits.clone());
        g.cross_entropy_255(x, labels)
    })?
    .data()[0])
}

/// `-sum_i sum_j e_i(j) log2 p_i(j)` against explicit one-hot labels, with
/// probabilities floored at [`PROB_FLOOR`].
pub fn cross_entropy_probs(probs: &[[f64; 255]], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} distributions, {} labels", probs.len(), labels.len())));
    }
    let mut total = 0.0;
    for (p, &label) in probs.iter().zip(labels) {
        if label == 0 {
            return Err(Error::InvalidSymbol(0));
        }
        for (j, &pj) in p.iter().enumerate() {
            let e = if j + 1 == label as usize { 1.0 } else { 0.0 };
            if e != 0.0 {
                total -= e * libm::log2(pj.max(PROB_FLOOR));
            }
        }
    }
    Ok(total)
}

/// Mean squared error.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(eval(|g| {
        let p = g.input(pred.clone());
        g.mse(p, target.data())
    })?
    .data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        t(rows, cols, &(0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn linear_examples() {
        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let y = linear(&t(1, 1, &[2.0]), &t(1, 1, &[3.0]), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert!(matches!(linear(&x, &t(3, 1, &[0.0; 3]), &Tensor::scalar(0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_and_softmax_examples() {
        assert_eq!(relu(&t(1, 3, &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let s = softmax(&Tensor::zeros(&[1, 8]), 1).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.125));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 4, 7);
        let big = t(1, 3, &[1000.0, 999.0, -1000.0]);
        for axis in [0, 1] {
            let s = softmax(&x, axis).unwrap();
            let st = if axis == 1 { s.clone() } else { s.transpose() };
            for r in 0..st.rows() {
                let sum: f64 = st.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(st.row(r).iter().all(|&v| v >= 0.0));
            }
        }
        assert!(softmax(&big, 1).unwrap().data().iter().all(|v| v.is_finite()));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, k, v) = (random(&mut rng, 1, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        assert_eq!(attention(&q, &k, &v, &[false]).unwrap(), v);

        let (q, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let out = attention(&q, &k, &v, &[false, true, true]).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
        assert!(attention(&q, &k, &random(&mut rng, 2, 4), &[false; 3]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 255]);
        let bits = cross_entropy_255(&uniform, &[1, 100, 255]).unwrap();
        assert!((bits / 3.0 - libm::log2(255.0)).abs() < 1e-12);
        assert!((libm::log2(255.0) - 7.9944).abs() < 1e-4);

        // p(true) = 0.5: logit ln(254) on the label, zero elsewhere
        let mut row = vec![0.0; 255];
        row[9] = libm::log(254.0);
        let bits = cross_entropy_255(&t(1, 255, &row), &[10]).unwrap();
        assert!((bits - 1.0).abs() < 1e-12);

        assert!(matches!(cross_entropy_255(&uniform, &[0, 1, 2]), Err(Error::InvalidSymbol(0))));
    }

    #[test]
    fn cross_entropy_ignores_off_label_mass() {
        let mut a = [0.0; 255];
        let mut b = [0.0; 255];
        a[0] = 0.3;
        a[1] = 0.4;
        a[3] = 0.3;
        b[1] = 0.4;
        b[252] = 0.3;
        b[254] = 0.3;
        let la = cross_entropy_probs(&[a], &[2]).unwrap();
        let lb = cross_entropy_probs(&[b], &[2]).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn cross_entropy_matches_literal_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let batch = rng.gen_range(1..6);
            let logits = random(&mut rng, batch, 255);
            let labels: Vec<u8> = (0..batch).map(|_| rng.gen_range(1..=255)).collect();
            let probs: Vec<[f64; 255]> = (0..batch)
                .map(|r| {
                    let mut p = [0.0; 255];
                    p.copy_from_slice(logits.row(r));
                    tensor::softmax_in_place(&mut p);
                    p
                })
                .collect();
            let a = cross_entropy_255(&logits, &labels).unwrap();
            let b = cross_entropy_probs(&probs, &labels).unwrap();
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn mse_examples() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert_eq!(mse(&p, &p).unwrap(), 0.0);
        assert_eq!(mse(&p, &Tensor::vector(vec![3.0, 2.0]).unwrap()).unwrap(), 2.0);
        assert!(mse(&p, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (random(&mut rng, 5, 3), random(&mut rng, 5, 3), random(&mut rng, 5, 3));
        let mask = [false, false, true, false, true];
        assert_eq!(attention(&q, &k, &v, &mask).unwrap(), attention(&q, &k, &v, &mask).unwrap());
    }

    /// Central differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (x, w, b) = (random(&mut rng, 4, 5), random(&mut rng, 5, 3), random(&mut rng, 1, 3).reshape(vec![3]).unwrap());
        let head = random(&mut rng, 4, 3);
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let y = linear(x, w, b).unwrap();
            y.data().iter().zip(head.data()).map(|(a, b)| a * b).sum()
        };
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (xv, wv, bv) = (g.input_with_grad(x.clone()), g.input_with_grad(w.clone()), g.input_with_grad(b.clone()));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        let s = g.weighted_sum(y, head.clone()).unwrap();
        let grads = g.backward(s).unwrap();
        let nx = numeric_grad(&x, &|x| run(x, &w, &b));
        let nw = numeric_grad(&w, &|w| run(&x, w, &b));
        let nb = numeric_grad(&b, &|b| run(&x, &w, b));
        assert!(rel_err(grads.input(xv).unwrap().data(), &nx) < 1e-6);
        assert!(rel_err(grads.input(wv).unwrap().data(), &nw) < 1e-6);
        assert!(rel_err(grads.input(bv).unwrap().data(), &nb) < 1e-6);
    }

    #[test]
    fn softmax_and_mse_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let x = random(&mut rng, 3, 6);
        let head = random(&mut rng, 3, 6);
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let xv = g.input_with_grad(x.clone());
        let y = g.softmax(xv).unwrap();
        let s = g.weighted_sum(y, head.clone()).unwrap();
        let analytic = g.backward(s).unwrap().input(xv).unwrap().clone();
        let numeric = numeric_grad(&x, &|x| {
            softmax(x, 1).unwrap().data().iter().zip(head.data()).map(|(a, b)| a * b).sum()
        });
        assert!(rel_err(analytic.data(), &numeric) < 1e-6);

        let pred = random(&mut rng, 1, 6).reshape(vec![6]).unwrap();
        let target = random(&mut rng, 1, 6).reshape(vec![6]).unwrap();
        let mut g = Graph::new(&params);
        let pv = g.input_with_grad(pred.clone());
        let l = g.mse(pv, target.data()).unwrap();
        let analytic = g.backward(l).unwrap().input(pv).unwrap().clone();
        let closed: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| 2.0 * (p - t) / 6.0).collect();
        let numeric = numeric_grad(&pred, &|p| mse(p, &target).unwrap());
        assert!(rel_err(analytic.data(), &closed) < 1e-12);
        assert!(rel_err(analytic.data(), &numeric) < 1e-8);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let (q, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let head = random(&mut rng, 3, 4);
        let pad = [false, true, false];
        let run = |q: &Tensor, k: &Tensor, v: &Tensor| -> f64 {
            let y = attention(q, k, v, &pad).unwrap();
            y.data().iter().zip(head.data()).map(|(a, b)| a * b).sum()
        };
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (qv, kv, vv) = (g.input_with_grad(q.clone()), g.input_with_grad(k.clone()), g.input_with_grad(v.clone()));
        let y = g.attention(qv, kv, vv, 3, &[true, false, true]).unwrap();
        let s = g.weighted_sum(y, head.clone()).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(rel_err(grads.input(qv).unwrap().data(), &numeric_grad(&q, &|q| run(q, &k, &v))) < 1e-5);
        assert!(rel_err(grads.input(kv).unwrap().data(), &numeric_grad(&k, &|k| run(&q, k, &v))) < 1e-5);
        assert!(rel_err(grads.input(vv).unwrap().data(), &numeric_grad(&v, &|v| run(&q, &k, v))) < 1e-5);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = t(1, 1, &[f64::MAX]);
        let w = t(1, 1, &[f64::MAX]);
        assert!(matches!(linear(&x, &w, &Tensor::scalar(0.0)), Err(Error::NonFinite(_))));
    }
}
