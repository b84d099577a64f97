//! Oracles and harness shared by the integration tests. Everything here is
//! written with plain loops over `Vec`s so it shares no code with the tape.

#![allow(dead_code)]

use epcnet::graph::PointCloud;
use epcnet::nn::{Forward, Mode};
use epcnet::tensor::{finite_difference_check, Parameter, Tape, Tensor, Var};
use epcnet::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect(),
    )
    .unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// k nearest other points of every point, by brute force; ties go to the
/// lower index.
pub fn knn_oracle(points: &[[f32; 3]], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = (0..3)
                        .map(|a| {
                            let t = points[i][a] as f64 - points[j][a] as f64;
                            t * t
                        })
                        .sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            d[..k].iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

/// Mean of each point's neighbor features.
pub fn gather_mean_oracle(nbrs: &[Vec<usize>], feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    nbrs.iter()
        .map(|nb| {
            let mut acc = vec![0.0; feats[0].len()];
            for &j in nb {
                for (a, v) in acc.iter_mut().zip(&feats[j]) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / nb.len() as f64).collect()
        })
        .collect()
}

/// `V[k][j] = Σ_i a_ik (f_ij − c_kj)` with `a = softmax_k(f·W + b)`.
pub fn vlad_oracle(f: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (kc, d) = (c.len(), c[0].len());
    let mut v = vec![vec![0.0; d]; kc];
    for fi in f {
        let scores: Vec<f64> = (0..kc)
            .map(|k| b[k] + (0..d).map(|j| fi[j] * w[j][k]).sum::<f64>())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..kc {
            for j in 0..d {
                v[k][j] += e[k] / z * (fi[j] - c[k][j]);
            }
        }
    }
    v
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lazy quadruplet loss by hand: the best (or mean) positive distance, then
/// the worst violation over negatives, then the worst over the extra
/// negative's pairings.
pub fn lazy_oracle(
    a: &[f64],
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    star: &[f64],
    alpha: f64,
    beta: f64,
    mean_positive: bool,
    anchor_pairing: bool,
) -> f64 {
    let dp: Vec<f64> = pos.iter().map(|p| sq(a, p)).collect();
    let d_pos = if mean_positive {
        dp.iter().sum::<f64>() / dp.len() as f64
    } else {
        dp.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let mut first: f64 = 0.0;
    for n in neg {
        first = first.max(alpha + d_pos - sq(a, n));
    }
    let mut second: f64 = 0.0;
    if anchor_pairing {
        second = second.max(beta + d_pos - sq(a, star));
    } else {
        for n in neg {
            second = second.max(beta + d_pos - sq(n, star));
        }
    }
    first + second
}

/// A fixed random direction used to turn any output into a scalar loss.
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed ^ 0xA5A5);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Worst relative and absolute (sub-floor) errors over every parameter of
/// `state`, perturbing at most `max_coords` coordinates of each. `run` builds
/// the layer's output in training mode; a random projection of it is the
/// loss.
pub fn grad_check<S: Clone>(
    state: &S,
    params: impl Fn(&mut S) -> Vec<&mut Parameter<f64>>,
    run: impl Fn(&mut Forward<'_, f64>, &S) -> Result<Var>,
    seed: u64,
    max_coords: usize,
) -> Result<(f64, f64)> {
    let mut scratch = state.clone();
    let bases: Vec<Parameter<f64>> = params(&mut scratch).into_iter().map(|p| p.clone()).collect();
    let (mut worst, mut worst_abs): (f64, f64) = (0.0, 0.0);
    for (pi, base) in bases.iter().enumerate() {
        let n = base.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng(seed + pi as u64), n, max_coords).into_vec()
        };
        let f = |cand: &Tensor<f64>| {
            let mut s = state.clone();
            params(&mut s)[pi].value = cand.clone();
            let mut tape = Tape::new();
            let mut fw = Forward::new(&mut tape, Mode::Train);
            let out = run(&mut fw, &s)?;
            let (bindings, _, _) = fw.into_parts();
            let shape = tape.shape(out).to_vec();
            let r = tape.constant(projection(&shape, seed));
            let prod = tape.mul(out, r)?;
            let loss = tape.sum_all(prod)?;
            let grads = tape.backward(loss)?;
            let g = bindings
                .get(&base.name)
                .and_then(|&v| grads.get(v))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(cand.shape()));
            Ok((tape.value(loss).data()[0], g))
        };
        let report = finite_difference_check(f, base, 1e-6, Some(&coords))?;
        worst = worst.max(report.max_rel_error);
        worst_abs = worst_abs.max(report.max_abs_error);
    }
    Ok((worst, worst_abs))
}
