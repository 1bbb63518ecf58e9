#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usseg::autodiff::{Tape, Var};
use usseg::model::hiera::{adapter_forward, AdapterWeights, FeaturePyramid};
use usseg::params::ParamStore;
use usseg::{Result, Tensor};

/// Side of the random square masks used by the metric oracles.
pub const N: usize = 16;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// erf by Abramowitz & Stegun 7.1.26 (absolute error below 1.5e-7).
pub fn erf_as(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly =
        t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let y = 1.0 - poly * (-x * x).exp();
    if x < 0.0 {
        -y
    } else {
        y
    }
}

pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_as(x / std::f64::consts::SQRT_2))
}

/// `GELU(x·W_down + b_down)·W_up + b_up + x` for one position.
pub fn adapter_oracle(x: &[f64], w_down: &[f64], b_down: &[f64], w_up: &[f64], b_up: &[f64]) -> Vec<f64> {
    let d = x.len();
    let r = b_down.len();
    let hidden: Vec<f64> = (0..r)
        .map(|j| gelu_oracle((0..d).map(|i| x[i] * w_down[i * r + j]).sum::<f64>() + b_down[j]))
        .collect();
    (0..d)
        .map(|k| (0..r).map(|j| hidden[j] * w_up[j * d + k]).sum::<f64>() + b_up[k] + x[k])
        .collect()
}

pub fn adapter_store(prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let r = d / 4;
    let mut store = ParamStore::new();
    store.insert(format!("{prefix}.w_down"), random_tensor(&[d, r], rng), true);
    store.insert(format!("{prefix}.b_down"), random_tensor(&[r], rng), true);
    store.insert(format!("{prefix}.w_up"), random_tensor(&[r, d], rng), true);
    store.insert(format!("{prefix}.b_up"), random_tensor(&[d], rng), true);
    store
}

pub fn run_adapter(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let w = AdapterWeights::bind(&mut tape, store, prefix).unwrap();
    let y = adapter_forward(&mut tape, xv, &w).unwrap();
    tape.value(y).clone()
}

pub fn random_mask(r: &mut ChaCha8Rng, density: f64) -> Vec<bool> {
    (0..N * N).map(|_| r.random_bool(density)).collect()
}

pub fn brute_boundary(m: &[bool]) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for y in 0..N as i64 {
        for x in 0..N as i64 {
            if !m[(y * N as i64 + x) as usize] {
                continue;
            }
            let edge = [(0, 1), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                ny < 0 || nx < 0 || ny >= N as i64 || nx >= N as i64 || !m[(ny * N as i64 + nx) as usize]
            });
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn brute_distances(p: &[bool], g: &[bool]) -> Option<(f64, f64, f64)> {
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let nearest = |a: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = bp
        .iter()
        .map(|a| nearest(a, &bg))
        .chain(bg.iter().map(|a| nearest(a, &bp)))
        .collect();
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let (lo, frac) = (rank.floor() as usize, rank.fract());
    let hd95 = if lo + 1 < d.len() {
        d[lo] * (1.0 - frac) + d[lo + 1] * frac
    } else {
        d[lo]
    };
    Some((d[d.len() - 1], hd95, d.iter().sum::<f64>() / d.len() as f64))
}

/// Covariance eigenpairs of one sample by a dense symmetric eigensolver,
/// largest eigenvalue first.
pub fn dense_eigen(x: &[f64], n: usize, d: usize) -> Vec<(f64, Vec<f64>)> {
    let m = DMatrix::from_row_slice(n, d, x);
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

pub fn same_up_to_sign(a: &[f64], b: &[f64], tol: f64) -> bool {
    let plus = a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol);
    let minus = a.iter().zip(b).all(|(x, y)| (x + y).abs() < tol);
    plus || minus
}

pub fn proj_store(w: Tensor<f64>, b: Tensor<f64>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.insert("fusion.proj.weight", w, true);
    store.insert("fusion.proj.bias", b, true);
    store
}

pub fn random_pyramid(tape: &mut Tape<f64>, d: usize, r: &mut ChaCha8Rng) -> FeaturePyramid {
    let b = r.random_range(1..=2);
    let (h, w) = (r.random_range(1..=3) * 4, r.random_range(1..=3) * 4);
    let levels = (0..3)
        .map(|s| tape.constant(random_tensor(&[b, h >> s, w >> s, d], r)).unwrap())
        .collect();
    FeaturePyramid {
        levels,
        strides: vec![4, 8, 16],
    }
}

/// Weighted sum with fixed pseudo-random weights, so every output entry
/// contributes a distinct gradient.
pub fn probe_loss(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 97) as f64 / 97.0) - 0.4);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}
