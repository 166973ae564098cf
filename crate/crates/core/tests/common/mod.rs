// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference implementations used as oracles by the integration tests.
//! They are deliberately naive and share no code with the library.

#![allow(dead_code)]

use neuron_steer::dumpio::{ActivationDump, ActivationMatrix, Direction, LayerActivations, Trait};
use neuron_steer::stats::LayerStats;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows(m: &ActivationMatrix) -> Vec<Vec<f64>> {
    (0..m.n_samples())
        .map(|i| m.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn naive_mean(x: &[Vec<f64>], k: usize) -> f64 {
    let mut sum = 0.0;
    for row in x {
        sum += row[k];
    }
    sum / x.len() as f64
}

fn naive_var(x: &[Vec<f64>], k: usize) -> f64 {
    let mu = naive_mean(x, k);
    let mut ss = 0.0;
    for row in x {
        ss += (row[k] - mu) * (row[k] - mu);
    }
    ss / (x.len() as f64 - 1.0)
}

pub fn naive_steering(high: &ActivationMatrix, low: &ActivationMatrix) -> Vec<f64> {
    let (h, l) = (rows(high), rows(low));
    (0..high.n_neurons())
        .map(|k| naive_mean(&h, k) - naive_mean(&l, k))
        .collect()
}

pub fn naive_cohens_d(high: &ActivationMatrix, low: &ActivationMatrix) -> Vec<f64> {
    let (h, l) = (rows(high), rows(low));
    (0..high.n_neurons())
        .map(|k| {
            let diff = naive_mean(&h, k) - naive_mean(&l, k);
            let pooled = ((naive_var(&h, k) + naive_var(&l, k)) / 2.0).sqrt();
            if pooled == 0.0 {
                if diff == 0.0 {
                    0.0
                } else {
                    1e6 * diff.signum()
                }
            } else {
                diff / pooled
            }
        })
        .collect()
}

/// Linear-interpolation quantile of `|s|`.
pub fn naive_quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Checks every neuron against both criteria; returns (high, low) indices.
pub fn brute_force_select(d: &[f64], s: &[f64], tau_d: f64, q: f64) -> (Vec<usize>, Vec<usize>) {
    let thr = naive_quantile(s, q);
    let mut high = Vec::new();
    let mut low = Vec::new();
    for k in 0..d.len() {
        if s[k].abs() > thr {
            if d[k] > tau_d {
                high.push(k);
            } else if d[k] < -tau_d {
                low.push(k);
            }
        }
    }
    (high, low)
}

/// Random matrix on a dyadic grid (multiples of 1/4 in [-8, 8]); every
/// value, shift by a multiple of 1/4 and small power-of-two scale is exact
/// in f32.
pub fn grid_matrix(rng: &mut impl Rng, layer: usize, dir: Direction, n: usize, k: usize) -> ActivationMatrix {
    let data = (0..n * k).map(|_| rng.random_range(-32i32..=32) as f32 / 4.0).collect();
    ActivationMatrix::new(layer, dir, n, k, data).unwrap()
}

/// Random matrix with continuous entries.
pub fn random_matrix(rng: &mut impl Rng, layer: usize, dir: Direction, n: usize, k: usize) -> ActivationMatrix {
    let data = (0..n * k).map(|_| rng.random_range(-5.0f32..5.0)).collect();
    ActivationMatrix::new(layer, dir, n, k, data).unwrap()
}

/// Random stats with `k` neurons; `d` and `s` are drawn independently so
/// every combination of criteria occurs, and some values repeat to create
/// ties.
pub fn random_stats(rng: &mut impl Rng, layer: usize, k: usize) -> LayerStats {
    let pick = |rng: &mut ChaCha8Rng| -> f64 {
        if rng.random_bool(0.2) {
            rng.random_range(-3i32..=3) as f64 * 0.5
        } else {
            rng.random_range(-3.0..3.0)
        }
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let steering: Vec<f64> = (0..k).map(|_| pick(&mut local)).collect();
    let cohens_d: Vec<f64> = (0..k).map(|_| pick(&mut local)).collect();
    LayerStats {
        layer_index: layer,
        n_samples_high: 0,
        n_samples_low: 0,
        mean_high: vec![0.0; k],
        mean_low: vec![0.0; k],
        std_high: vec![1.0; k],
        std_low: vec![1.0; k],
        steering,
        cohens_d,
    }
}

pub fn random_dump(rng: &mut impl Rng, max_layers: usize, max_samples: usize, max_k: usize) -> ActivationDump {
    let n_layers = rng.random_range(0..=max_layers);
    let k = rng.random_range(1..=max_k);
    let mut next = 0usize;
    let layers = (0..n_layers)
        .map(|_| {
            next += rng.random_range(1..4);
            let layer = next;
            let nh = rng.random_range(0..=max_samples);
            let nl = rng.random_range(0..=max_samples);
            let mut gen = |dir, n| {
                let data = (0..n * k).map(|_| f32::from_bits(finite_bits(rng))).collect();
                ActivationMatrix::new(layer, dir, n, k, data).unwrap()
            };
            let high = gen(Direction::High, nh);
            let low = gen(Direction::Low, nl);
            LayerActivations { high, low }
        })
        .collect();
    let t = Trait::ALL[rng.random_range(0..Trait::ALL.len())];
    ActivationDump::new(format!("model-{}", rng.random::<u16>()), t, layers).unwrap()
}

/// Arbitrary finite f32 bit pattern, including subnormals and signed zero.
fn finite_bits(rng: &mut impl Rng) -> u32 {
    loop {
        let bits: u32 = rng.random();
        if f32::from_bits(bits).is_finite() {
            return bits;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
