#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ssvd::adapters::{AdapterConfig, AdapterState, DecomposedWeight, Method};
use ssvd::densela::Matrix;
use ssvd::tape::{grad_check, GradCheckReport, Graph};

pub const LAYER_SHAPES: [(usize, usize); 4] = [(8, 4), (32, 8), (64, 64), (48, 64)];

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn random_layer(outputs: usize, inputs: usize, seed: u64) -> Matrix {
    gaussian(outputs, inputs, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A mid-range configuration of `method` for a stored `m×n` weight.
pub fn mid_config(method: Method, m: usize, n: usize) -> AdapterConfig {
    let l = n.min(m - n).div_ceil(2);
    AdapterConfig::new(method).with_p(0.5).with_l(l).with_r(n.div_ceil(2)).with_tau(0.5)
}

/// Initialized state with every trainable entry perturbed, so gradients are
/// checked away from the identity point.
pub fn perturbed_state(cfg: &AdapterConfig, dw: &DecomposedWeight, scale: f64, seed: u64) -> AdapterState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdapterState::init(cfg, dw, &mut rng).unwrap();
    for (_, p) in state.params_mut() {
        let noise = gaussian(p.rows(), p.cols(), scale, &mut rng);
        p.add_assign(&noise);
    }
    state
}

/// Finite-difference check of a scalar loss through one adapter forward.
pub fn adapter_grad_check(method: Method, outputs: usize, inputs: usize, seed: u64) -> GradCheckReport {
    let w = random_layer(outputs, inputs, seed);
    let dw = DecomposedWeight::decompose(&w).unwrap();
    let cfg = mid_config(method, dw.m(), dw.n());
    let state = perturbed_state(&cfg, &dw, 0.3, seed + 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
    let x = gaussian(inputs, 3, 1.0, &mut rng);
    let r = gaussian(outputs, 3, 1.0, &mut rng);
    let params: Vec<Matrix> = state.params().into_iter().map(|(_, m)| m.clone()).collect();
    grad_check(
        |g: &mut Graph, vars| {
            let xv = g.constant(x.clone());
            let y = state.forward(g, vars, &dw, xv)?;
            let y = g.tanh(y);
            let rv = g.constant(r.clone());
            let prod = g.hadamard(y, rv);
            Ok(g.sum(prod))
        },
        &params,
        1e-6,
        1e-4,
    )
    .unwrap()
}
