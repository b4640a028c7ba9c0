mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssvd::adapters::{build_q, cayley, param_count, AdapterConfig, AdapterState, DecomposedWeight, Method, Ranks};
use ssvd::densela::{cholesky_lower, svd_full, sym_eigenvalues, Matrix};
use ssvd::metrics::{forgetting_score, frontier, FrontierPoint};
use ssvd::tasks::{gen_data, make_teacher, Mlp, ShiftSpec, ShiftStrength};
use ssvd::tape::Activation;
use ssvd::train::{train_loop, AdaptedModel, OptimKind, OptimState, TrainConfig};

use common::{gaussian, mid_config, perturbed_state, random_layer};

const METHODS: [Method; 6] = [Method::Ssvd, Method::SsvdO, Method::Lora, Method::Dora, Method::Pissa, Method::Full];

/// `(m, n)` with `1 ≤ n ≤ m ≤ 12`.
fn tall() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=12).prop_flat_map(|n| (n..=12, Just(n)))
}

fn skew(k: usize, seed: u64) -> Matrix {
    let a = random_layer(k, k, seed);
    a.sub(&a.transpose()).scale(0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors((m, n) in tall(), seed in any::<u64>()) {
        let w = random_layer(m, n, seed);
        let f = svd_full(&w).unwrap();
        prop_assert!(f.reconstruct().sub(&w).max_abs() <= 1e-10 * (1.0 + w.max_abs()));
        prop_assert!(f.orthogonality_residual() <= 1e-10);
        prop_assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(f.sigma.iter().all(|s| *s >= 0.0));
        prop_assert_eq!(f.u2.as_ref().map_or(0, |u2| u2.cols()), m - n);
    }

    #[test]
    fn cholesky_factor_reproduces_gram(n in 1usize..10, seed in any::<u64>()) {
        let b = random_layer(n + 2, n, seed);
        let a = b.t_matmul(&b).add(&Matrix::identity(n));
        let l = cholesky_lower(&a).unwrap();
        prop_assert!(l.matmul_t(&l).sub(&a).max_abs() <= 1e-10 * a.max_abs());
        for i in 0..n {
            prop_assert!(l[(i, i)] > 0.0);
            for j in i + 1..n {
                prop_assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cayley_of_skew_is_orthogonal(k in 1usize..10, scale in 0.01f64..5.0, seed in any::<u64>()) {
        let g = cayley(&skew(k, seed).scale(scale)).unwrap();
        prop_assert!(g.orthogonality_residual() <= 1e-10);
    }

    #[test]
    fn outer_factor_spectrum_is_saturated_gram_spectrum(
        rows in 1usize..10,
        l in 1usize..6,
        tau in 1e-3f64..10.0,
        seed in any::<u64>(),
    ) {
        let factor = random_layer(rows, l, seed);
        let q = build_q(&factor, tau).unwrap();
        let mut got = sym_eigenvalues(&q.t_matmul(&q)).unwrap();
        let mut want: Vec<f64> = sym_eigenvalues(&factor.t_matmul(&factor)).unwrap().iter().map(|lam| lam / (lam + tau)).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn shifted_left_basis_gram_identity((m, n) in (2usize..=12).prop_flat_map(|m| (Just(m), 1..m)), seed in any::<u64>()) {
        let dw = DecomposedWeight::decompose(&random_layer(m, n, seed)).unwrap();
        let (m, n) = (dw.m(), dw.n());
        let l = n.min(m - n);
        let f = dw.factors();
        let q = build_q(&random_layer(m - n, l, seed ^ 1), 0.3).unwrap();
        let padded = Matrix::hstack(&[&q, &Matrix::zeros(m - n, n - l)]);
        let u_shift = f.u.add(&f.u2.as_ref().unwrap().matmul(&padded));
        let mut want = Matrix::identity(n);
        let qtq = q.t_matmul(&q);
        for i in 0..l {
            for j in 0..l {
                want[(i, j)] += qtq[(i, j)];
            }
        }
        prop_assert!(u_shift.t_matmul(&u_shift).sub(&want).max_abs() <= 1e-10);
    }

    #[test]
    fn merged_weight_matches_adapter_forward(
        mi in 0usize..6,
        (outputs, inputs) in (1usize..10, 1usize..10),
        seed in any::<u64>(),
    ) {
        let method = METHODS[mi];
        let dw = DecomposedWeight::decompose(&random_layer(outputs, inputs, seed)).unwrap();
        let cfg = mid_config(method, dw.m(), dw.n());
        let state = perturbed_state(&cfg, &dw, 0.3, seed ^ 7);
        let x = random_layer(inputs, 4, seed ^ 11);
        let via_forward = state.apply(&dw, &x).unwrap();
        let via_merge = state.merge(&dw).unwrap().matmul(&x);
        prop_assert!(via_forward.sub(&via_merge).max_abs() <= 1e-9 * (1.0 + via_merge.max_abs()));
    }

    #[test]
    fn inner_transform_is_cheapest((m, n) in (2usize..=300).prop_flat_map(|n| (n..=400, Just(n)))) {
        let ssvd = param_count(Method::Ssvd, m, n, Ranks { k: n, ..Default::default() }).unwrap();
        let lora = param_count(Method::Lora, m, n, Ranks { r: n, ..Default::default() }).unwrap();
        let dora = param_count(Method::Dora, m, n, Ranks { r: n, ..Default::default() }).unwrap();
        prop_assert!(ssvd < lora && lora < dora, "{ssvd} {lora} {dora}");
    }

    #[test]
    fn small_sgd_step_does_not_increase_batch_loss(mi in 0usize..6, seed in 0u64..1000) {
        let method = METHODS[mi];
        let base = Mlp::random(&[6, 12, 4], Activation::Tanh, seed).unwrap();
        let cfgs: Vec<_> = base
            .layers
            .iter()
            .map(|l| {
                let (a, b) = l.weight.shape();
                Some(mid_config(method, a.max(b), a.min(b)))
            })
            .collect();
        let mut model = AdaptedModel::per_layer(&base, &cfgs, seed).unwrap();
        let x = random_layer(6, 16, seed ^ 3);
        let labels: Vec<usize> = (0..16).map(|i| (i * 7 + seed as usize) % 4).collect();
        let (before, _, _) = model.loss_and_grads(&x, &labels).unwrap();
        let mut opt = OptimState::sgd(1e-4);
        model.step(&x, &labels, &mut opt).unwrap();
        let (after, _, _) = model.loss_and_grads(&x, &labels).unwrap();
        prop_assert!(after < before || (after - before).abs() <= 1e-12, "{method}: {before} -> {after}");
    }

    #[test]
    fn frontier_flags_ignore_input_order(
        pts in prop::collection::vec((-50i32..50, -50i32..50), 1..12),
        rot in 0usize..12,
    ) {
        let points: Vec<FrontierPoint> =
            pts.iter().enumerate().map(|(i, &(a, b))| FrontierPoint::new(format!("p{i}"), a as f64, b as f64)).collect();
        let mut shuffled = points.clone();
        shuffled.rotate_left(rot % points.len());
        shuffled.reverse();
        let flags = |v: Vec<FrontierPoint>| {
            let mut f: Vec<(String, bool)> = frontier(v).unwrap().into_iter().map(|p| (p.label, p.pareto)).collect();
            f.sort();
            f
        };
        prop_assert_eq!(flags(points), flags(shuffled));
    }

    #[test]
    fn forgetting_is_translation_invariant(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..8),
        c in -0.5f64..0.5,
    ) {
        let (before, after): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<f64>>();
        let a = forgetting_score(&before, &after).unwrap();
        let b = forgetting_score(&shift(&before), &shift(&after)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn training_leaves_frozen_tensors_bit_identical() {
    let task = make_teacher(8, &[16], 4, 5).unwrap();
    let data = gen_data(&task, None, 256, 9).unwrap();
    let base = Mlp::random(&[8, 16, 4], Activation::Tanh, 2).unwrap();
    for method in METHODS {
        let cfgs: Vec<_> = base
            .layers
            .iter()
            .map(|l| {
                let (a, b) = l.weight.shape();
                Some(mid_config(method, a.max(b), a.min(b)))
            })
            .collect();
        let mut model = AdaptedModel::per_layer(&base, &cfgs, 1).unwrap();
        let snapshot = |m: &AdaptedModel| -> Vec<Vec<u64>> {
            let mut out: Vec<Vec<u64>> = Vec::new();
            let bits = |x: &Matrix| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
            for l in &m.base().layers {
                out.push(bits(&l.weight));
                out.push(bits(&l.bias));
            }
            for (_, dw, state) in m.adapted() {
                let f = dw.factors();
                out.extend([bits(dw.w0()), bits(&f.u), bits(&f.v), bits(&Matrix::column(&f.sigma))]);
                if let Some(u2) = &f.u2 {
                    out.push(bits(u2));
                }
                out.extend(state.frozen().into_iter().map(|(_, m)| bits(m)));
            }
            out
        };
        let before = snapshot(&model);
        let params_before: Vec<Matrix> =
            model.adapted().flat_map(|(_, _, s)| s.params().into_iter().map(|(_, m)| m.clone())).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 32, lr: 1e-2, optimizer: OptimKind::Adam, ..Default::default() };
        train_loop(&mut model, &data, &cfg).unwrap();
        assert_eq!(snapshot(&model), before, "{method}");
        let params_after: Vec<Matrix> =
            model.adapted().flat_map(|(_, _, s)| s.params().into_iter().map(|(_, m)| m.clone())).collect();
        assert_ne!(params_after, params_before, "{method}: trainable tensors did not move");
    }
}

#[test]
fn permutation_shift_leaves_input_statistics_unchanged() {
    let task = make_teacher(8, &[16], 6, 3).unwrap();
    let n = 20_000;
    let strength = ShiftStrength { permuted: 6, ..ShiftStrength::NONE };
    let shift = ShiftSpec::new(8, 6, strength, 4).unwrap();
    let shifted = gen_data(&task, Some(&shift), n, 100).unwrap();
    let source = gen_data(&task, None, n, 100).unwrap();
    assert_eq!(shifted.inputs, source.inputs);
    // Moments against N(0, I): 3 standard errors per entry (x_i² has variance 2).
    let se = 1.0 / (n as f64).sqrt();
    let x = &shifted.inputs;
    let mean: Vec<f64> = (0..8).map(|i| x.row(i).iter().sum::<f64>() / n as f64).collect();
    for (i, m) in mean.iter().enumerate() {
        assert!(m.abs() <= 3.0 * se, "mean {i}: {m}");
    }
    for i in 0..8 {
        for j in 0..8 {
            let c = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - mean[i]) * (b - mean[j])).sum::<f64>() / (n - 1) as f64;
            let (want, sd) = if i == j { (1.0, 2f64.sqrt()) } else { (0.0, 1.0) };
            assert!((c - want).abs() <= 3.0 * sd * se, "cov ({i},{j}): {c}");
        }
    }
    assert_ne!(shifted.labels, source.labels);
}

#[test]
fn adapter_init_reproduces_base_for_random_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..10u64 {
        let w = gaussian(7, 5, 1.0, &mut rng);
        let dw = DecomposedWeight::decompose(&w).unwrap();
        for method in METHODS {
            let cfg = AdapterConfig { tau: 0.01, ..mid_config(method, dw.m(), dw.n()) };
            let state = AdapterState::init(&cfg, &dw, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(state.merge(&dw).unwrap().sub(&w).max_abs() <= 1e-9, "{method} seed {seed}");
        }
    }
}
