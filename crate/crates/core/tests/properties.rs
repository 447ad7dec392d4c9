mod common;

use collapse_lab::diagnostics::{collision_bound, layer_agop, linear_cka};
use collapse_lab::fusion::{FusionKind, FusionModel};
use collapse_lab::neurocore::{
    sgd_step, singular_values, softmax_cross_entropy, symmetric_eigen, Activation, Matrix, Mlp, MlpGrads,
    RandomStream, SgdConfig,
};
use collapse_lab::substitution::{substitute, PolicyKind, SubstitutionContext, SubstitutionPolicy};
use collapse_lab::synthgen::{expected_absence_rate, sample_mask, DeskDataConfig};
use common::{random_inputs, random_labels, tiny_arch};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut s = RandomStream::new(seed);
    Matrix::from_fn(rows, cols, |_, _| s.normal())
}

fn naive_product(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |r, c| (0..a.cols()).map(|k| a.get(r, k) * b.get(k, c)).sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn products_match_the_triple_loop(n in 1usize..20, k in 1usize..20, m in 1usize..20, seed: u64) {
        let a = matrix(n, k, seed);
        let b = matrix(k, m, seed ^ 1);
        let want = naive_product(&a, &b);
        prop_assert!(a.matmul(&b).max_abs_diff(&want) < 1e-10);
        prop_assert!(a.transpose().t_matmul(&b).max_abs_diff(&want) < 1e-10);
        prop_assert!(a.matmul_t(&b.transpose()).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn singular_values_sorted_and_carry_the_frobenius_norm(rows in 1usize..40, cols in 1usize..12, seed: u64) {
        let a = matrix(rows, cols, seed);
        let sv = singular_values(&a).unwrap();
        prop_assert_eq!(sv.len(), rows.min(cols));
        prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        let energy: f64 = sv.iter().map(|s| s * s).sum();
        let fro = a.frobenius_norm().powi(2);
        prop_assert!((energy - fro).abs() <= 1e-8 * fro);
    }

    #[test]
    fn weight_decay_alone_contracts_weights(lr in 1e-3f64..0.5, wd in 1e-3f64..1.0, seed: u64) {
        let mut s = RandomStream::new(seed);
        let mut mlp = Mlp::he(&[5, 7, 3], Activation::Relu, Activation::Identity, &mut s).unwrap();
        let cfg = SgdConfig { learning_rate: lr, weight_decay: wd, decay_factor: 1.0, decay_every: 1 };
        let zero = MlpGrads::zeros_like(&mlp);
        for _ in 0..3 {
            let before: Vec<f64> = mlp.layers().iter().map(|l| l.weight.frobenius_norm()).collect();
            let biases: Vec<Vec<f64>> = mlp.layers().iter().map(|l| l.bias.clone()).collect();
            sgd_step(&mut mlp, &zero, &cfg, 0).unwrap();
            for (l, (b, bias)) in mlp.layers().iter().zip(before.iter().zip(&biases)) {
                let after = l.weight.frobenius_norm();
                prop_assert!(after < *b);
                prop_assert!((after - (1.0 - lr * wd) * b).abs() <= 1e-12 * b);
                prop_assert_eq!(&l.bias, bias);
            }
        }
    }

    #[test]
    fn equal_seeds_give_equal_streams(seed: u64, label in "[a-z]{1,8}") {
        let mut a = RandomStream::new(seed).fork(&label);
        let mut b = RandomStream::new(seed).fork(&label);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn collision_bound_matches_exact_rational(dims in prop::collection::vec(1usize..64, 1..7)) {
        let m = dims.len() as u128;
        let min = *dims.iter().min().unwrap() as u128;
        let sum: u128 = dims.iter().map(|&d| d as u128).sum();
        let (num, den) = (m * (m - 1) * min * min, sum * sum);
        let want = if num >= den { 1.0 } else { num as f64 / den as f64 };
        prop_assert!((collision_bound(&dims).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn collision_bound_grows_with_modalities_at_equal_width(d in 1usize..128, m in 1usize..12) {
        let lo = collision_bound(&vec![d; m]).unwrap();
        let hi = collision_bound(&vec![d; m + 1]).unwrap();
        prop_assert!(hi >= lo);
        let mf = m as f64;
        prop_assert!((lo - (mf - 1.0) / mf).abs() < 1e-12);
    }

    #[test]
    fn agop_is_symmetric_psd(out in 1usize..10, inp in 1usize..10, n in 1usize..30, seed: u64) {
        let w = matrix(out, inp, seed);
        let outputs = matrix(n, out, seed ^ 7);
        for act in [Activation::Relu, Activation::Identity] {
            let a = layer_agop(act, &w, &outputs);
            prop_assert!(a.max_abs_diff(&a.transpose()) <= 1e-10);
            let (eig, _) = symmetric_eigen(&a).unwrap();
            let scale = a.frobenius_norm().max(1.0);
            prop_assert!(eig.iter().all(|&l| l >= -1e-10 * scale));
        }
    }

    #[test]
    fn cka_is_symmetric_and_bounded(n in 3usize..40, p in 1usize..6, q in 1usize..6, seed: u64) {
        let a = matrix(n, p, seed);
        let b = matrix(n, q, seed ^ 3);
        let (ab, ba) = (linear_cka(&a, &b), linear_cka(&b, &a));
        prop_assert!((ab.value - ba.value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.value));
        prop_assert!((linear_cka(&a, &a).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_stays_finite(scale in 1.0f64..1e6, seed: u64) {
        let logits = matrix(6, 4, seed).scale(scale);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 0, 1]).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!(grad.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mask_absence_tracks_rate(rate in 0.0f64..0.8, m in 2usize..6, seed: u64) {
        let mut s = RandomStream::new(seed);
        let mask = sample_mask(10_000, m, rate, &mut s).unwrap();
        let want = expected_absence_rate(rate, m);
        for i in 0..m {
            prop_assert!((mask.absence_frequency(i) - want).abs() <= 0.02);
        }
        prop_assert!((0..mask.len()).all(|r| mask.row(r).iter().any(|p| *p)));
    }

    #[test]
    fn relabeling_modalities_keeps_the_semantic_loss(seed: u64) {
        let mut s = RandomStream::new(seed);
        let dims = [3, 5, 4];
        let arch = tiny_arch(FusionKind::Concat);
        let mut model = FusionModel::new(&arch, &dims, 3, &s.fork("model")).unwrap();
        model.attach_ebr(&arch, &s.fork("ebr")).unwrap();
        let x = random_inputs(7, &dims, &mut s);
        let y = random_labels(7, 3, &mut s);
        let perm = s.permutation(3);
        let px: Vec<Matrix> = perm.iter().map(|&k| x[k].clone()).collect();
        let pm = model.permuted(&perm).unwrap();
        let loss = |m: &FusionModel, x: &[Matrix]| softmax_cross_entropy(&m.fuse_predict(x).unwrap().1, &y).unwrap().0;
        prop_assert!((loss(&model, &x) - loss(&pm, &px)).abs() < 1e-12);
        for (k, &old) in perm.iter().enumerate() {
            let a = model.discriminate(&model.ebr_latent(&x, old).unwrap()).unwrap();
            let b = pm.discriminate(&pm.ebr_latent(&px, k).unwrap()).unwrap();
            for r in 0..a.rows() {
                for (j, &oj) in perm.iter().enumerate() {
                    prop_assert!((a.get(r, oj) - b.get(r, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fresh_ebr_heads_nearly_pass_through(seed: u64) {
        let mut s = RandomStream::new(seed);
        let dims = [6, 4];
        let arch = collapse_lab::fusion::Architecture::default();
        let plain = FusionModel::new(&arch, &dims, 4, &s.fork("model")).unwrap();
        let mut ebr = plain.clone();
        ebr.attach_ebr(&arch, &s.fork("ebr")).unwrap();
        let x = random_inputs(32, &dims, &mut s);
        let a = plain.fuse_predict(&x).unwrap().1;
        let b = ebr.fuse_predict(&x).unwrap().1;
        prop_assert!(a.sub(&b).frobenius_norm() < 0.1 * a.frobenius_norm());
    }

    #[test]
    fn substitution_keeps_present_encodings_bitwise(seed: u64, rate in 0.1f64..0.7) {
        let cfg = DeskDataConfig { num_modalities: 3, n_train: 120, n_test: 40, ..DeskDataConfig::default() };
        let (train, test) = cfg.generate(&RandomStream::new(seed)).unwrap();
        let arch = tiny_arch(FusionKind::Concat);
        let mut model = FusionModel::new(&arch, &train.obs_dims(), 4, &RandomStream::new(seed ^ 5)).unwrap();
        model.attach_ebr(&arch, &RandomStream::new(seed ^ 9)).unwrap();
        let ctx = SubstitutionContext::fit(&model, &train, None, seed).unwrap();
        let mask = sample_mask(test.len(), 3, rate, &mut RandomStream::new(seed ^ 11)).unwrap();
        let plain = model.encode(&test.modalities).unwrap();
        for kind in PolicyKind::ALL {
            if kind == PolicyKind::LateFusionDrop {
                continue;
            }
            let out = substitute(&model, &test.modalities, &mask, &ctx, SubstitutionPolicy::new(kind)).unwrap();
            for i in 0..3 {
                prop_assert_eq!(out[i].cols(), plain[i].cols());
                for r in (0..test.len()).filter(|&r| mask.is_present(r, i)) {
                    let same = out[i].row(r).iter().zip(plain[i].row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same, "{kind} modality {i} row {r}");
                }
            }
        }
    }
}
