use bbcoreset::algorithms::multinomial_counts;
use bbcoreset::autodiff::{Axis, Tape};
use bbcoreset::coresets::{init_coreset, Coreset, InitStrategy, Labels, WeightMode};
use bbcoreset::data::{self, Dataset, Scaler};
use bbcoreset::models::{Model, ModelSpec};
use bbcoreset::objectives::{normalize_log_weights, normalized_ess};
use bbcoreset::rng::{self, Stream};
use bbcoreset::variational::{self, VariationalGaussian};
use bbcoreset::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            out.set(i, j, (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum());
        }
    }
    out
}

proptest! {
    #[test]
    fn normalized_weights_form_a_distribution(log_w in prop::collection::vec(-700.0..700.0f64, 1..40)) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::column(log_w.clone()));
        let w = normalize_log_weights(&mut t, v).unwrap();
        let w = t.value(w).data().to_vec();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let ess = normalized_ess(&w);
        prop_assert!(ess > 0.0 && ess <= 1.0 + 1e-12);
        prop_assert!(ess >= 1.0 / w.len() as f64 - 1e-12);
    }

    #[test]
    fn materialized_weights_are_nonnegative_and_order_preserving(
        beta in prop::collection::vec(-5.0..5.0f64, 1..12),
        alpha in 0.0..3.0f64,
        n in 1usize..5000,
    ) {
        let m = beta.len();
        for mode in [WeightMode::FixedRatio, WeightMode::FreeNonneg, WeightMode::Softmax, WeightMode::SoftmaxAlpha, WeightMode::Unit] {
            let mut cs = Coreset::new(Tensor::zeros(m, 1), Labels::Hard(vec![0; m]), 2, mode, n).unwrap();
            cs.beta = beta.clone();
            cs.alpha = alpha;
            cs.v_raw = beta.iter().map(|b| b.abs()).collect();
            let v = cs.weights();
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            if mode == WeightMode::Softmax {
                prop_assert!((v.iter().sum::<f64>() - n as f64).abs() < 1e-9 * n as f64);
            }
            if matches!(mode, WeightMode::Softmax | WeightMode::SoftmaxAlpha) && alpha > 0.0 {
                for i in 0..m {
                    for j in 0..m {
                        if beta[i] > beta[j] {
                            prop_assert!(v[i] >= v[j]);
                        }
                    }
                }
            }
            // the tape agrees with the numeric weights
            let mut t = Tape::new();
            let cv = cs.on_tape(&mut t);
            let tv = t.value(cv.weights).data().to_vec();
            for (a, b) in tv.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn projection_restores_feasibility(v in prop::collection::vec(-4.0..4.0f64, 1..10), alpha in -2.0..2.0f64) {
        let m = v.len();
        let mut cs = Coreset::new(Tensor::zeros(m, 1), Labels::Hard(vec![0; m]), 2, WeightMode::FreeNonneg, 10).unwrap();
        cs.v_raw = v.clone();
        cs.alpha = alpha;
        cs.project();
        prop_assert!(cs.v_raw.iter().all(|&x| x >= 0.0));
        prop_assert!(cs.alpha >= 0.0);
        for (a, b) in cs.v_raw.iter().zip(&v) {
            prop_assert!(*b < 0.0 || a == b);
        }
    }

    #[test]
    fn analytic_kl_is_nonnegative_and_matches_tape(
        means in prop::collection::vec(-2.0..2.0f64, 1..6),
        seed in 0u64..1000,
    ) {
        let p = means.len();
        let mut r = rng::stream(seed, Stream::Init);
        let log_stds: Vec<f64> = rng::standard_normal(&mut r, 1, p).data().iter().map(|z| 0.5 * z).collect();
        let prior: Vec<f64> = (0..p).map(|i| 0.5 + i as f64 * 0.3).collect();
        let psi = VariationalGaussian { means, log_stds };
        let kl = psi.kl_to_prior(&prior);
        prop_assert!(kl >= -1e-12);
        let mut t = Tape::new();
        let pv = psi.constants(&mut t);
        let node = variational::kl_to_prior(&mut t, pv, &prior);
        prop_assert!((t.item(node) - kl).abs() < 1e-10);
        let at_prior = VariationalGaussian::from_prior(&prior).kl_to_prior(&prior);
        prop_assert!(at_prior.abs() < 1e-12);
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..12, k in 1usize..40, n in 1usize..6, seed in 0u64..1000) {
        let mut r = rng::stream(seed, Stream::Data);
        let a = rng::standard_normal(&mut r, m, k);
        let b = rng::standard_normal(&mut r, k, n);
        prop_assert!(a.matmul(&b).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn reverse_mode_matches_finite_differences(a in tensor(3, 4), b in tensor(4, 2), c in tensor(1, 2)) {
        // f = Σ logsumexp_rows(tanh(A·B) ⊙ c) + Σ (A·B)² / 10
        let f = |a: &Tensor, b: &Tensor, c: &Tensor| -> (f64, Vec<Tensor>) {
            let mut t = Tape::new();
            let (av, bv, cv) = (t.variable("a", a.clone()), t.variable("b", b.clone()), t.variable("c", c.clone()));
            let ab = t.matmul(av, bv);
            let th = t.tanh(ab);
            let sc = t.mul(th, cv);
            let lse = t.logsumexp(sc, Axis::Cols).unwrap();
            let s1 = t.sum_all(lse);
            let sq = t.square(ab);
            let s2 = t.sum_all(sq);
            let s2 = t.scale(s2, 0.1);
            let y = t.add(s1, s2);
            (t.item(y), t.gradient(y, &[av, bv, cv]).unwrap())
        };
        let (_, grads) = f(&a, &b, &c);
        let inputs = [&a, &b, &c];
        let h = 1e-6;
        for (which, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let bump = |d: f64| {
                    let mut xs: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
                    xs[which].data_mut()[j] += d;
                    f(&xs[0], &xs[1], &xs[2]).0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                prop_assert!((g.data()[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn multinomial_counts_account_for_every_draw(v in prop::collection::vec(0.0..5.0f64, 1..30), draws in 1usize..200, seed in 0u64..100) {
        prop_assume!(v.iter().any(|&w| w > 0.0));
        let counts = multinomial_counts(&v, draws, &mut rng::stream(seed, Stream::Prune)).unwrap();
        prop_assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), draws);
        prop_assert!(counts.iter().all(|&(i, _)| v[i] > 0.0));
    }

    #[test]
    fn split_partitions_the_data(n in 2usize..300, frac in 0.05..0.9f64, seed in 0u64..100) {
        let ds = data::gen_four_class(n, seed);
        let (train, test) = ds.split(frac, &mut rng::stream(seed, Stream::Split));
        prop_assert_eq!(train.len() + test.len(), n);
        let mut all: Vec<Vec<u64>> = train.x.data().chunks(2).chain(test.x.data().chunks(2))
            .map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = ds.x.data().chunks(2).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn scaler_round_trips(x in tensor(6, 3)) {
        let s = Scaler::fit(&x);
        prop_assert!(s.inverse(&s.transform(&x)).max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn subset_init_is_class_balanced(m in 4usize..40, seed in 0u64..50) {
        let ds = data::gen_four_class(200, seed);
        let cs = init_coreset(InitStrategy::Subset, &ds, m, WeightMode::Softmax, seed).unwrap();
        let counts = cs.label_probs().transpose().matmul(&Tensor::ones(m, 1));
        let (lo, hi) = counts.data().iter().fold((f64::MAX, 0.0f64), |(l, h), &c| (l.min(c), h.max(c)));
        prop_assert!(hi - lo <= 1.0);
    }

    #[test]
    fn predictive_probabilities_are_distributions(theta in prop::collection::vec(-2.0..2.0f64, 27), x in tensor(5, 2)) {
        let model = Model::new(ModelSpec::bnn(2, vec![4], 3)).unwrap();
        prop_assert_eq!(model.param_len(), 27);
        let p = model.predict_probs(&theta, &x).unwrap();
        for i in 0..p.rows() {
            prop_assert!((p.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn libsvm_parsing_fills_missing_features_with_zero() {
    let ds = data::parse_libsvm("+1 1:0.5 3:2\n-1 2:1\n", Some(4)).unwrap();
    assert_eq!(ds.x.shape(), (2, 4));
    assert_eq!(ds.x.row_slice(0), &[0.5, 0.0, 2.0, 0.0]);
    assert_eq!(ds.x.row_slice(1), &[0.0, 1.0, 0.0, 0.0]);
    assert_eq!(ds.num_classes, 2);
    let labels: Vec<usize> = ds.y.clone();
    assert_ne!(labels[0], labels[1]);
    let _: Dataset = ds;
}
