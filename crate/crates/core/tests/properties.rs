use pacf::losses::{
    mutual_regularization, prototype_cross_entropy, total_loss, LossComponents, LossValue,
    LossWeights,
};
use pacf::mathcore::{
    cosine_similarity, js_divergence, kl_divergence, l2_normalize, norm, temperature_softmax,
};
use pacf::prototypes::{blend_weight, update_prototype, Domain, PrototypeSet};
use proptest::prelude::*;

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("all-zero weights", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|v| v / s).collect())
    })
}

fn prob_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| (probs(n), probs(n)))
}

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d).prop_filter("near zero", |v| norm(v) > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn softmax_sums_to_one(scores in prop::collection::vec(-50.0f64..50.0, 1..12), log_tau in -3.0f64..3.0) {
        let tau = 10f64.powf(log_tau);
        let p = temperature_softmax(&scores, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariant(scores in prop::collection::vec(-5.0f64..5.0, 2..10), c in -100.0f64..100.0, tau in 0.05f64..5.0) {
        let a = temperature_softmax(&scores, tau).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let b = temperature_softmax(&shifted, tau).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_bounds((p, q) in prob_pair()) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        let js = js_divergence(&p, &q).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
        prop_assert_eq!(js.to_bits(), js_divergence(&q, &p).unwrap().to_bits());
    }

    #[test]
    fn cosine_ignores_scale((v, w) in (2usize..8).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d)))) {
        let a = cosine_similarity(&v, &w).unwrap();
        let b = cosine_similarity(&l2_normalize(&v).unwrap(), &l2_normalize(&w).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn prototype_update_stays_on_sphere((prev, mean) in (2usize..8).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d)))) {
        let prev = l2_normalize(&prev).unwrap();
        let alpha = blend_weight(&prev, &mean).unwrap();
        prop_assert!((0.0..=1.0).contains(&alpha));
        if let Ok(next) = update_prototype(&prev, &mean) {
            prop_assert!((norm(&next) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn blend_weight_monotone_in_cosine(d in 2usize..6, t1 in 0.0f64..3.0, t2 in 0.0f64..3.0, r in 0.1f64..10.0) {
        // means at angles t1, t2 from prev in one plane
        let mut prev = vec![0.0; d];
        prev[0] = 1.0;
        let at = |t: f64| { let mut m = vec![0.0; d]; m[0] = r * t.cos(); m[1] = r * t.sin(); m };
        let (a1, a2) = (blend_weight(&prev, &at(t1)).unwrap(), blend_weight(&prev, &at(t2)).unwrap());
        if t1 < t2 {
            prop_assert!(a1 >= a2);
        }
    }

    #[test]
    fn update_is_local(seed_vecs in prop::collection::vec(nonzero_vec(5), 3), batch in prop::collection::vec(nonzero_vec(5), 1..6)) {
        let mut set = PrototypeSet::new(Domain::Source, 3, 5);
        for (k, v) in seed_vecs.iter().enumerate() {
            set.set(k, v).unwrap();
        }
        let before: Vec<Vec<u64>> = (0..3).map(|k| set.get(k).unwrap().iter().map(|v| v.to_bits()).collect()).collect();
        let labels = vec![1; batch.len()];
        set.update_all(&batch, &labels).unwrap();
        for k in [0, 2] {
            let after: Vec<u64> = set.get(k).unwrap().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(&before[k], &after);
        }
    }

    #[test]
    fn mutual_regularization_symmetric_in_prototype_posteriors(p in probs(5), s in probs(5), t in probs(5)) {
        let a = mutual_regularization(&p, &s, &t).unwrap().value;
        let b = mutual_regularization(&p, &t, &s).unwrap().value;
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn pce_nonnegative(x in nonzero_vec(4), protos in prop::collection::vec(nonzero_vec(4), 6), label in 0usize..3) {
        let mut src = PrototypeSet::new(Domain::Source, 3, 4);
        let mut tgt = PrototypeSet::new(Domain::Target, 3, 4);
        for k in 0..3 {
            src.set(k, &protos[k]).unwrap();
            tgt.set(k, &protos[k + 3]).unwrap();
        }
        let l = prototype_cross_entropy(&x, label, &src, &tgt, 0.05).unwrap();
        prop_assert!(l.value >= 0.0);
        // prototypes are buffers: no parameter gradient is produced
        prop_assert!(l.grad_params.is_empty());
    }

    #[test]
    fn total_loss_linear_in_weights(vals in prop::collection::vec(0.0f64..10.0, 5), lam in 0.01f64..3.0, which in 0usize..4) {
        let part = |v: f64| LossValue { value: v, grad_features: vec![vec![v, -v]], grad_params: vec![2.0 * v] };
        let comps = LossComponents { sup: part(vals[0]), unsup: part(vals[1]), dis: part(vals[2]), pce: part(vals[3]), mutual: part(vals[4]) };
        let with = |l: f64| {
            let mut w = LossWeights::default();
            match which { 0 => w.unsup = l, 1 => w.dis = l, 2 => w.pce = l, _ => w.mutual = l }
            total_loss(&comps, &w).unwrap().value
        };
        let (v0, v1, v2) = (with(0.0), with(lam), with(2.0 * lam));
        prop_assert!(((v2 - v1) - (v1 - v0)).abs() < 1e-12);
    }
}

#[test]
fn pce_minimum_at_one_hot_posteriors() {
    let mut src = PrototypeSet::new(Domain::Source, 2, 2);
    let mut tgt = PrototypeSet::new(Domain::Target, 2, 2);
    for set in [&mut src, &mut tgt] {
        set.set(0, &[1.0, 0.0]).unwrap();
        set.set(1, &[-1.0, 0.0]).unwrap();
    }
    // cos gap of 2 at τ = 0.01 gives posteriors one-hot to far below ε
    let l = prototype_cross_entropy(&[3.0, 0.0], 0, &src, &tgt, 0.01).unwrap();
    assert!(l.value < 1e-80);
}
