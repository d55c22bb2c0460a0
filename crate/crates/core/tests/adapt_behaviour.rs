use pacf::adapt::{
    ema_update, generate_pseudo_labels, predict, AdaptationState, ModelParams, TrainerConfig,
};
use pacf::losses::{LossWeights, RegularizerKind};
use pacf::mathcore::{finite_difference_gradient, norm, relative_gradient_error};
use pacf::synthbench::{generate, DatasetPair, DomainShiftSpec, MeanShift};

fn small_pair(seed: u64) -> DatasetPair {
    generate(&DomainShiftSpec {
        class_count: 3,
        dim: 4,
        samples_per_class: 30,
        target_mean_shift: MeanShift::Magnitude(0.5),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        feature_dim: 3,
        warmup_steps: 60,
        steps: 5,
        batch_size: 16,
        pseudo_threshold: 0.4,
        init_threshold: 0.4,
        ema_rate: 0.9,
        seed,
        ..Default::default()
    }
}

fn diff_norm(a: &ModelParams, b: &ModelParams) -> f64 {
    let d: Vec<f64> = a
        .to_flat()
        .iter()
        .zip(b.to_flat())
        .map(|(x, y)| x - y)
        .collect();
    norm(&d)
}

fn prepared_with_all_prototypes(seed: u64, cfg: &TrainerConfig) -> (DatasetPair, AdaptationState) {
    let pair = small_pair(seed);
    let mut state = AdaptationState::prepare(pair.training_view(), 3, cfg).unwrap();
    // a few adaptation steps so prototypes have moved and backfilled
    for _ in 0..3 {
        state.train_step(pair.training_view(), cfg).unwrap();
    }
    assert!(state.src_protos.is_fully_initialized() && state.tgt_protos.is_fully_initialized());
    (pair, state)
}

fn objective_fd(state: &AdaptationState, pair: &DatasetPair, cfg: &TrainerConfig) -> Vec<f64> {
    finite_difference_gradient(
        |x| {
            let mut probe = state.clone();
            probe.student = state.student.with_flat(x)?;
            probe.objective(pair.training_view(), cfg).map(|(v, _)| v)
        },
        &state.student.to_flat(),
        1e-5,
    )
    .unwrap()
}

#[test]
fn objective_gradient_matches_finite_differences() {
    for (seed, kind) in [
        (1, RegularizerKind::Jsd),
        (2, RegularizerKind::Kl),
        (3, RegularizerKind::L2),
    ] {
        let cfg = TrainerConfig {
            regularizer: kind,
            warmup_steps: 200,
            weights: LossWeights {
                dis: 0.0,
                ..Default::default()
            },
            ..small_config(seed)
        };
        let (pair, state) = prepared_with_all_prototypes(seed, &cfg);
        let (_, grad) = state.objective(pair.training_view(), &cfg).unwrap();
        let err = relative_gradient_error(&grad.to_flat(), &objective_fd(&state, &pair, &cfg));
        assert!(err < 1e-4, "{kind:?}: relative error {err}");
    }
}

#[test]
fn adversarial_gradient_is_reversed_only_for_the_extractor() {
    let cfg = TrainerConfig {
        warmup_steps: 200,
        weights: LossWeights {
            unsup: 0.0,
            dis: 1.0,
            pce: 0.0,
            mutual: 0.0,
        },
        ..small_config(12)
    };
    let (pair, mut state) = prepared_with_all_prototypes(12, &cfg);
    state.student.discriminator.weights = vec![0.7, -0.4, 0.2];
    let sup_only = TrainerConfig {
        weights: LossWeights {
            unsup: 0.0,
            dis: 0.0,
            pce: 0.0,
            mutual: 0.0,
        },
        ..cfg.clone()
    };
    let (_, g_all) = state.objective(pair.training_view(), &cfg).unwrap();
    let (_, g_sup) = state.objective(pair.training_view(), &sup_only).unwrap();
    let fd_all = objective_fd(&state, &pair, &cfg);
    let fd_sup = objective_fd(&state, &pair, &sup_only);
    let analytic: Vec<f64> = g_all
        .to_flat()
        .iter()
        .zip(g_sup.to_flat())
        .map(|(a, b)| a - b)
        .collect();
    let numeric: Vec<f64> = fd_all.iter().zip(&fd_sup).map(|(a, b)| a - b).collect();
    let n_extractor = state.student.extractor.len() + state.student.extractor_bias.len();
    let flipped: Vec<f64> = numeric[..n_extractor].iter().map(|v| -v).collect();
    assert!(relative_gradient_error(&analytic[..n_extractor], &flipped) < 1e-4);
    assert!(relative_gradient_error(&analytic[n_extractor..], &numeric[n_extractor..]) < 1e-4);
    assert!(numeric[..n_extractor].iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn ema_converges_geometrically() {
    let student = ModelParams::init(4, 3, 2, 1).unwrap();
    let mut teacher = ModelParams::init(4, 3, 2, 2).unwrap();
    let d0 = diff_norm(&teacher, &student);
    let r: f64 = 0.9;
    for n in 1..=60 {
        teacher = ema_update(&teacher, &student, r).unwrap();
        let expected = r.powi(n) * d0;
        assert!(
            (diff_norm(&teacher, &student) - expected).abs() < 1e-9,
            "step {n}"
        );
    }
}

#[test]
fn pseudo_label_count_monotone_in_threshold() {
    let pair = small_pair(4);
    let state = AdaptationState::prepare(pair.training_view(), 3, &small_config(4)).unwrap();
    let mut last = usize::MAX;
    for t in [0.05, 0.3, 0.5, 0.7, 0.8, 0.9, 0.99, 1.0, 1.01] {
        let n = generate_pseudo_labels(&state.teacher, pair.target_features(), t)
            .unwrap()
            .len();
        assert!(n <= last);
        last = n;
    }
    assert_eq!(last, 0);
}

#[test]
fn inference_ignores_prototypes_and_discriminator() {
    let pair = small_pair(5);
    let state = AdaptationState::prepare(pair.training_view(), 3, &small_config(5)).unwrap();
    let mut perturbed = state.clone();
    perturbed.src_protos =
        pacf::prototypes::PrototypeSet::new(pacf::prototypes::Domain::Source, 3, 3);
    perturbed.tgt_protos.set(0, &[0.0, 0.0, 1.0]).unwrap();
    perturbed.student.discriminator.weights = vec![100.0, -3.0, 7.0];
    perturbed.student.discriminator.bias = -42.0;
    for x in pair.target_features() {
        assert_eq!(
            predict(&state.student, x).unwrap(),
            predict(&perturbed.student, x).unwrap()
        );
    }
}

#[test]
fn runs_are_deterministic() {
    let pair = small_pair(6);
    let cfg = TrainerConfig {
        steps: 20,
        ..small_config(6)
    };
    let run = || {
        let mut s = AdaptationState::prepare(pair.training_view(), 3, &cfg).unwrap();
        let h = s.train_run(pair.training_view(), &cfg).unwrap();
        (
            serde_json::to_string(&s).unwrap(),
            serde_json::to_string(&h).unwrap(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_freezes_student() {
    let pair = small_pair(7);
    let cfg = TrainerConfig {
        learning_rate: 0.0,
        ..small_config(7)
    };
    let mut state = AdaptationState::prepare(pair.training_view(), 3, &small_config(7)).unwrap();
    state.teacher = ModelParams::init(4, 3, 3, 99).unwrap();
    let before = state.clone();
    state.train_step(pair.training_view(), &cfg).unwrap();
    assert_eq!(state.student, before.student);
    assert_eq!(state.step, 1);
    let expected_teacher = ema_update(&before.teacher, &before.student, cfg.ema_rate).unwrap();
    assert_eq!(state.teacher, expected_teacher);
}

#[test]
fn one_step_run_equals_single_step() {
    let pair = small_pair(8);
    let cfg = TrainerConfig {
        steps: 1,
        ..small_config(8)
    };
    let start = AdaptationState::prepare(pair.training_view(), 3, &cfg).unwrap();
    let mut a = start.clone();
    let mut b = start;
    let ha = a.train_run(pair.training_view(), &cfg).unwrap();
    let rb = b.train_step(pair.training_view(), &cfg).unwrap();
    assert_eq!(ha, vec![rb]);
    assert_eq!(a, b);
}

#[test]
fn step_counter_increases_and_records_match() {
    let pair = small_pair(9);
    let cfg = TrainerConfig {
        steps: 7,
        ..small_config(9)
    };
    let mut s = AdaptationState::prepare(pair.training_view(), 3, &cfg).unwrap();
    let h = s.train_run(pair.training_view(), &cfg).unwrap();
    assert_eq!(h.len(), 7);
    assert_eq!(s.step, 7);
    for (i, r) in h.iter().enumerate() {
        assert_eq!(r.step, i as u64);
    }
}

#[test]
fn default_benchmark_history_is_finite() {
    let pair = generate(&DomainShiftSpec::default()).unwrap();
    let cfg = TrainerConfig {
        steps: 300,
        ..TrainerConfig::desk()
    };
    let mut s = AdaptationState::prepare(pair.training_view(), 8, &cfg).unwrap();
    let h = s.train_run(pair.training_view(), &cfg).unwrap();
    assert_eq!(h.len(), 300);
    assert!(h.iter().all(|r| r.is_finite()));
    assert!(h
        .iter()
        .any(|r| r.pce > 0.0 && r.mutual > 0.0 && r.dis > 0.0));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let pair = small_pair(10);
    let mut state = AdaptationState::prepare(pair.training_view(), 3, &small_config(10)).unwrap();
    let other = generate(&DomainShiftSpec {
        class_count: 3,
        dim: 5,
        samples_per_class: 10,
        ..Default::default()
    })
    .unwrap();
    let before = state.clone();
    let err = state
        .train_step(other.training_view(), &small_config(10))
        .unwrap_err();
    assert!(matches!(err, pacf::PacfError::DimensionMismatch { .. }));
    assert_eq!(state, before);
    assert!(predict(&state.student, &[1.0, 2.0]).is_err());
}

#[test]
fn checkpoint_state_round_trips_through_json() {
    let pair = small_pair(11);
    let mut state = AdaptationState::prepare(pair.training_view(), 3, &small_config(11)).unwrap();
    state
        .train_run(pair.training_view(), &small_config(11))
        .unwrap();
    let text = serde_json::to_string(&state).unwrap();
    let back: AdaptationState = serde_json::from_str(&text).unwrap();
    assert_eq!(back, state);
}

#[test]
fn single_class_model_trains() {
    let pair = generate(&DomainShiftSpec {
        class_count: 1,
        dim: 3,
        samples_per_class: 40,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainerConfig {
        feature_dim: 2,
        warmup_steps: 10,
        steps: 10,
        batch_size: 8,
        weights: LossWeights::default(),
        ..Default::default()
    };
    let mut s = AdaptationState::prepare(pair.training_view(), 1, &cfg).unwrap();
    let h = s.train_run(pair.training_view(), &cfg).unwrap();
    assert!(h.iter().all(|r| r.is_finite()));
}
