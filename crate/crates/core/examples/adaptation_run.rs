//! Warm-up, prototype initialization and a short adaptation run on the
//! default benchmark, printing the loss terms as they go.

use pacf::adapt::{evaluate, AdaptationState, EvalData, EvalModel, TrainerConfig};
use pacf::synthbench::{generate, DomainShiftSpec};

fn main() -> pacf::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let pair = generate(&DomainShiftSpec {
        seed,
        ..Default::default()
    })?;
    let config = TrainerConfig {
        steps: 400,
        seed,
        ..TrainerConfig::desk()
    };
    let mut state = AdaptationState::prepare(pair.training_view(), 8, &config)?;
    println!(
        "after warm-up: {} source and {} target prototypes ready",
        (0..8)
            .filter(|&k| state.src_protos.is_initialized(k))
            .count(),
        (0..8)
            .filter(|&k| state.tgt_protos.is_initialized(k))
            .count()
    );

    println!("step   L_sup  L_unsup   L_dis   L_pce   L_mut  pseudo");
    for _ in 0..config.steps {
        let r = state.train_step(pair.training_view(), &config)?;
        if r.step % 50 == 0 {
            println!(
                "{:>4} {:7.4} {:8.4} {:7.4} {:7.4} {:7.4} {:7}",
                r.step, r.sup, r.unsup, r.dis, r.pce, r.mutual, r.pseudo_count
            );
        }
    }

    let data = EvalData {
        source: pair.source(),
        target: pair.target_features(),
        target_labels: Some(pair.hidden_labels()),
    };
    let report = evaluate(
        &state,
        EvalModel::Teacher,
        data,
        config.pseudo_threshold,
        "",
    )?;
    print!("{}", report.summary_csv());
    Ok(())
}
