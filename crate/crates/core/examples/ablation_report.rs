//! Trains the baseline, no-mutual and full variants through the command
//! layer and writes the comparison report.
//!
//! Usage: `cargo run --release --example ablation_report [out_dir]`

use std::fs;
use std::path::PathBuf;

use pacf::cli::{cmd_report, cmd_train, Ablation, ExperimentConfig};

fn main() -> pacf::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pacf_ablation"));
    let variants = [
        (
            "baseline",
            Ablation {
                enable_pce: false,
                regularizer: None,
                enable_adversarial: true,
            },
        ),
        (
            "no_mutual",
            Ablation {
                regularizer: None,
                ..Ablation::default()
            },
        ),
        ("full", Ablation::default()),
    ];
    let mut runs = Vec::new();
    for (name, ablation) in variants {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| pacf::PacfError::Io {
            path: dir.clone(),
            source: e,
        })?;
        let config = ExperimentConfig {
            ablation,
            ..Default::default()
        };
        let outcome = cmd_train(&config, &dir)?;
        println!(
            "{name:>9}: target variance {:.3} shift {:.3} rho {:.4} tau {:.4}",
            outcome.report.variance.target_avg.unwrap_or(f64::NAN),
            outcome.report.mean_shift.average.unwrap_or(f64::NAN),
            outcome.report.spearman_rho,
            outcome.report.kendall_tau
        );
        runs.push(dir);
    }
    let report_dir = out.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| pacf::PacfError::Io {
        path: report_dir.clone(),
        source: e,
    })?;
    for f in cmd_report(&runs, &report_dir)? {
        println!("wrote {}", report_dir.join(f).display());
    }
    Ok(())
}
