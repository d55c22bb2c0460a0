//! Generates the default shifted benchmark, writes the dumps and checks the
//! per-class spread and shift against the construction.

use std::path::PathBuf;

use pacf::metrics::{intra_class_variance, mean_shift};
use pacf::synthbench::{generate, save_dump, DomainShiftSpec, FeatureDump};

fn main() -> pacf::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let spec = DomainShiftSpec::default();
    let pair = generate(&spec)?;
    println!(
        "{} classes, d = {}, {} source rows, {} target rows",
        spec.class_count,
        spec.dim,
        pair.source().len(),
        pair.target_features().len()
    );

    let src = &pair.source().features;
    let tgt = pair.target_features();
    let vs = intra_class_variance(src, &pair.source().labels)?;
    let vt = intra_class_variance(tgt, pair.hidden_labels())?;
    let shift = mean_shift(src, &pair.source().labels, tgt, pair.hidden_labels())?;
    println!("class  var_src  var_tgt  ratio  shift");
    for k in vs.keys() {
        println!(
            "{k:>5}  {:7.2}  {:7.2}  {:5.2}  {:5.3}",
            vs[k],
            vt[k],
            vt[k] / vs[k],
            shift[k]
        );
    }
    println!(
        "expected ratio {:.2}",
        spec.target_std_multiplier * spec.target_std_multiplier
    );

    let path = out.join("pacf_source.csv");
    save_dump(&FeatureDump::labeled(pair.source()), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
