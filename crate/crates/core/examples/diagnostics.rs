//! Every distribution diagnostic on a pair of hand-made embedding clouds.

use pacf::metrics::{
    intra_class_variance, kendall_tau, mean_shift, pca_project_2d, proxy_a_distance, spearman_rho,
    tp_ratio,
};
use rand::Rng;
use rand_distr::StandardNormal;

fn cloud(seed: u64, center: f64, spread: f64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = pacf::rng::derive(seed, 0, 0);
    (0..n)
        .map(|i| {
            let c = if i % 2 == 0 { center } else { -center };
            (0..4)
                .map(|_| c + spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn main() -> pacf::Result<()> {
    let labels: Vec<usize> = (0..300).map(|i| i % 2).collect();
    let source = cloud(1, 2.0, 1.0, 300);
    // wider, and translated along the last axis
    let mut target = cloud(2, 2.5, 1.5, 300);
    for x in &mut target {
        x[3] += 1.5;
    }

    println!(
        "variance source {:?}",
        intra_class_variance(&source, &labels)?
    );
    println!(
        "variance target {:?}",
        intra_class_variance(&target, &labels)?
    );
    println!(
        "mean shift {:?}",
        mean_shift(&source, &labels, &target, &labels)?
    );
    println!(
        "proxy A-distance {:.3}",
        proxy_a_distance(&source, &target, 0)?
    );
    println!(
        "proxy A-distance, same distribution {:.3}",
        proxy_a_distance(&source, &cloud(3, 2.0, 1.0, 300), 0)?
    );

    let scores: Vec<f64> = target.iter().map(|x| x[0]).collect();
    let cosines: Vec<f64> = target.iter().map(|x| x[0] + 0.5 * x[1]).collect();
    println!(
        "rho {:.4} tau {:.4}",
        spearman_rho(&scores, &cosines)?,
        kendall_tau(&scores, &cosines)?
    );

    let pseudo: Vec<(usize, usize)> = target
        .iter()
        .enumerate()
        .filter(|(_, x)| x[0].abs() > 1.0)
        .map(|(i, x)| (i, usize::from(x[0] < 0.0)))
        .collect();
    let tp = tp_ratio(&pseudo, &labels)?;
    println!(
        "pseudo labels {} tp {:?} avg {:?}",
        pseudo.len(),
        tp.per_class,
        tp.average
    );

    let proj = pca_project_2d(&target)?;
    println!("first projected rows {:?}", &proj[..3]);
    Ok(())
}
