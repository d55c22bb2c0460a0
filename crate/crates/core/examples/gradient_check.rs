//! Compares the analytic gradients of the prototype losses with central
//! differences on one random configuration.

use pacf::losses::{
    prototype_cross_entropy, regularizer_variant, PrototypePosterior, RegularizerKind,
};
use pacf::mathcore::{finite_difference_gradient, relative_gradient_error};
use pacf::prototypes::{Domain, PrototypeSet};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> pacf::Result<()> {
    let mut rng = pacf::rng::derive(3, 0, 0);
    let (classes, dim, tau) = (4, 6, 0.1);
    let mut random_set = |domain| -> pacf::Result<PrototypeSet> {
        let mut set = PrototypeSet::new(domain, classes, dim);
        for k in 0..classes {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            set.set(k, &v)?;
        }
        Ok(set)
    };
    let src = random_set(Domain::Source)?;
    let tgt = random_set(Domain::Target)?;
    let x: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.7).sin()).collect();

    let l = prototype_cross_entropy(&x, 2, &src, &tgt, tau)?;
    let num = finite_difference_gradient(
        |v| prototype_cross_entropy(v, 2, &src, &tgt, tau).map(|l| l.value),
        &x,
        1e-5,
    )?;
    println!(
        "L_pce = {:.6}, relative error {:.2e}",
        l.value,
        relative_gradient_error(&l.grad_features[0], &num)
    );

    // mutual term with a fixed linear posterior, gradient on the feature only
    let p_lin = [0.1, 0.2, 0.6, 0.1];
    for kind in [
        RegularizerKind::Jsd,
        RegularizerKind::Kl,
        RegularizerKind::L2,
    ] {
        let value = |v: &[f64]| -> pacf::Result<f64> {
            let ps = PrototypePosterior::new(v, &src, tau)?;
            let pt = PrototypePosterior::new(v, &tgt, tau)?;
            Ok(regularizer_variant(&p_lin, &ps.probs, &pt.probs, kind)?.value)
        };
        let ps = PrototypePosterior::new(&x, &src, tau)?;
        let pt = PrototypePosterior::new(&x, &tgt, tau)?;
        let l = regularizer_variant(&p_lin, &ps.probs, &pt.probs, kind)?;
        let analytic: Vec<f64> = ps
            .backward(&l.grad_src)
            .iter()
            .zip(pt.backward(&l.grad_tgt))
            .map(|(a, b)| a + b)
            .collect();
        let num = finite_difference_gradient(value, &x, 1e-5)?;
        println!(
            "{kind:?}: value {:.6}, relative error {:.2e}",
            l.value,
            relative_gradient_error(&analytic, &num)
        );
    }
    Ok(())
}
