//! Builds prototypes from scored features, then folds in a few minibatches.

use pacf::mathcore::{cosine_similarity, FeatureVector};
use pacf::prototypes::{blend_weight, initialize_prototypes, Domain, ScoredFeatureBatch};

fn main() -> pacf::Result<()> {
    let features = vec![
        FeatureVector::new(vec![1.0, 0.1, 0.0])?,
        FeatureVector::new(vec![0.9, -0.1, 0.1])?,
        FeatureVector::new(vec![0.0, 1.0, 0.2])?,
        FeatureVector::new(vec![0.1, 0.8, 0.0])?,
        FeatureVector::new(vec![-1.0, 0.0, 0.0])?,
    ];
    let labels = vec![0, 0, 1, 1, 2];
    // the last row is not confident enough to seed class 2
    let scores = vec![0.95, 0.9, 0.85, 0.99, 0.4];
    let batch = ScoredFeatureBatch::new(features, labels, scores)?;
    let mut set = initialize_prototypes(&batch, 0.8, Domain::Target, 3)?;
    for k in 0..3 {
        println!("class {k}: initialized = {}", set.is_initialized(k));
    }

    let minibatches: [(&[[f64; 3]], &[usize]); 3] = [
        (&[[0.0, 0.0, 1.0], [0.2, 0.0, 1.0]], &[0, 0]),
        (&[[-1.0, 0.0, 0.0]], &[0]),
        (&[[0.0, -1.0, 0.0], [0.0, 0.0, -1.0]], &[2, 2]),
    ];
    for (rows, labels) in minibatches {
        let before = set.get(0)?.to_vec();
        if labels[0] == 0 {
            let mean: Vec<f64> = (0..3)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                .collect();
            println!("alpha for class 0 = {:.4}", blend_weight(&before, &mean)?);
        }
        set.update_all(rows, labels)?;
        println!(
            "class 0 moved by cos {:.4}, class 2 initialized = {}",
            cosine_similarity(&before, set.get(0)?)?,
            set.is_initialized(2)
        );
    }
    println!("{}", serde_json::to_string_pretty(&set)?);
    Ok(())
}
