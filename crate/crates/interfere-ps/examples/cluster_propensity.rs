//! Cluster-level propensity scores: the joint probability of an entire
//! treatment vector, with the shared random intercept integrated out.

use interfere_ps::estimands::MixedCps;
use interfere_ps::mixed_model::{cluster_prob, CpsQuery};
use interfere_ps::study::all_treatment_vectors;

fn main() -> interfere_ps::Result<()> {
    let covariates = vec![vec![0.8], vec![-0.3], vec![1.4], vec![0.0]];
    let cps = MixedCps::from_parameters(vec![0.6], 1.0, 30)?;

    println!("P(Z = w | X) over all 2^4 treatment vectors:");
    let mut total = 0.0;
    for w in all_treatment_vectors(covariates.len()) {
        let query = CpsQuery::new(&covariates, &w)?;
        let prob = cluster_prob(&query, &cps.fit, &cps.rule)?;
        total += prob;
        println!("  {:?}  {prob:.6}", w.values);
    }
    println!("sum: {total:.12}");
    Ok(())
}
