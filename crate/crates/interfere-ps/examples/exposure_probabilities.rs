//! Joint law of one unit's own treatment and its peer exposure count,
//! computed with the stratified Poisson-binomial recursion and checked
//! against brute-force enumeration of all treatment vectors.

use interfere_ps::estimands::MixedCps;
use interfere_ps::mixed_model::{cluster_prob, exposure_joint_prob, CpsQuery};
use interfere_ps::study::all_treatment_vectors;

fn main() -> interfere_ps::Result<()> {
    let covariates = vec![
        vec![0.2, -1.0],
        vec![0.9, 0.4],
        vec![-0.5, 0.0],
        vec![1.1, -0.2],
        vec![0.0, 0.7],
    ];
    let n = covariates.len();
    let cps = MixedCps::from_parameters(vec![0.7, -0.4], 0.8, 30)?;
    let j = 0;

    println!("unit {j} in a cluster of {n}: P(Z_j = z, G_j = g)");
    println!("{:>3} {:>3} {:>12} {:>12}", "z", "g", "stratified", "enumerated");
    let mut total = 0.0;
    for z in [0u8, 1] {
        for g in 0..n {
            let fast = exposure_joint_prob(&covariates, j, z, g, &cps.fit, &cps.rule)?;
            let brute: f64 = all_treatment_vectors(n)
                .iter()
                .filter(|w| {
                    let peers = w
                        .values
                        .iter()
                        .enumerate()
                        .filter(|&(k, &v)| k != j && v == 1)
                        .count();
                    w.values[j] == z && peers == g
                })
                .map(|w| {
                    let query = CpsQuery::new(&covariates, w).expect("shapes match");
                    cluster_prob(&query, &cps.fit, &cps.rule).expect("finite parameters")
                })
                .sum();
            total += fast;
            println!("{z:>3} {g:>3} {fast:>12.8} {brute:>12.8}");
        }
    }
    println!("total mass: {total:.12}");
    Ok(())
}
