//! Cluster-level cross-fitting: balanced fold assignment and out-of-fold
//! propensity scores, so no unit is ever scored by a model that saw its
//! own cluster.

use interfere_ps::crossfit::{assign_folds, crossfit_propensity};
use interfere_ps::learners::LogisticLearner;
use interfere_ps::simulation::{
    generate, CovariateLaw, DgpConfig, OutcomeModel, PropensityTruth, SizeLaw,
};

fn main() -> interfere_ps::Result<()> {
    let config = DgpConfig {
        clusters: 24,
        size_law: SizeLaw::Uniform { lo: 2, hi: 4 },
        p: 1,
        covariate_law: CovariateLaw::StdNormal,
        propensity_truth: PropensityTruth::Linear { beta: vec![0.8] },
        sigma2_v: 0.5,
        outcome_model: OutcomeModel {
            intercept: 0.0,
            tau: 1.0,
            delta: 0.0,
            lambda: vec![0.0],
            noise_sd: 0.0,
        },
        seed: 5,
    };
    let sim = generate(&config)?;

    let k = 4;
    let folds = assign_folds(&sim.study, k, 9)?;
    let mut sizes = vec![0usize; k];
    for &fold in folds.fold_of_cluster.values() {
        sizes[fold] += 1;
    }
    println!(
        "{} clusters split into {k} folds of sizes {sizes:?}",
        sim.study.clusters.len()
    );

    let scores = crossfit_propensity(&sim.study, &folds, &LogisticLearner::default())?;
    println!("{:>10} {:>5} {:>3} {:>8} {:>5}", "cluster", "unit", "z", "ehat", "fold");
    for unit in sim.study.units().take(12) {
        let ehat = scores.get(&unit.cluster_id, unit.unit_index).expect("scored");
        let fold = folds.fold_of_cluster[&unit.cluster_id];
        println!(
            "{:>10} {:>5} {:>3} {:>8.4} {:>5}",
            unit.cluster_id, unit.unit_index, unit.treatment, ehat, fold
        );
    }
    println!("(first 12 units shown)");
    Ok(())
}
