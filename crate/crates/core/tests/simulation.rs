use misscate::learners::LearnerSpec;
use misscate::meta::{default_stage2, CateLearner, MissingPolicy, PipelineConfig, Variant};
use misscate::nuisance::NuisanceSpecs;
use misscate::sim::study::compare_t_and_dr;
use misscate::sim::{generate_dgp, run_study, DgpId, StudyConfig};

#[test]
fn dr_beats_t_where_one_arm_is_rare() {
    let mut config = PipelineConfig::default();
    config.stage2 = LearnerSpec::stacked(vec![LearnerSpec::Mean, LearnerSpec::linear(), default_stage2()]);
    let cmp = compare_t_and_dr(2000, 3, 1000, &config, 4, 1).unwrap();
    let last = cmp.counts.len() - 1;
    assert!(cmp.counts[last] > 0);
    assert!(cmp.dr_mae[last] < cmp.t_mae[last], "{cmp:?}");
}

#[test]
fn binary_illustration_has_complete_outcomes() {
    let (train, test) = generate_dgp(DgpId::NullEffect, 300, 50, 1).unwrap();
    assert!(train.data.observed().iter().all(|&c| c));
    assert!(train
        .data
        .outcome()
        .iter()
        .all(|y| matches!(y, Some(v) if *v == 0.0 || *v == 1.0)));
    assert!(test.truth.theta.iter().all(|t| (-1.0..=1.0).contains(t)));
}

#[test]
fn study_is_reproducible_across_thread_counts() {
    let mut config = StudyConfig::new(
        vec![DgpId::Dgp2],
        vec![
            Variant::new(CateLearner::Mdr, MissingPolicy::Native).unwrap(),
            Variant::new(CateLearner::IptwIpcw, MissingPolicy::Native).unwrap(),
        ],
        vec![200, 400],
    );
    config.replicates = 3;
    config.test_size = 200;
    config.pipeline = PipelineConfig {
        nuisances: NuisanceSpecs::uniform(LearnerSpec::forest(20, 10)),
        stage2: LearnerSpec::forest(30, 10),
        ..PipelineConfig::default()
    };
    config.threads = Some(1);
    let a = run_study(&config).unwrap();
    config.threads = Some(3);
    let b = run_study(&config).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.dgps[0].learners.len(), 2);
}
