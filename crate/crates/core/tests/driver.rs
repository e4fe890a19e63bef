use ucv_core::driver::{evaluate_test_set, run_campaign, Campaign, Method, RunConfig};
use ucv_core::acquisition::label_with_oracle;
use ucv_core::potentials::{Pes, PotentialKind};
use ucv_core::surrogate::{LabeledSet, Provenance};

fn quick() -> RunConfig {
    let mut c = RunConfig::default();
    c.generations = 1;
    c.test_points = 200;
    c.pmf_generations = Vec::new();
    c
}

#[test]
fn one_generation_campaign() {
    let out = run_campaign(quick()).unwrap();
    assert_eq!(out.reports.len(), 1);
    let r = &out.reports[0];
    assert_eq!(r.generation, 1);
    assert_eq!(r.dataset_size, 100);
    assert_eq!(r.runs.len(), 2);
    assert_eq!((r.runs[0].kt, r.runs[1].kt), (1.0, 1.667));
    assert_eq!(out.dataset.len(), 100 + r.acquired);
    assert!(r.acquired <= r.clusters && r.clusters <= r.candidates);
    assert_eq!(r.calibration_size, 20);
    assert!(r.pmf.is_none());
    assert!(!out.degenerate());
}

#[test]
fn dataset_is_append_only_with_generation_tags() {
    let mut c = quick();
    c.generations = 3;
    let mut camp = Campaign::new(c).unwrap();
    let mut sizes = vec![camp.dataset.len()];
    let mut prefix = camp.dataset.records().to_vec();
    for _ in 0..3 {
        let r = camp.run_generation().unwrap();
        assert_eq!(&camp.dataset.records()[..prefix.len()], prefix.as_slice());
        assert_eq!(camp.dataset.len(), r.dataset_size + r.acquired);
        prefix = camp.dataset.records().to_vec();
        sizes.push(camp.dataset.len());
    }
    for g in 0..=3u32 {
        let tag = if g == 0 { Provenance::Initial } else { Provenance::Generation(g) };
        let n = camp.dataset.records().iter().filter(|r| r.provenance == tag).count();
        let expected = if g == 0 { 100 } else { sizes[g as usize] - sizes[g as usize - 1] };
        assert_eq!(n, expected, "generation {g}");
    }
    let cov: Vec<f64> = camp.reports.iter().map(|r| r.coverage).collect();
    assert!(cov.windows(2).all(|w| w[1] >= w[0]), "{cov:?}");
}

#[test]
fn rerun_is_byte_identical() {
    let run = |dir: &std::path::Path| {
        let mut c = quick();
        c.generations = 2;
        c.output_dir = dir.to_string_lossy().into_owned();
        run_campaign(c).unwrap();
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    for f in ["dataset.csv", "reports/gen01.json", "reports/gen02.json", "reports/acquisition.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let lock_a = std::fs::read_to_string(a.path().join("config.lock")).unwrap();
    let lock = RunConfig::parse(&lock_a).unwrap();
    assert_eq!(lock.generations, 2);
    assert!(a.path().join("models/gen01_surrogate.json").exists());
    assert!(a.path().join("trajectories/gen01_run0.csv").exists());
    assert_eq!(ucv_core::driver::load_reports(a.path()).unwrap().len(), 2);
}

#[test]
fn resumed_campaign_matches_uninterrupted_one() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c = quick();
    c.generations = 2;
    c.output_dir = a.path().to_string_lossy().into_owned();
    run_campaign(c.clone()).unwrap();
    c.output_dir = b.path().to_string_lossy().into_owned();
    let mut first = Campaign::new(c).unwrap();
    first.run_generation().unwrap();
    drop(first);
    let mut resumed = Campaign::resume(b.path()).unwrap();
    assert_eq!(resumed.next_generation(), 2);
    resumed.run_generation().unwrap();
    for f in ["dataset.csv", "reports/gen02.json", "reports/acquisition.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn dense_accessible_region_acquires_little() {
    let mut c = quick();
    c.potential = PotentialKind::DoubleWellNd;
    c.potential_dim = 2;
    let mut camp = Campaign::new(c).unwrap();
    let gt = &camp.ground_truth;
    let n = 40;
    // every grid point below ~12 kT2; the walls beyond never get visited
    let cap = 20.0;
    let mut configs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let x = -3.0 + 6.0 * (i as f64 + 0.5) / n as f64;
            let y = -3.0 + 6.0 * (j as f64 + 0.5) / n as f64;
            if gt.energy(&[x, y]) <= cap {
                configs.push(gt.config(vec![x, y]));
            }
        }
    }
    let mut dense = LabeledSet::new();
    dense.extend(label_with_oracle(&configs, gt, Provenance::Initial).unwrap()).unwrap();
    camp.dataset = dense;
    let r = camp.run_generation().unwrap();
    assert!(r.acquired <= 5, "acquired {}", r.acquired);
}

#[test]
fn degenerate_generation_is_flagged_and_schedule_advances() {
    let mut c = quick();
    c.generations = 2;
    c.cv_abort = -1e6;
    let out = run_campaign(c).unwrap();
    assert!(out.degenerate());
    assert!(out.reports.iter().all(|r| r.degenerate && r.acquired == 0));
    assert!(out.reports[1].schedule.sigma < out.reports[0].schedule.sigma);
}

#[test]
fn baseline_methods_run() {
    for m in [Method::EnsembleCv, Method::BiasEnergy, Method::Unbiased] {
        let mut c = quick();
        c.method = m;
        let out = run_campaign(c).unwrap();
        let r = &out.reports[0];
        assert_eq!(r.method, m);
        assert_eq!(r.q_hat.is_some(), m != Method::EnsembleCv);
        assert_eq!(r.gamma.is_some(), m == Method::BiasEnergy);
        assert!(!r.degenerate);
    }
}

#[test]
fn production_model_beats_exploration_model_on_final_dataset() {
    let mut wins = 0;
    let mut seen = Vec::new();
    for seed in 1..=5 {
        let mut c = quick();
        c.generations = 3;
        c.test_points = 1000;
        c.seed = seed;
        let mut camp = Campaign::new(c).unwrap();
        for _ in 0..3 {
            camp.run_generation().unwrap();
        }
        let g = camp.next_generation();
        let explore = camp.fit_surrogate(&camp.dataset, camp.config.features_explore, g).unwrap();
        let production = camp.fit_surrogate(&camp.dataset, camp.config.features_production, g).unwrap();
        let (_, fe) = evaluate_test_set(&explore, &camp.test_set).unwrap();
        let (_, fp) = evaluate_test_set(&production, &camp.test_set).unwrap();
        seen.push((fe, fp));
        if fp <= fe {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{seen:?}");
}
