use l2cal::models::lookup_scenario;
use l2cal::simharness::{
    calibrate_dataset, generate_replicate, run_study, summary_csv, Analysis, Engine, StudyConfig,
};
use l2cal::smoother::Dataset;

fn config(scenario: &str, replicates: usize) -> StudyConfig {
    StudyConfig {
        scenario: scenario.into(),
        replicates,
        mcmc_spot_check: 0,
        ..StudyConfig::default()
    }
}

#[test]
fn scenario1_posterior_means_sit_near_the_truth() {
    let report = run_study(&config("scenario1", 40), None).unwrap();
    assert_eq!(report.records.len(), 40);
    for a in Analysis::SCALED {
        let mut clean = 0;
        let mut near = 0;
        for r in &report.records {
            if !r.flags.is_empty() {
                continue;
            }
            let rec = r.analyses.iter().find(|x| x.analysis == a).unwrap();
            if !rec.completed() || !rec.flags.is_empty() {
                continue;
            }
            clean += 1;
            let ok = [0.2, 0.3]
                .iter()
                .enumerate()
                .all(|(j, t)| (rec.post_mean[j] - t).abs() <= 3.0 * rec.post_sd[j]);
            near += usize::from(ok);
        }
        assert!(clean >= 30, "{a}: {clean} clean replicates");
        assert!(near as f64 >= 0.95 * clean as f64, "{a}: {near}/{clean}");
    }
}

#[test]
fn summary_csv_has_one_row_per_analysis_and_coordinate() {
    let report = run_study(&config("scenario1", 3), Some(2)).unwrap();
    let csv = summary_csv(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
    for s in &report.summaries {
        for c in &s.coordinates {
            assert!((0.0..=1.0).contains(&c.coverage));
        }
        assert_eq!(s.completed + s.failed, 3);
    }
}

#[test]
fn mcmc_engine_agrees_with_laplace_on_scenario2() {
    let (model, system) = lookup_scenario("scenario2").unwrap();
    let data = generate_replicate(&system, 30, model.x_box(), 21).unwrap();
    let lap = config("scenario2", 1);
    let mcmc = StudyConfig {
        engine: Engine::Mcmc,
        ..lap.clone()
    };
    let (a, _) = calibrate_dataset(&data, &lap).unwrap();
    let (b, draws) = calibrate_dataset(&data, &mcmc).unwrap();
    assert_eq!(draws.len(), 4);
    for (x, y) in a.analyses.iter().zip(&b.analyses) {
        assert!((x.post_mean[0] - y.post_mean[0]).abs() < 0.2 * x.post_sd[0]);
        let ratio = y.post_sd[0] / x.post_sd[0];
        assert!((0.9..1.1).contains(&ratio), "{}: sd ratio {ratio}", x.analysis);
    }
}

#[test]
fn dataset_csv_round_trip_feeds_calibration() {
    let (model, system) = lookup_scenario("scenario3").unwrap();
    let data = generate_replicate(&system, 17, model.x_box(), 2).unwrap();
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("x1,y"));
    let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
    assert_eq!(back, data);
    let (r, _) = calibrate_dataset(&back, &config("scenario3", 1)).unwrap();
    assert_eq!(r.n, 17);
}
