use std::collections::BTreeMap;

use nmr_core::ingest::{
    impute_sampling_sd, impute_svr_sd, preprocess, read_countries, read_observations, recombine_vr,
    simulate_stochastic_sd, write_countries, write_observations, ImputationTable, PreprocessConfig,
};
use nmr_core::model::{Observation, SeriesType, SizeCategory};
use nmr_core::rng::rng_indexed;
use nmr_core::synth::{generate, Scenario};
use nmr_core::Error;

fn vr(t: f64, nmr: f64, u5mr: f64, births: f64) -> Observation {
    Observation {
        country_id: "AAA".into(),
        t,
        nmr,
        u5mr,
        log_ratio: (nmr / (u5mr - nmr)).ln(),
        series_type: SeriesType::VR,
        series_id: "AAA-VR".into(),
        sampling_sd: None,
        stochastic_sd: None,
        births: Some(births),
        included: true,
    }
}

#[test]
fn imputation_table_values() {
    let t = ImputationTable::default();
    let expect = [
        (SeriesType::DHS, 0.13, 0.26),
        (SeriesType::MICS, 0.16, 0.21),
        (SeriesType::OtherDHS, 0.14, 0.24),
        (SeriesType::Others, 0.16, 0.22),
    ];
    for (s, other, small) in expect {
        assert_eq!(
            impute_sampling_sd(s, SizeCategory::Other, &t).unwrap(),
            other
        );
        assert_eq!(
            impute_sampling_sd(s, SizeCategory::Small, &t).unwrap(),
            small
        );
    }
    assert_eq!(impute_svr_sd(), 0.20);
}

#[test]
fn recombination_conserves_counts() {
    // small births give CVs far above 10%, forcing merges
    let recs: Vec<Observation> = (0..12)
        .map(|i| {
            vr(
                2000.5 + i as f64,
                3.0 + 0.1 * i as f64,
                9.0 + 0.2 * i as f64,
                800.0 + 37.0 * i as f64,
            )
        })
        .collect();
    let mut rng = rng_indexed(1, "recombine-test", 0);
    let (out, audit) = recombine_vr(&recs, 0.10, 500, &mut rng).unwrap();
    assert!(out.len() < recs.len());
    assert!(!audit.is_empty());
    let sum = |v: &[Observation], f: &dyn Fn(&Observation) -> f64| v.iter().map(f).sum::<f64>();
    let deaths_n = |o: &Observation| o.nmr * o.births.unwrap() / 1000.0;
    let deaths_5 = |o: &Observation| o.u5mr * o.births.unwrap() / 1000.0;
    let births = |o: &Observation| o.births.unwrap();
    for f in [
        &deaths_n as &dyn Fn(&Observation) -> f64,
        &deaths_5,
        &births,
    ] {
        let (a, b) = (sum(&recs, f), sum(&out, f));
        assert!((a - b).abs() <= 1e-10 * a, "{a} vs {b}");
    }
    for o in &out {
        assert!(o.stochastic_sd.unwrap() > 0.0);
    }
}

#[test]
fn large_counts_are_not_merged() {
    let recs: Vec<Observation> = (0..5)
        .map(|i| vr(2000.5 + i as f64, 5.0, 10.0, 1e6))
        .collect();
    let mut rng = rng_indexed(1, "recombine-test", 1);
    let (out, audit) = recombine_vr(&recs, 0.10, 500, &mut rng).unwrap();
    assert_eq!(out.len(), 5);
    assert!(audit.is_empty());
}

#[test]
fn stochastic_sd_matches_delta_method() {
    let mut rng = rng_indexed(7, "delta", 0);
    for (i, &births) in [1e5, 3e5, 1e6, 4e6].iter().enumerate() {
        for (j, &q5) in [0.005, 0.02, 0.08, 0.15, 0.25].iter().enumerate() {
            let p = 0.25 + 0.1 * ((i + j) % 5) as f64;
            let sim = simulate_stochastic_sd(births, q5, p, 3000, &mut rng).unwrap();
            let delta = 1.0 / (births * q5 * p * (1.0 - p)).sqrt();
            assert!(
                (sim / delta - 1.0).abs() < 0.10,
                "births {births} q5 {q5} p {p}: {sim} vs {delta}"
            );
        }
    }
}

#[test]
fn tiny_populations_fail_cleanly() {
    let mut rng = rng_indexed(7, "tiny", 0);
    assert!(simulate_stochastic_sd(1.0, 0.001, 0.5, 100, &mut rng).is_err());
}

#[test]
fn observations_round_trip() {
    let data = generate(&Scenario::default(), 4).unwrap();
    let mut buf = Vec::new();
    write_observations(&mut buf, &data.observations).unwrap();
    let back = read_observations(buf.as_slice()).unwrap();
    assert_eq!(back.len(), data.observations.len());
    for (a, b) in back.iter().zip(&data.observations) {
        assert_eq!(a.country_id, b.country_id);
        assert_eq!(a.t, b.t);
        assert_eq!(a.nmr, b.nmr);
        assert_eq!(a.sampling_sd, b.sampling_sd);
        assert_eq!(a.births, b.births);
    }
    let mut buf = Vec::new();
    write_countries(&mut buf, &data.countries).unwrap();
    let back = read_countries(buf.as_slice()).unwrap();
    assert_eq!(back, data.countries);
}

#[test]
fn malformed_rows_are_all_reported() {
    let text = "country_id,year,nmr,u5mr,series_type,series_id,sampling_sd,births,included\n\
                AAA,2000,5,10,DHS,s1,,,1\n\
                AAA,abc,5,10,DHS,s1,,,1\n\
                AAA,2001,5,10,XYZ,s1,,,1\n";
    match read_observations(text.as_bytes()) {
        Err(Error::Rows(rows)) => assert_eq!(rows.len(), 2),
        other => panic!("expected row errors, got {other:?}"),
    }
}

#[test]
fn missing_column_is_a_data_error() {
    let text = "country_id,year,nmr\nAAA,2000,5\n";
    assert!(matches!(
        read_observations(text.as_bytes()),
        Err(Error::Data(_))
    ));
}

#[test]
fn nmr_at_or_above_u5mr_is_excluded() {
    let text = "country_id,year,nmr,u5mr,series_type,series_id,sampling_sd,births,included\n\
                AAA,2000,12,10,DHS,s1,0.1,,1\n";
    let obs = read_observations(text.as_bytes()).unwrap();
    assert!(!obs[0].included);
}

#[test]
fn preprocessing_completes_error_specification() {
    let data = generate(&Scenario::default(), 2).unwrap();
    let pre = preprocess(
        &data.observations,
        &data.countries,
        &PreprocessConfig::default(),
    )
    .unwrap();
    for o in pre.observations.iter().filter(|o| o.included) {
        assert!(o.own_variance().unwrap() > 0.0);
    }
    let missing = data
        .observations
        .iter()
        .filter(|o| o.series_type.survey_index().is_some() && o.sampling_sd.is_none())
        .count();
    let imputed = pre
        .audit
        .iter()
        .filter(|a| a.action == "impute_sampling")
        .count();
    assert_eq!(missing, imputed);

    // same seed, same result regardless of worker count
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let again = pool
        .install(|| {
            preprocess(
                &data.observations,
                &data.countries,
                &PreprocessConfig::default(),
            )
        })
        .unwrap();
    assert_eq!(again.observations, pre.observations);
}

#[test]
fn survey_table_override_is_used() {
    let data = generate(&Scenario::default(), 2).unwrap();
    let mut config = PreprocessConfig::default();
    for s in [
        SeriesType::DHS,
        SeriesType::OtherDHS,
        SeriesType::MICS,
        SeriesType::Others,
    ] {
        for z in [SizeCategory::Small, SizeCategory::Other] {
            config.table.set(s, z, 0.5).unwrap();
        }
    }
    let pre = preprocess(&data.observations, &data.countries, &config).unwrap();
    let mut by_key: BTreeMap<(String, String), f64> = BTreeMap::new();
    for o in &data.observations {
        if let Some(sd) = o.sampling_sd {
            by_key.insert((o.country_id.clone(), format!("{:?}", o.t)), sd);
        }
    }
    for o in pre
        .observations
        .iter()
        .filter(|o| o.series_type.survey_index().is_some())
    {
        let reported = by_key.get(&(o.country_id.clone(), format!("{:?}", o.t)));
        if reported.is_none() {
            assert_eq!(o.sampling_sd, Some(0.5));
        }
    }
}
