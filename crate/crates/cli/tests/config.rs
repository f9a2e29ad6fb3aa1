use dance_cli::{CliError, RunConfig};

fn message(json: &str) -> String {
    match RunConfig::from_json(json) {
        Err(CliError::Config(m)) => m,
        other => panic!("expected a config error for {json}, got {other:?}"),
    }
}

#[test]
fn empty_document_gives_defaults() {
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
}

#[test]
fn defaults_round_trip_through_json() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
}

#[test]
fn partial_sections_keep_other_defaults() {
    let cfg = RunConfig::from_json(r#"{"model": {"d_en": 64}, "train": {"epochs": 3}}"#).unwrap();
    assert_eq!(cfg.model.d_en, 64);
    assert_eq!(cfg.model.n_heads, 4);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.lambda, 0.9);
}

#[test]
fn out_of_range_fields_are_named() {
    let cases = [
        (r#"{"train": {"lambda": 1.5}}"#, "train.lambda"),
        (r#"{"model": {"r": 0}}"#, "model.r"),
        (r#"{"eval": {"threshold": 1.2}}"#, "eval.threshold"),
        (r#"{"model": {"n_heads": 3}}"#, "model.n_heads"),
        (r#"{"train": {"lr": 0}}"#, "train.lr"),
        (r#"{"eval": {"metrics": {"f1_tau": -1}}}"#, "eval.metrics.f1_tau"),
        (r#"{"data": {"categories": ["sphere", "blob"]}}"#, "data.categories"),
        (r#"{"data": {"points_per_shape": 10}}"#, "data.points_per_shape"),
        (r#"{"eval": {"r": 0}}"#, "eval.r"),
        (r#"{"eval": {"noise_levels": [0, -0.1]}}"#, "eval.noise_levels"),
        (
            r#"{"model": {"c": 2}, "data": {"categories": ["sphere", "cuboid", "cone"]}}"#,
            "data.categories",
        ),
    ];
    for (json, field) in cases {
        let m = message(json);
        assert!(m.starts_with(field), "{json}: {m}");
    }
}

#[test]
fn unknown_keys_and_bad_types_report_paths() {
    let m = message(r#"{"train": {"lamda": 0.5}}"#);
    assert!(m.contains("train") && m.contains("lamda"), "{m}");
    let m = message(r#"{"eval": {"metrics": {"alpha": 3}}}"#);
    assert!(m.starts_with("eval.metrics") && m.contains("alpha"), "{m}");
    let m = message(r#"{"extra": 1}"#);
    assert!(m.contains("extra"), "{m}");
    let m = message(r#"{"model": {"d_en": "wide"}}"#);
    assert!(m.starts_with("model.d_en"), "{m}");
}

#[test]
fn float_fields_survive_json_exactly() {
    let mut cfg = RunConfig::default();
    cfg.train.lr = 0.1 + 0.2;
    cfg.train.spread = 1.0 / 3.0;
    cfg.eval.noise_levels = vec![f64::MIN_POSITIVE, 2.0f64.sqrt()];
    let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
    assert_eq!(back.train.lr.to_bits(), cfg.train.lr.to_bits());
    assert_eq!(back, cfg);
}
