use std::path::PathBuf;

use hcl_core::config::{parse_config, parse_config_str, ExperimentConfig, DEFAULT_SEED, RESOLVED_CONFIG};
use hcl_core::frameworks::{Framework, SimsiamPlacement};
use hcl_core::Error;
use proptest::prelude::*;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn empty_object_gives_documented_defaults() {
    let cfg = parse_config_str("{}").unwrap();
    assert_eq!(cfg.train.framework, Framework::Moco);
    assert_eq!(cfg.augment.p, 0.5);
    assert_eq!(cfg.augment.alpha, 0.6);
    assert_eq!(cfg.hallucinator.n, 3);
    assert_eq!((cfg.hallucinator.beta1, cfg.hallucinator.beta2), (0.0, 1.0));
    assert!(cfg.hallucinator.enabled);
    assert_eq!(cfg.train.simsiam_placement, SimsiamPlacement::BeforePredictor);
    assert_eq!(cfg.metrics.t, 2.0);
    assert_eq!(cfg.resolved_seed(), DEFAULT_SEED);
}

#[test]
fn validation_names_key_and_constraint() {
    let err = parse_config_str(r#"{"augment":{"alpha":1.5}}"#).unwrap_err();
    assert!(err.to_string().contains("alpha must be in (0,1)"), "{err}");
    match err {
        Error::Config { key, .. } => assert_eq!(key, "augment.alpha"),
        other => panic!("{other:?}"),
    }
    for (text, key) in [
        (r#"{"augment":{"p":0}}"#, "augment.p"),
        (r#"{"train":{"batch_size":1}}"#, "train.batch_size"),
        (r#"{"hallucinator":{"beta1":0.5,"beta2":0.1}}"#, "hallucinator.beta2"),
        (r#"{"augment":{"scale_range":[0.5,0.2]}}"#, "augment.scale_range"),
        (r#"{"metrics":{"t":-1}}"#, "metrics.t"),
    ] {
        match parse_config_str(text) {
            Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn unknown_keys_and_syntax_errors() {
    match parse_config_str("{\"train\": {\"epochz\": 3}}") {
        Err(Error::ConfigParse { line, column, msg }) => {
            assert_eq!(line, 1);
            assert!(column > 0);
            assert!(msg.contains("epochz"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_config_str("{\n\n  \"seed\": ,}"), Err(Error::ConfigParse { line: 3, .. })));
}

#[test]
fn shipped_presets_parse() {
    let mut names: Vec<_> = std::fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    names.sort();
    assert!(names.len() >= 4);
    for path in &names {
        parse_config(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    let default = parse_config(configs_dir().join("default.json")).unwrap();
    assert_eq!(default, ExperimentConfig::default().resolved());
    let narrow = parse_config(configs_dir().join("narrow_extrapolation.json")).unwrap();
    assert_eq!((narrow.hallucinator.beta1, narrow.hallucinator.beta2), (0.0, 0.1));
    let paper = parse_config(configs_dir().join("paper_recipe.json")).unwrap();
    assert_eq!((paper.train.batch_size, paper.train.epochs, paper.train.lr), (512, 500, 0.5));
}

#[test]
fn resolved_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(r#"{"train":{"framework":"simclr"},"hallucinator":{"n":1}}"#).unwrap();
    let path = cfg.write_resolved(dir.path()).unwrap();
    assert_eq!(path.file_name().unwrap(), RESOLVED_CONFIG);
    let back = parse_config(&path).unwrap();
    assert_eq!(back, cfg.resolved());
    assert_eq!(back.seed, Some(DEFAULT_SEED));
}

fn any_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (prop::option::of(any::<u64>()), 0usize..3, 2usize..300, 0usize..50, 1e-4f64..1.0),
        (0.05f64..=1.0, 0.01f64..0.99, 0usize..5, -1.0f64..1.0, 0.0f64..2.0, any::<bool>()),
        (0.0f64..=1.0, 0.1f64..5.0, any::<bool>(), 1usize..4096),
    )
        .prop_map(|((seed, fw, batch, epochs, lr), (p, alpha, n, b1, width, enabled), (w, t, after, queue))| {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            cfg.train.framework = [Framework::Moco, Framework::Simclr, Framework::Simsiam][fw];
            cfg.train.batch_size = batch;
            cfg.train.epochs = epochs;
            cfg.train.lr = lr;
            cfg.train.queue_size = queue;
            cfg.train.hallucinated_weight = w;
            if after {
                cfg.train.simsiam_placement = SimsiamPlacement::AfterPredictor;
            }
            cfg.augment.p = p;
            cfg.augment.alpha = alpha;
            cfg.hallucinator.n = n;
            cfg.hallucinator.beta1 = b1;
            cfg.hallucinator.beta2 = b1 + width;
            cfg.hallucinator.enabled = enabled;
            cfg.metrics.t = t;
            cfg
        })
}

proptest! {
    #[test]
    fn parse_serialize_parse(cfg in any_config()) {
        let text = cfg.to_json().unwrap();
        let back = parse_config_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(parse_config_str(&back.to_json().unwrap()).unwrap(), back);
    }
}
