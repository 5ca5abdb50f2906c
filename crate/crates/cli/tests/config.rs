use gelina_cli::config::derive_seed;
use gelina_cli::{PipelineError, RunConfig};

#[test]
fn text_form_roundtrips() {
    let mut cfg = RunConfig::default();
    cfg.apply([("seed", "7"), ("corpus.amplitudes", "1.0,0.25"), ("backbone.resample_masks", "false")])
        .unwrap();
    let back = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.corpus.amplitudes, vec![1.0, 0.25]);
    assert!(!back.backbone.resample_masks);
}

#[test]
fn unknown_keys_and_bad_values_are_usage_errors() {
    let mut cfg = RunConfig::default();
    assert!(matches!(cfg.apply([("backbone.bogus", "1")]), Err(PipelineError::Usage(_))));
    assert!(matches!(cfg.apply([("seed", "-1")]), Err(PipelineError::Usage(_))));
    assert!(matches!(cfg.apply([("flow.lr", "fast")]), Err(PipelineError::Usage(_))));
    assert!(matches!(RunConfig::from_text("seed 3"), Err(PipelineError::Usage(_))));
    let err = cfg.apply([("corpus.holdout", "5000")]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let cfg = RunConfig::from_text("# run\n\nseed = 11\n  eval.clips = 3  \n").unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.eval.clips, 3);
}

#[test]
fn hash_ignores_only_the_output_location() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.out_dir = "/elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.seed = 1;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn keys_cover_every_section() {
    let keys = RunConfig::keys();
    for k in ["seed", "out_dir", "corpus.clips", "backbone.finetune_steps", "flow.lambda_geo", "sampling.top_k"] {
        assert!(keys.iter().any(|x| x == k), "{k}");
    }
}

#[test]
fn stage_seeds_differ_by_purpose() {
    assert_eq!(derive_seed(3, "flow"), derive_seed(3, "flow"));
    assert_ne!(derive_seed(3, "flow"), derive_seed(3, "corpus"));
    assert_ne!(derive_seed(3, "flow"), derive_seed(4, "flow"));
}
