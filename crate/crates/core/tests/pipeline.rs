use stealth_lab::eval::*;
use stealth_lab::{init_model, Family, ModelConfig};

fn small_config(kind: PipelineKind) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(kind, vec![2]);
    cfg.n_edits = 2;
    cfg.n_train = 200;
    cfg.n_test = 150;
    cfg.n_ppl_prompts = 3;
    cfg.thm3_samples = 30;
    cfg.thm3_prompts = 2;
    cfg.solver.max_iters = 80;
    cfg
}

fn corpus() -> Corpus {
    synthetic_corpus(&SyntheticCorpusConfig { n_prompts: 400, seed: 21, ..Default::default() }).unwrap()
}

#[test]
fn runs_are_deterministic_up_to_the_timestamp() {
    let model = init_model(&ModelConfig::new(Family::GptStyle, 16, 64, 3, 21)).unwrap();
    let corpus = corpus();
    let cfg = small_config(PipelineKind::InPlace);
    let a = run_pipeline(&model, &corpus, &cfg).unwrap().without_timestamp();
    let b = run_pipeline(&model, &corpus, &cfg).unwrap().without_timestamp();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn report_survives_a_json_round_trip() {
    let model = init_model(&ModelConfig::new(Family::LlamaStyle, 16, 64, 3, 22)).unwrap();
    let report = run_pipeline(&model, &corpus(), &small_config(PipelineKind::AttackCorrupt)).unwrap();
    report.validate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    report.save(&path).unwrap();
    let back = EvalReport::load(&path).unwrap();
    assert_eq!(back.to_json().unwrap(), report.to_json().unwrap());
    assert_eq!(back.schema_version, REPORT_SCHEMA_VERSION);
    let layer = &back.layers[0];
    assert_eq!(layer.samples.len(), layer.n_attempted);
}

#[test]
fn jetpack_run_reports_cross_talk() {
    let model = init_model(&ModelConfig::new(Family::GptStyle, 16, 64, 3, 23)).unwrap();
    let report = run_pipeline(&model, &corpus(), &small_config(PipelineKind::Jetpack)).unwrap();
    let jet = report.layers[0].jetpack.as_ref().expect("jet-pack summary");
    assert_eq!(jet.n_included + jet.n_excluded, 2);
    assert!(jet.cross_talk_consistent);
}

#[test]
fn unedited_model_has_unit_perplexity_ratio() {
    let model = init_model(&ModelConfig::new(Family::MambaStyle, 16, 64, 3, 24)).unwrap();
    let corpus = corpus();
    for p in corpus.prompts().iter().take(5) {
        let p = if p.len() > 20 { p.prefix(20).unwrap() } else { p.clone() };
        assert_eq!(perplexity_ratio(&model, &model, &p, 50).unwrap(), 1.0);
    }
}

#[test]
fn invalid_layer_is_a_validation_error() {
    let model = init_model(&ModelConfig::new(Family::GptStyle, 16, 64, 3, 25)).unwrap();
    let err = run_pipeline(&model, &corpus(), &PipelineConfig::new(PipelineKind::InPlace, vec![7])).unwrap_err();
    assert!(err.is_validation(), "{err}");
}
