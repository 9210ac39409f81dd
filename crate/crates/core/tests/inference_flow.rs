use hticl::corpus::VOCAB_SIZE;
use hticl::inference::llm::{AuditedLlm, EchoLlm, LlmClient, OracleDemoLlm, ScriptedLlm};
use hticl::inference::policy::FallbackSource;
use hticl::inference::{classify_retrieval_only, text_store, Classifier, FallbackPolicy, InferenceConfig, TextStore, TraceMode};
use hticl::retrieval::{build_database, RetrievalDatabase};
use hticl::synthetic::SyntheticSpec;
use hticl::{Document, EncoderParams, LabelPath, NodeId, Taxonomy};

struct Model {
    taxonomy: Taxonomy,
    params: EncoderParams,
    db: RetrievalDatabase,
    texts: TextStore,
    test: Vec<Document>,
}

fn model(branching: Vec<usize>) -> Model {
    let spec = SyntheticSpec { branching, ..Default::default() };
    let taxonomy = spec.taxonomy();
    let docs = spec.corpus(&taxonomy);
    let (train, test) = SyntheticSpec::split(&docs, 1);
    let params = EncoderParams::init(VOCAB_SIZE, 32, &taxonomy.level_widths(), 171);
    let db = build_database(&train, &params, &taxonomy).unwrap();
    Model { texts: text_store(&train), taxonomy, params, db, test }
}

impl Model {
    fn classifier<'a>(&'a self, cfg: &'a InferenceConfig) -> Classifier<'a> {
        Classifier::new(&self.taxonomy, &self.params, &self.db, &self.texts, cfg).unwrap()
    }
}

#[test]
fn k1_oracle_demo_equals_top1_retrieval() {
    let m = model(vec![3, 3, 3]);
    let cfg = InferenceConfig { k: 1, ..Default::default() };
    let c = m.classifier(&cfg);
    for doc in &m.test {
        let trace = c.classify(&doc.text, &OracleDemoLlm).unwrap();
        assert_eq!(trace.path, classify_retrieval_only(&doc.text, &m.db, &m.params).unwrap(), "{}", doc.id);
        assert!(!trace.fallback_used());
    }
}

#[test]
fn oracle_demo_follows_top1_when_it_survives_pruning() {
    let m = model(vec![3, 3, 3]);
    let cfg = InferenceConfig::default();
    let c = m.classifier(&cfg);
    for doc in &m.test {
        let trace = c.classify(&doc.text, &OracleDemoLlm).unwrap();
        let top1 = classify_retrieval_only(&doc.text, &m.db, &m.params).unwrap();
        // Demos are ranked, so the best demo is the overall Top-1 and its
        // labels are offered at every level.
        assert_eq!(trace.demos[0].path, top1);
        assert_eq!(trace.path, top1);
        for (step, level) in trace.steps.iter().zip(1..) {
            let label = m.taxonomy.display_name(top1.at_level(level));
            assert!(step.candidates.contains(&label));
        }
    }
}

#[test]
fn traces_are_deterministic_and_replayable() {
    let m = model(vec![3, 3]);
    let cfg = InferenceConfig::default();
    let c = m.classifier(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.jsonl");
    let audited = AuditedLlm::new(EchoLlm, &log).unwrap();
    let first: Vec<_> = m.test.iter().take(10).map(|d| c.classify(&d.text, &audited).unwrap()).collect();
    let again: Vec<_> = m.test.iter().take(10).map(|d| c.classify(&d.text, &EchoLlm).unwrap()).collect();
    assert_eq!(first, again);

    let script = ScriptedLlm::from_file(&log).unwrap();
    let replayed: Vec<_> = m.test.iter().take(10).map(|d| c.classify(&d.text, &script).unwrap()).collect();
    for (a, b) in first.iter().zip(&replayed) {
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.path, b.path);
        assert_eq!(serde_json::to_string(&a.steps).unwrap(), serde_json::to_string(&b.steps).unwrap());
    }
}

#[test]
fn traces_record_template_and_fingerprint() {
    let m = model(vec![2, 2]);
    let cfg = InferenceConfig::default();
    let t = m.classifier(&cfg).classify(&m.test[0].text, &OracleDemoLlm).unwrap();
    assert_eq!(t.template_version, hticl::inference::PromptTemplate::builtin().version());
    assert_eq!(t.db_fingerprint, m.params.fingerprint());
    assert_eq!(t.mode, TraceMode::Iterative);
}

#[test]
fn call_count_contract() {
    let m = model(vec![3, 3]);
    for (iterative, calls) in [(true, 2), (false, 1)] {
        let cfg = InferenceConfig { iterative, ..Default::default() };
        for doc in m.test.iter().take(5) {
            assert_eq!(m.classifier(&cfg).classify(&doc.text, &EchoLlm).unwrap().llm_calls, calls);
        }
    }
}

#[test]
fn singleton_candidates_force_the_prediction() {
    // A chain taxonomy has exactly one child everywhere.
    let m = model(vec![1, 1, 1]);
    let cfg = InferenceConfig::default();
    let llm = ScriptedLlm::new(vec!["nonsense".into(); 3]);
    let t = m.classifier(&cfg).classify(&m.test[0].text, &llm).unwrap();
    assert_eq!(t.llm_calls, 3);
    assert!(t.steps.iter().all(|s| s.forced && !s.fallback_used && s.candidates.len() == 1));
    assert_eq!(t.path, m.test[0].gold);
}

#[test]
fn unmatched_reply_takes_top1_label() {
    let m = model(vec![3, 3]);
    // Unpruned, so no level degenerates to a forced singleton.
    let cfg = InferenceConfig { pruning: false, ..Default::default() };
    let c = m.classifier(&cfg);
    for doc in m.test.iter().take(10) {
        let llm = ScriptedLlm::new(vec!["banana".into(), "banana".into()]);
        let t = c.classify(&doc.text, &llm).unwrap();
        let top1 = classify_retrieval_only(&doc.text, &m.db, &m.params).unwrap();
        assert_eq!(t.steps[0].fallback, Some(FallbackSource::Top1Label));
        assert_eq!(t.steps[0].chosen, vec![top1.at_level(1)]);
        assert_eq!(t.path, top1);
        assert!(t.steps.iter().all(|s| s.fallback_used));
    }
}

#[test]
fn fallback_below_a_foreign_label_takes_a_remaining_path() {
    let m = model(vec![3, 3]);
    let doc = &m.test[0];
    let top1 = classify_retrieval_only(&doc.text, &m.db, &m.params).unwrap();
    // Steer level 1 away from the Top-1 branch, then reply with garbage.
    let other = *m.taxonomy.level_nodes(1).iter().find(|&&n| n != top1.at_level(1)).unwrap();
    let cfg_all = InferenceConfig { pruning: false, ..Default::default() };
    let c_all = m.classifier(&cfg_all);
    let llm = ScriptedLlm::new(vec![m.taxonomy.display_name(other), "banana".into()]);
    let t = c_all.classify(&doc.text, &llm).unwrap();
    assert_eq!(t.path.at_level(1), other);
    assert_eq!(t.steps[1].fallback, Some(FallbackSource::RemainingPath));
    assert!(t.path.passes_through(other));
    m.taxonomy.validate_path(&t.path).unwrap();
}

#[test]
fn consistent_policy_prefers_demos_under_current() {
    let m = model(vec![3, 3]);
    let cfg = InferenceConfig { fallback: FallbackPolicy::Consistent, pruning: false, ..Default::default() };
    let c = m.classifier(&cfg);
    let doc = &m.test[3];
    let llm = ScriptedLlm::new(vec!["banana".into(), "banana".into()]);
    let t = c.classify(&doc.text, &llm).unwrap();
    assert_eq!(t.steps[0].fallback, Some(FallbackSource::ConsistentDemo));
    assert_eq!(t.path.at_level(1), t.demos[0].path.at_level(1));
}

#[test]
fn demos_off_shows_only_the_query_block() {
    let m = model(vec![3, 3]);
    let cfg = InferenceConfig { demos: false, ..Default::default() };
    let t = m.classifier(&cfg).classify(&m.test[0].text, &EchoLlm).unwrap();
    for step in &t.steps {
        assert!(step.demos.is_empty());
        assert_eq!(step.prompt.matches("Text: ").count(), 1);
        assert_eq!(step.candidates.len(), 3);
    }
}

#[test]
fn level1_prompt_uses_root_as_current_label() {
    let m = model(vec![3, 3]);
    let cfg = InferenceConfig { k: 1, ..Default::default() };
    let t = m.classifier(&cfg).classify(&m.test[0].text, &OracleDemoLlm).unwrap();
    assert_eq!(t.steps[0].prompt.matches("Current Label: Root").count(), 2);
    let again = m.classifier(&cfg).classify(&m.test[0].text, &OracleDemoLlm).unwrap();
    assert_eq!(t.steps[0].prompt, again.steps[0].prompt);
}

#[test]
fn flat_and_select_modes() {
    let m = model(vec![3, 3]);
    let flat = InferenceConfig { iterative: false, ..Default::default() };
    let t = m.classifier(&flat).classify(&m.test[0].text, &OracleDemoLlm).unwrap();
    assert_eq!(t.mode, TraceMode::Flat);
    assert_eq!(t.path, t.demos[0].path);

    let select = InferenceConfig { candidate_set: false, ..Default::default() };
    let llm = ScriptedLlm::new(vec!["Example 2".into()]);
    let t = m.classifier(&select).classify(&m.test[0].text, &llm).unwrap();
    assert_eq!(t.mode, TraceMode::Select);
    assert_eq!(t.path, t.demos[1].path);
    let t = m.classifier(&select).classify(&m.test[0].text, &ScriptedLlm::new(vec!["?".into()])).unwrap();
    assert_eq!(t.steps[0].fallback, Some(FallbackSource::Top1Path));

    let bad = InferenceConfig { candidate_set: false, demos: false, ..Default::default() };
    assert!(Classifier::new(&m.taxonomy, &m.params, &m.db, &m.texts, &bad).is_err());
}

#[test]
fn per_level_retrieval_stays_under_the_current_label() {
    let m = model(vec![3, 3]);
    let cfg = InferenceConfig { per_level_retrieval: true, ..Default::default() };
    let c = m.classifier(&cfg);
    for doc in m.test.iter().take(10) {
        let t = c.classify(&doc.text, &OracleDemoLlm).unwrap();
        let first = t.path.at_level(1);
        assert!(t.steps[1].demos.iter().all(|d| d.path.passes_through(first)));
    }
}

#[test]
fn self_retrieval_and_ties() {
    let m = model(vec![3, 3]);
    let stored = m.texts.iter().next().unwrap();
    let path = classify_retrieval_only(stored.1, &m.db, &m.params).unwrap();
    let inst = m.db.instances.iter().find(|i| &i.doc_id == stored.0).unwrap();
    assert_eq!(path, inst.path);

    let mut db = RetrievalDatabase::empty(m.db.depth, m.db.dim, m.db.encoder_fingerprint.clone());
    let v = m.db.instances[0].vectors.clone();
    db.push("late".into(), v.clone(), LabelPath(vec![NodeId(1), NodeId(4)])).unwrap();
    db.push("later".into(), v.clone(), LabelPath(vec![NodeId(2), NodeId(7)])).unwrap();
    assert_eq!(db.top1(&v).unwrap().instance.doc_id, "late");
}

#[test]
fn llm_failures_surface() {
    let m = model(vec![2, 2]);
    let cfg = InferenceConfig::default();
    let err = m.classifier(&cfg).classify(&m.test[0].text, &ScriptedLlm::new(vec![])).unwrap_err();
    assert!(err.to_string().contains("script exhausted"));
    let boxed: Box<dyn LlmClient> = Box::new(OracleDemoLlm);
    assert!(m.classifier(&cfg).classify(&m.test[0].text, &boxed).is_ok());
}
