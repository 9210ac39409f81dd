use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use hticl::corpus::{write_corpus, VOCAB_SIZE};
use hticl::retrieval::build_database;
use hticl::synthetic::SyntheticSpec;
use hticl::EncoderParams;
use hticl_service::{router, AppState, ServiceOptions};
use serde_json::{json, Value};
use tower::ServiceExt;

const TASKS: &str = concat!(
    "{\"id\":\"t1\",\"text\":\"zebra quokka narwhal axolotl pangolin okapi\"}\n",
    "{\"id\":\"t2\",\"text\":\"second task text\"}\n",
    "{\"id\":\"t3\",\"text\":\"third task text\"}\n",
);

fn fixture(dir: &Path, append: bool, token: Option<&str>) -> ServiceOptions {
    let spec = SyntheticSpec { branching: vec![2, 2], docs_per_leaf: 2, ..Default::default() };
    let tax = spec.taxonomy();
    let docs = spec.corpus(&tax);
    let opts = ServiceOptions {
        taxonomy: dir.join("taxonomy.tsv"),
        params: dir.join("indexer.params"),
        db: dir.join("retrieval.db"),
        corpus: Some(dir.join("train.jsonl")),
        tasks: Some(dir.join("tasks.jsonl")),
        annotations: dir.join("annotations.jsonl"),
        append_on_annotate: append,
        llm: "stub:oracle-demo".into(),
        token: token.map(str::to_string),
    };
    if !opts.db.exists() {
        std::fs::write(&opts.taxonomy, tax.to_text()).unwrap();
        EncoderParams::init(VOCAB_SIZE, 16, &tax.level_widths(), 5).save(&opts.params).unwrap();
        let params = EncoderParams::load(&opts.params).unwrap();
        build_database(&docs, &params, &tax).unwrap().save(&opts.db).unwrap();
        std::fs::write(opts.corpus.as_ref().unwrap(), write_corpus(&docs, &tax)).unwrap();
        std::fs::write(opts.tasks.as_ref().unwrap(), TASKS).unwrap();
    }
    opts
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(state, method, uri, body, None).await
}

async fn call_with(
    state: &Arc<AppState>,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn leaf_path(state: &AppState, i: usize) -> Vec<String> {
    let t = &state.taxonomy;
    t.path_names(&t.path_to(t.leaves()[i]).unwrap())
}

fn annotation(state: &AppState, who: &str, leaf: usize, seconds: f64, mode: &str) -> Value {
    json!({ "annotator": who, "path": leaf_path(state, leaf), "seconds": seconds, "mode": mode })
}

#[tokio::test]
async fn taxonomy_tree() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), false, None)).unwrap();
    let (s, v) = call(&state, "GET", "/api/taxonomy", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["depth"], 2);
    assert_eq!(v["root"]["children"].as_array().unwrap().len(), 2);
    assert_eq!(v["root"]["children"][0]["children"][1]["level"], 2);
    assert_eq!(v["root"]["children"][0]["name"], "t1n0");
}

#[tokio::test]
async fn retrieve_stored_text_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), false, None)).unwrap();
    let (id, text) = state.texts().iter().map(|(k, v)| (k.clone(), v.clone())).min().unwrap();
    let (s, v) = call(&state, "POST", "/api/retrieve", Some(json!({ "text": text, "k": 3 }))).await;
    assert_eq!(s, StatusCode::OK);
    let hits = v["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert!((hits[0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(hits[0]["text"], text);
    assert_eq!(hits[0]["doc_id"], id);
    assert_eq!(v["db_fingerprint"], state.params.fingerprint());
    let paths: std::collections::HashSet<_> = hits.iter().map(|h| h["path"].to_string()).collect();
    assert_eq!(paths.len(), 3);

    assert_eq!(call(&state, "POST", "/api/retrieve", Some(json!({ "text": "x", "k": 0 }))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&state, "POST", "/api/retrieve", Some(json!({ "k": 2 }))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&state, "POST", "/api/retrieve", Some(json!({ "text": 5 }))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn classify_embeds_template_and_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), false, None)).unwrap();
    let (s, v) = call(&state, "POST", "/api/classify", Some(json!({ "text": "t1n0w1 t2n1w2 t2n1w3" }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["template_version"], hticl::inference::PromptTemplate::builtin().version());
    assert_eq!(v["db_fingerprint"], state.params.fingerprint());
    assert_eq!(v["llm_calls"], 2);
    assert_eq!(v["labels"].as_array().unwrap().len(), 2);

    let (s, v) = call(&state, "POST", "/api/classify", Some(json!({ "text": "x", "options": { "k": 1, "iterative": false } }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["mode"], "flat");
    assert_eq!(v["demos"].as_array().unwrap().len(), 1);
    let bad = call(&state, "POST", "/api/classify", Some(json!({ "text": "x", "options": { "k": 0 } }))).await;
    assert_eq!(bad.0, StatusCode::BAD_REQUEST);
    let bad = call(&state, "POST", "/api/classify", Some(json!({ "text": "x", "options": { "k": "many" } }))).await;
    assert_eq!(bad.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn task_queue_and_annotation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), false, None)).unwrap();
    let mut seen = Vec::new();
    loop {
        let (s, v) = call(&state, "GET", "/api/tasks/next?annotator=ann", None).await;
        if s == StatusCode::NO_CONTENT {
            break;
        }
        let id = v["id"].as_str().unwrap().to_string();
        assert!(!seen.contains(&id), "task {id} offered twice");
        let body = annotation(&state, "ann", seen.len(), 2.0, "direct");
        let (s, r) = call(&state, "POST", &format!("/api/tasks/{id}/annotation"), Some(body.clone())).await;
        assert_eq!(s, StatusCode::CREATED, "{r}");
        assert_eq!(r["record"]["doc_id"], id.as_str());
        assert_eq!(call(&state, "POST", &format!("/api/tasks/{id}/annotation"), Some(body)).await.0, StatusCode::CONFLICT);
        seen.push(id);
    }
    assert_eq!(seen, ["t1", "t2", "t3"]);
    // Another annotator still has the whole queue.
    let (_, v) = call(&state, "GET", "/api/tasks/next?annotator=other", None).await;
    assert_eq!(v["id"], "t1");
    assert_eq!(v["remaining"], 3);
    assert_eq!(call(&state, "GET", "/api/tasks/next", None).await.0, StatusCode::NO_CONTENT);

    let ok = annotation(&state, "b", 0, 1.0, "direct");
    assert_eq!(call(&state, "POST", "/api/tasks/nope/annotation", Some(ok.clone())).await.0, StatusCode::NOT_FOUND);
    for bad in [
        json!({ "annotator": "b", "path": ["t1n0"], "seconds": 1.0 }),
        json!({ "annotator": "b", "path": ["t1n0", "t2n3"], "seconds": 1.0 }),
        json!({ "annotator": "b", "path": leaf_path(&state, 0), "seconds": -1.0 }),
        json!({ "annotator": "", "path": leaf_path(&state, 0), "seconds": 1.0 }),
        json!({ "annotator": "b", "path": leaf_path(&state, 0), "seconds": 1.0, "mode": "telepathy" }),
        json!({ "annotator": "b", "path": leaf_path(&state, 0) }),
    ] {
        let (s, v) = call(&state, "POST", "/api/tasks/t1/annotation", Some(bad.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad} -> {v}");
    }
    let raw = Request::post("/api/tasks/t1/annotation").body(Body::from("{not json")).unwrap();
    assert_eq!(router(state.clone()).oneshot(raw).await.unwrap().status(), StatusCode::BAD_REQUEST);
    assert_eq!(state.records().len(), 3);
}

#[tokio::test]
async fn stats_match_an_independent_tally() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), false, None)).unwrap();
    let plan = [
        ("t1", "a", 0, 10.0, "direct"),
        ("t1", "b", 0, 20.0, "with_descriptions"),
        ("t1", "c", 1, 30.0, "retrieval_assisted"),
        ("t2", "a", 0, 4.0, "direct"),
        ("t2", "b", 1, 6.0, "retrieval_assisted"),
        ("t2", "c", 2, 8.0, "retrieval_assisted"),
    ];
    for (doc, who, leaf, secs, mode) in plan {
        let (s, _) = call(&state, "POST", &format!("/api/tasks/{doc}/annotation"), Some(annotation(&state, who, leaf, secs, mode))).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    let (s, v) = call(&state, "GET", "/api/stats", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["annotations"], 6);
    assert_eq!(v["by_mode"]["direct"]["count"], 2);
    assert_eq!(v["by_mode"]["direct"]["mean_seconds"], 7.0);
    assert_eq!(v["by_mode"]["with_descriptions"]["mean_seconds"], 20.0);
    assert_eq!(v["by_mode"]["retrieval_assisted"]["count"], 3);
    assert!((v["by_mode"]["retrieval_assisted"]["mean_seconds"].as_f64().unwrap() - 44.0 / 3.0).abs() < 1e-12);
    assert!((v["by_mode"]["retrieval_assisted"]["per_hour"].as_f64().unwrap() - 3.0 * 3600.0 / 44.0).abs() < 1e-9);
    assert_eq!(v["by_annotator"]["a"], 2);
    assert_eq!(v["agreement"]["majority"], 1);
    assert_eq!(v["agreement"]["unresolved"], 1);
    assert_eq!(v["agreement"]["unanimous"], 0);
    assert_eq!(v["remaining_tasks"], 1);
}

#[tokio::test]
async fn append_on_annotate_ranks_the_new_instance_first() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), true, None)).unwrap();
    let near = json!({ "text": "zebra quokka narwhal axolotl pangolin okapi tapir", "k": 3 });
    let before = state.db.snapshot().len();
    let (_, v) = call(&state, "POST", "/api/retrieve", Some(near.clone())).await;
    assert_ne!(v["hits"][0]["doc_id"], "t1");

    let (s, r) = call(&state, "POST", "/api/tasks/t1/annotation", Some(annotation(&state, "a", 3, 1.0, "retrieval_assisted"))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(r["appended"], true);
    assert_eq!(r["db_size"], before + 1);
    let (_, v) = call(&state, "POST", "/api/retrieve", Some(near.clone())).await;
    assert_eq!(v["hits"][0]["doc_id"], "t1");
    assert_eq!(v["hits"][0]["labels"], json!(leaf_path(&state, 3)));
    assert_eq!(v["hits"][0]["text"], TASKS.lines().next().unwrap().split("\"text\":\"").nth(1).unwrap().trim_end_matches("\"}"));

    // A second opinion on the same document does not add a duplicate instance.
    let (_, r) = call(&state, "POST", "/api/tasks/t1/annotation", Some(annotation(&state, "b", 3, 1.0, "direct"))).await;
    assert_eq!(r["appended"], false);
    assert_eq!(state.db.snapshot().len(), before + 1);
    let last = state.db.snapshot().instances.last().unwrap().ordinal;
    assert_eq!(last, before as u64);

    // Reload re-reads the file and replays the log into it.
    let (s, v) = call(&state, "POST", "/api/admin/reload", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["db_size"], before + 1);
    drop(state);
    let state = AppState::open(&fixture(dir.path(), true, None)).unwrap();
    assert_eq!(state.db.snapshot().len(), before + 1);
}

#[tokio::test]
async fn reloading_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), false, None)).unwrap();
    state.set_reloading(true);
    assert_eq!(call(&state, "POST", "/api/retrieve", Some(json!({ "text": "x" }))).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&state, "POST", "/api/classify", Some(json!({ "text": "x" }))).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&state, "POST", "/api/admin/reload", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let body = annotation(&state, "a", 0, 1.0, "direct");
    assert_eq!(call(&state, "POST", "/api/tasks/t1/annotation", Some(body.clone())).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert!(state.records().is_empty());
    state.set_reloading(false);
    assert_eq!(call(&state, "POST", "/api/tasks/t1/annotation", Some(body)).await.0, StatusCode::CREATED);
    assert_eq!(call(&state, "POST", "/api/admin/reload", None).await.0, StatusCode::OK);
    assert!(!state.is_reloading());
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(&fixture(dir.path(), false, Some("s3cret"))).unwrap();
    assert_eq!(call(&state, "GET", "/api/stats", None).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call_with(&state, "GET", "/api/stats", None, Some("nope")).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call_with(&state, "GET", "/api/stats", None, Some("s3cret")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn acknowledged_annotations_survive_a_crash() {
    let dir = tempfile::tempdir().unwrap();
    let opts = fixture(dir.path(), true, None);
    let state = AppState::open(&opts).unwrap();
    let mut acked = Vec::new();
    for (doc, who) in [("t1", "a"), ("t2", "a"), ("t1", "b")] {
        let (s, r) = call(&state, "POST", &format!("/api/tasks/{doc}/annotation"), Some(annotation(&state, who, 1, 3.0, "direct"))).await;
        assert_eq!(s, StatusCode::CREATED);
        acked.push(r["record"].clone());
    }
    let size = state.db.snapshot().len();
    drop(state);
    // A crash in the middle of the next append leaves a partial line.
    let mut bytes = std::fs::read(&opts.annotations).unwrap();
    bytes.extend_from_slice(br#"{"seq":3,"doc_id":"t3","annotator":"a","lab"#);
    std::fs::write(&opts.annotations, bytes).unwrap();

    let state = AppState::open(&opts).unwrap();
    let records: Vec<Value> = state.records().iter().map(|r| serde_json::to_value(r).unwrap()).collect();
    assert_eq!(records, acked);
    assert_eq!(state.db.snapshot().len(), size);
    let (_, v) = call(&state, "GET", "/api/tasks/next?annotator=a", None).await;
    assert_eq!(v["id"], "t3");
    assert_eq!(call(&state, "POST", "/api/tasks/t1/annotation", Some(annotation(&state, "a", 1, 3.0, "direct"))).await.0, StatusCode::CONFLICT);
    let (s, r) = call(&state, "POST", "/api/tasks/t3/annotation", Some(annotation(&state, "a", 1, 3.0, "direct"))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(r["record"]["seq"], 3);
}
