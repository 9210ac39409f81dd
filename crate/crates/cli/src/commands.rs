use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use hticl::corpus::{load_corpus, write_corpus};
use hticl::evaluation::{align, micro_macro_f1, parse_labeled, topk_oracle_f1};
use hticl::inference::llm::{client_from_selector, AuditedLlm, LlmClient};
use hticl::inference::{
    classify_many, classify_retrieval_only, describe_leaves, text_store, Classifier, InferenceConfig, TextStore,
};
use hticl::retrieval::{build_database, DiversityKey, FingerprintPolicy};
use hticl::synthetic::SyntheticSpec;
use hticl::{Document, EncoderParams, FewShotConfig, LabelPath, RetrievalDatabase, Taxonomy, TrainConfig};
use hticl_service::{majority_vote, AnnotationRecord, AppState, ServiceOptions, VoteOutcome};
use serde::Deserialize;
use serde_json::json;

use crate::manifest::{self, Step};
use crate::{
    BuildDbArgs, ClassifyArgs, CliError, DescribeArgs, EvaluateArgs, GenFixtureArgs, ModelArgs, SampleArgs,
    ServeArgs, TrainArgs, VotesArgs,
};

type Result<T = ()> = std::result::Result<T, CliError>;

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} file `{}` does not exist", path.display())))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(path, "config")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    require(path, "taxonomy")?;
    Ok(Taxonomy::load(path)?)
}

fn load_docs(path: &Path, taxonomy: &Taxonomy, what: &str) -> Result<Vec<Document>> {
    require(path, what)?;
    Ok(load_corpus(path, taxonomy)?)
}

struct Model {
    taxonomy: Taxonomy,
    params: EncoderParams,
    db: RetrievalDatabase,
    texts: TextStore,
}

fn load_model(m: &ModelArgs) -> Result<Model> {
    for (p, what) in [(&m.taxonomy, "taxonomy"), (&m.params, "params"), (&m.db, "database"), (&m.train, "training corpus")] {
        require(p, what)?;
    }
    let taxonomy = Taxonomy::load(&m.taxonomy)?;
    let params = EncoderParams::load(&m.params)?;
    let db = RetrievalDatabase::load_for(&m.db, &taxonomy)?;
    db.check_fingerprint(&params, FingerprintPolicy::Fail).map_err(hticl::Error::from)?;
    let texts = text_store(&load_corpus(&m.train, &taxonomy)?);
    Ok(Model { taxonomy, params, db, texts })
}

fn model_inputs(step: Step, m: &ModelArgs) -> Result<Step> {
    step.input(&m.taxonomy)?.input(&m.params)?.input(&m.db)?.input(&m.train)
}

pub fn gen_fixture(a: &GenFixtureArgs, manifest: Option<&Path>) -> Result {
    if a.branching.is_empty() || a.branching.contains(&0) || a.docs_per_leaf == 0 {
        return Err(CliError::Config("branching factors and docs per leaf must be positive".into()));
    }
    let spec = SyntheticSpec { branching: a.branching.clone(), docs_per_leaf: a.docs_per_leaf, seed: a.seed, ..Default::default() };
    let taxonomy = spec.taxonomy();
    let docs = spec.corpus(&taxonomy);
    let tax_path = a.out.join("taxonomy.tsv");
    let corpus_path = a.out.join("corpus.jsonl");
    write(&tax_path, taxonomy.to_text())?;
    write(&corpus_path, write_corpus(&docs, &taxonomy))?;
    log::info!("{} leaves, {} documents in {}", taxonomy.leaves().len(), docs.len(), a.out.display());
    let step = Step::new(json!({ "branching": a.branching, "docs_per_leaf": a.docs_per_leaf }))
        .seed("fixture", a.seed)
        .output(&tax_path)?
        .output(&corpus_path)?;
    manifest::record(&manifest::location(manifest, &tax_path), "gen-fixture", step)
}

pub fn sample(a: &SampleArgs, manifest: Option<&Path>) -> Result {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let corpus = load_docs(&a.corpus, &taxonomy, "corpus")?;
    let cfg = FewShotConfig { q: a.q, seed: a.seed, mode: a.mode };
    let picked = hticl::corpus::sample(&corpus, &cfg).map_err(hticl::Error::from)?;
    write(&a.out, write_corpus(&picked, &taxonomy))?;
    let mut step = Step::new(cfg).seed("few-shot", a.seed).input(&a.taxonomy)?.input(&a.corpus)?.output(&a.out)?;
    if let Some(rest_path) = &a.rest {
        let ids: HashSet<&str> = picked.iter().map(|d| d.id.as_str()).collect();
        let rest: Vec<Document> = corpus.iter().filter(|d| !ids.contains(d.id.as_str())).cloned().collect();
        write(rest_path, write_corpus(&rest, &taxonomy))?;
        step = step.output(rest_path)?;
    }
    log::info!("sampled {} of {} documents", picked.len(), corpus.len());
    manifest::record(&manifest::location(manifest, &a.out), "sample", step)
}

fn audited(client: Box<dyn LlmClient>, audit: Option<&Path>) -> Result<Box<dyn LlmClient>> {
    Ok(match audit {
        Some(p) => Box::new(AuditedLlm::new(client, p).map_err(|e| CliError::io(p, e))?),
        None => client,
    })
}

fn llm_client(selector: &str, audit: Option<&Path>) -> Result<Box<dyn LlmClient>> {
    let client = client_from_selector(selector).map_err(|e| CliError::Config(format!("LLM `{selector}`: {e}")))?;
    audited(client, audit)
}

pub fn describe_labels(a: &DescribeArgs, manifest: Option<&Path>) -> Result {
    let mut taxonomy = load_taxonomy(&a.taxonomy)?;
    let llm = llm_client(&a.llm, a.audit.as_deref())?;
    let calls = describe_leaves(&mut taxonomy, llm.as_ref(), a.temperature).map_err(hticl::Error::from)?;
    write(&a.out, taxonomy.to_text())?;
    log::info!("described {calls} leaves");
    let step = Step::new(json!({ "llm": a.llm, "temperature": a.temperature, "calls": calls }))
        .input(&a.taxonomy)?
        .output(&a.out)?;
    manifest::record(&manifest::location(manifest, &a.out), "describe-labels", step)
}

pub fn train_indexer(a: &TrainArgs, manifest: Option<&Path>) -> Result {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(lr, epochs, alpha, beta, tau, mask_rate, dim, seed, label_text);
    cfg.infonce_denominator |= a.infonce;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let train = load_docs(&a.train, &taxonomy, "training corpus")?;
    let outcome = hticl::indexer::train_indexer(&train, &taxonomy, &cfg).map_err(hticl::Error::from)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    outcome.params.save(&a.out)?;
    let mut step = Step::new(&cfg).seed("train", cfg.seed).input(&a.taxonomy)?.input(&a.train)?.output(&a.out)?;
    if let Some(p) = &a.losses {
        let lines: String = outcome
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, l)| json!({ "epoch": e + 1, "mlm": l.mlm, "cls": l.cls, "con": l.con, "total": l.total }).to_string() + "\n")
            .collect();
        write(p, lines)?;
        step = step.output(p)?;
    }
    if let Some(last) = outcome.epoch_losses.last() {
        log::info!("final epoch: total {:.4} (mlm {:.4}, cls {:.4}, con {:.4})", last.total, last.mlm, last.cls, last.con);
    }
    manifest::record(&manifest::location(manifest, &a.out), "train-indexer", step)
}

pub fn build_db(a: &BuildDbArgs, manifest: Option<&Path>) -> Result {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    require(&a.params, "params")?;
    let params = EncoderParams::load(&a.params)?;
    let train = load_docs(&a.train, &taxonomy, "training corpus")?;
    let db = build_database(&train, &params, &taxonomy).map_err(hticl::Error::from)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    db.save(&a.out)?;
    log::info!("indexed {} instances", db.len());
    let step = Step::new(json!({ "instances": db.len(), "dim": db.dim, "depth": db.depth }))
        .input(&a.taxonomy)?
        .input(&a.params)?
        .input(&a.train)?
        .output(&a.out)?;
    manifest::record(&manifest::location(manifest, &a.out), "build-db", step)
}

pub fn search(a: &crate::SearchArgs) -> Result {
    if a.k == 0 {
        return Err(CliError::Config("k must be at least 1".into()));
    }
    let m = load_model(&a.model)?;
    let query = hticl::indexer::encode(&hticl::corpus::tokenize(&a.text), &m.params)
        .map_err(hticl::Error::from)?
        .index_f32();
    let hits = m
        .db
        .search_topk_diverse(&query, a.k, DiversityKey::FullPath, Some(&m.taxonomy))
        .map_err(hticl::Error::from)?;
    let mut out = std::io::stdout().lock();
    for (rank, h) in hits.iter().enumerate() {
        let line = json!({
            "rank": rank + 1,
            "doc_id": h.instance.doc_id,
            "score": h.score,
            "labels": m.taxonomy.path_names(&h.instance.path),
            "text": m.texts.get(&h.instance.doc_id),
        });
        writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct InputRecord {
    id: Option<String>,
    text: String,
}

fn read_inputs(path: &Path) -> Result<Vec<(String, String)>> {
    require(path, "input")?;
    let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InputRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((rec.id.unwrap_or_else(|| format!("line-{}", i + 1)), rec.text));
    }
    Ok(out)
}

fn inference_config(a: &ClassifyArgs) -> Result<InferenceConfig> {
    let mut cfg: InferenceConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => InferenceConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(llm) = &a.llm {
        cfg.llm = llm.clone();
    }
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    if let Some(f) = a.fallback {
        cfg.fallback = f;
    }
    if let Some(t) = a.threads {
        cfg.max_in_flight = t;
    }
    cfg.iterative &= !a.no_iterative;
    cfg.demos &= !a.no_demos;
    cfg.pruning &= !a.no_pruning;
    cfg.candidate_set &= !a.no_candidate_set;
    cfg.per_level_retrieval |= a.per_level_retrieval;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

pub fn classify(a: &ClassifyArgs, manifest: Option<&Path>) -> Result {
    let cfg = inference_config(a)?;
    let m = load_model(&a.model)?;
    let inputs = read_inputs(&a.input)?;
    let names = |p: &LabelPath| m.taxonomy.path_names(p);
    let mut preds = open_writer(&a.out)?;
    let io_err = |e| CliError::io(&a.out, e);
    let mut fallbacks = 0;

    if a.retrieval_only {
        for (id, text) in &inputs {
            let path = classify_retrieval_only(text, &m.db, &m.params).map_err(hticl::Error::from)?;
            let query = hticl::indexer::encode(&hticl::corpus::tokenize(text), &m.params).map_err(hticl::Error::from)?.index_f32();
            let topk: Vec<Vec<String>> = m
                .db
                .search_topk_diverse(&query, cfg.k, cfg.diversity, Some(&m.taxonomy))
                .map_err(hticl::Error::from)?
                .iter()
                .map(|h| names(&h.instance.path))
                .collect();
            writeln!(preds, "{}", json!({ "id": id, "labels": names(&path), "topk": topk })).map_err(io_err)?;
        }
    } else {
        let llm = llm_client(&cfg.llm, a.audit.as_deref())?;
        let classifier = Classifier::new(&m.taxonomy, &m.params, &m.db, &m.texts, &cfg).map_err(hticl::Error::from)?;
        let texts: Vec<String> = inputs.iter().map(|(_, t)| t.clone()).collect();
        let results = classify_many(&classifier, &texts, llm.as_ref(), cfg.max_in_flight);
        let mut traces = a.traces.as_deref().map(open_writer).transpose()?;
        for ((id, _), result) in inputs.iter().zip(results) {
            let trace = result.map_err(|e| CliError::Failed(format!("document `{id}`: {e}")))?;
            fallbacks += usize::from(trace.fallback_used());
            let topk: Vec<Vec<String>> = trace.demos.iter().map(|d| names(&d.path)).collect();
            writeln!(preds, "{}", json!({ "id": id, "labels": trace.labels, "topk": topk, "fallback_used": trace.fallback_used() }))
                .map_err(io_err)?;
            if let (Some(w), Some(p)) = (traces.as_mut(), a.traces.as_deref()) {
                let mut v = serde_json::to_value(&trace).expect("traces serialize");
                v["id"] = json!(id);
                writeln!(w, "{v}").map_err(|e| CliError::io(p, e))?;
            }
        }
        if let (Some(mut w), Some(p)) = (traces, a.traces.as_deref()) {
            w.flush().map_err(|e| CliError::io(p, e))?;
        }
    }
    preds.flush().map_err(io_err)?;
    drop(preds);
    log::info!("classified {} documents ({fallbacks} used a fallback)", inputs.len());

    let mut step = model_inputs(Step::new(json!({ "inference": cfg, "retrieval_only": a.retrieval_only })), &a.model)?
        .input(&a.input)?
        .output(&a.out)?;
    if let Some(t) = &a.traces {
        step = step.output(t)?;
    }
    manifest::record(&manifest::location(manifest, &a.out), "classify", step)
}

fn load_labeled(path: &Path, taxonomy: &Taxonomy, what: &str) -> Result<Vec<hticl::evaluation::LabeledRecord>> {
    require(path, what)?;
    let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_labeled(&src, taxonomy).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

pub fn evaluate(a: &EvaluateArgs, manifest: Option<&Path>) -> Result {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let gold = load_labeled(&a.gold, &taxonomy, "gold")?;
    let pred = load_labeled(&a.pred, &taxonomy, "prediction")?;
    let pairs = align(&gold, &pred).map_err(hticl::Error::from)?;
    let golds: Vec<LabelPath> = pairs.iter().map(|(g, _)| g.path.clone()).collect();
    let report = if a.topk {
        let topk: Vec<Vec<LabelPath>> = pairs.iter().map(|(_, p)| p.topk.clone()).collect();
        topk_oracle_f1(&golds, &topk)
    } else {
        let preds: Vec<LabelPath> = pairs.iter().map(|(_, p)| p.path.clone()).collect();
        micro_macro_f1(&golds, &preds)
    }
    .map_err(hticl::Error::from)?;
    let mut report = report.with_names(&taxonomy);
    report.config = json!({ "gold": a.gold, "pred": a.pred, "topk_oracle": a.topk });
    print!("{}", report.to_table());
    let Some(out) = &a.out else { return Ok(()) };
    write(out, report.to_jsonl())?;
    let step = Step::new(json!({ "topk_oracle": a.topk, "micro_f1": report.micro_f1, "macro_f1": report.macro_f1 }))
        .input(&a.taxonomy)?
        .input(&a.gold)?
        .input(&a.pred)?
        .output(out)?;
    manifest::record(&manifest::location(manifest, out), "evaluate", step)
}

pub fn serve(a: &ServeArgs) -> Result {
    for (p, what) in [(&a.model.taxonomy, "taxonomy"), (&a.model.params, "params"), (&a.model.db, "database"), (&a.model.train, "training corpus")] {
        require(p, what)?;
    }
    if let Some(t) = &a.tasks {
        require(t, "tasks")?;
    }
    let opts = ServiceOptions {
        taxonomy: a.model.taxonomy.clone(),
        params: a.model.params.clone(),
        db: a.model.db.clone(),
        corpus: Some(a.model.train.clone()),
        tasks: a.tasks.clone(),
        annotations: a.annotations.clone(),
        append_on_annotate: a.append_on_annotate,
        llm: a.llm.clone(),
        token: a.token.clone(),
    };
    let state = AppState::open(&opts)?;
    log::info!("{} instances, {} tasks, {} annotations replayed", state.db.snapshot().len(), state.tasks().len(), state.records().len());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Failed(format!("runtime: {e}")))?;
    runtime.block_on(hticl_service::serve(state, &a.listen))?;
    Ok(())
}

/// Complete lines only; a torn final line (crash mid-append) is ignored.
fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    require(path, "annotation log")?;
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut out = Vec::new();
    for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        out.push(
            serde_json::from_slice(line).map_err(|e| CliError::Failed(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn votes(a: &VotesArgs) -> Result {
    let records = read_annotations(&a.annotations)?;
    let votes = majority_vote(&records);
    let lines: String = votes.iter().map(|v| serde_json::to_string(v).expect("votes serialize") + "\n").collect();
    match &a.out {
        Some(p) => write(p, &lines)?,
        None => print!("{lines}"),
    }
    let unresolved = votes.iter().filter(|v| matches!(v.outcome, VoteOutcome::Unresolved { .. })).count();
    eprintln!("{} documents, {} resolved, {unresolved} unresolved", votes.len(), votes.len() - unresolved);
    Ok(())
}
