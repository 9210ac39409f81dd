//! HTTP service for retrieval, classification and annotation.
//!
//! [`AppState::open`] loads a trained model plus a task pool and replays the
//! annotation log; [`router`] exposes it under `/api`; [`serve`] runs it.

pub mod annotation;
mod api;
pub mod tasks;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use hticl::inference::llm::{client_from_selector, LlmClient};
use hticl::inference::{InferenceConfig, TextStore};
use hticl::retrieval::{FingerprintPolicy, SharedDatabase};
use hticl::{Document, EncoderParams, RetrievalDatabase, Taxonomy};

pub use annotation::{majority_vote, AnnotationLog, AnnotationMode, AnnotationRecord, DocVote, VoteOutcome};
pub use api::router;
pub use tasks::{parse_tasks, Task};

pub const LISTEN_ENV: &str = "HTICL_LISTEN";
pub const TOKEN_ENV: &str = "HTICL_API_TOKEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt annotation record: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },
    #[error("tasks line {line}: {message}")]
    Tasks { line: usize, message: String },
    #[error(transparent)]
    Core(#[from] hticl::Error),
    #[error(transparent)]
    Llm(#[from] hticl::inference::LlmError),
}

impl ServiceError {
    fn core(e: impl Into<hticl::Error>) -> Self {
        ServiceError::Core(e.into())
    }
}

/// Files and switches needed to start the service.
#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub taxonomy: PathBuf,
    pub params: PathBuf,
    pub db: PathBuf,
    /// Labelled documents whose texts back the database's demonstrations.
    pub corpus: Option<PathBuf>,
    /// JSONL of `{"id", "text"}` documents to annotate.
    pub tasks: Option<PathBuf>,
    pub annotations: PathBuf,
    /// Encode each newly annotated document into the database.
    pub append_on_annotate: bool,
    pub llm: String,
    /// Require `Authorization: Bearer <token>` when set.
    pub token: Option<String>,
}

/// Annotation bookkeeping guarded by one mutex: the single writer.
#[derive(Debug)]
pub(crate) struct Annotations {
    pub log: AnnotationLog,
    pub records: Vec<AnnotationRecord>,
    pub done: HashSet<(String, String)>,
    /// Documents already fed into the database.
    pub appended: HashSet<String>,
}

pub struct AppState {
    pub taxonomy: Arc<Taxonomy>,
    pub params: Arc<EncoderParams>,
    pub db: SharedDatabase,
    texts: RwLock<Arc<TextStore>>,
    tasks: Vec<Task>,
    task_index: HashMap<String, usize>,
    annotations: Mutex<Annotations>,
    reloading: AtomicBool,
    llm: Arc<dyn LlmClient>,
    llm_selector: String,
    db_path: Option<PathBuf>,
    corpus_texts: TextStore,
    pub append_on_annotate: bool,
    pub token: Option<String>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("db_size", &self.db.snapshot().len())
            .field("tasks", &self.tasks.len())
            .field("llm", &self.llm_selector)
            .finish_non_exhaustive()
    }
}

impl AppState {
    /// Load everything named in `opts` and replay the annotation log.
    pub fn open(opts: &ServiceOptions) -> Result<Arc<Self>, ServiceError> {
        let taxonomy = Taxonomy::load(&opts.taxonomy)?;
        let params = EncoderParams::load(&opts.params)?;
        let db = RetrievalDatabase::load_for(&opts.db, &taxonomy)?;
        db.check_fingerprint(&params, FingerprintPolicy::Fail).map_err(ServiceError::core)?;
        let texts = match &opts.corpus {
            Some(p) => hticl::inference::text_store(&hticl::corpus::load_corpus(p, &taxonomy)?),
            None => TextStore::new(),
        };
        let tasks = match &opts.tasks {
            Some(p) => {
                let src = std::fs::read_to_string(p).map_err(|e| ServiceError::Io { path: p.clone(), source: e })?;
                parse_tasks(&src)?
            }
            None => Vec::new(),
        };
        let llm: Arc<dyn LlmClient> = Arc::from(client_from_selector(&opts.llm)?);
        let (log, records) = AnnotationLog::open(&opts.annotations)?;
        let mut state = Self::build(taxonomy, params, db, texts, tasks, log, records, llm, &opts.llm);
        state.db_path = Some(opts.db.clone());
        state.append_on_annotate = opts.append_on_annotate;
        state.token = opts.token.clone().filter(|t| !t.is_empty());
        state.replay_appends()?;
        Ok(Arc::new(state))
    }

    /// Assemble a state from loaded parts; `append_on_annotate` is off and no
    /// token is required until set.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        taxonomy: Taxonomy,
        params: EncoderParams,
        db: RetrievalDatabase,
        texts: TextStore,
        tasks: Vec<Task>,
        log: AnnotationLog,
        records: Vec<AnnotationRecord>,
        llm: Arc<dyn LlmClient>,
        llm_selector: &str,
    ) -> Self {
        let task_index = tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        let done = records.iter().map(|r| (r.doc_id.clone(), r.annotator.clone())).collect();
        Self {
            taxonomy: Arc::new(taxonomy),
            params: Arc::new(params),
            db: SharedDatabase::new(db),
            texts: RwLock::new(Arc::new(texts.clone())),
            tasks,
            task_index,
            annotations: Mutex::new(Annotations { log, records, done, appended: HashSet::new() }),
            reloading: AtomicBool::new(false),
            llm,
            llm_selector: llm_selector.to_string(),
            db_path: None,
            corpus_texts: texts,
            append_on_annotate: false,
            token: None,
        }
    }

    /// Feed every annotated task (first annotation wins) into the current
    /// snapshot. Runs at start-up and after a reload.
    pub fn replay_appends(&self) -> Result<(), ServiceError> {
        let mut ann = self.annotations.lock().expect("annotation lock poisoned");
        ann.appended.clear();
        if !self.append_on_annotate {
            return Ok(());
        }
        let records = ann.records.clone();
        for rec in &records {
            self.append_locked(&mut ann, rec)?;
        }
        Ok(())
    }

    pub(crate) fn append_locked(&self, ann: &mut Annotations, rec: &AnnotationRecord) -> Result<(), ServiceError> {
        if ann.appended.contains(&rec.doc_id) {
            return Ok(());
        }
        let Some(task) = self.task(&rec.doc_id) else {
            log::warn!("annotated document `{}` is not in the task pool; not appended", rec.doc_id);
            return Ok(());
        };
        let doc = Document::new(task.id.clone(), task.text.clone(), rec.path.clone());
        self.db.update(|db| db.append_instance(&doc, &self.params)).map_err(ServiceError::core)?;
        let mut texts = self.texts.write().expect("text lock poisoned");
        Arc::make_mut(&mut texts).insert(doc.id.clone(), doc.text);
        ann.appended.insert(rec.doc_id.clone());
        Ok(())
    }

    pub fn texts(&self) -> Arc<TextStore> {
        self.texts.read().expect("text lock poisoned").clone()
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.task_index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn llm(&self) -> &dyn LlmClient {
        self.llm.as_ref()
    }

    pub fn llm_selector(&self) -> &str {
        &self.llm_selector
    }

    /// A copy of every acknowledged annotation, log order.
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.annotations.lock().expect("annotation lock poisoned").records.clone()
    }

    pub fn is_reloading(&self) -> bool {
        self.reloading.load(Ordering::SeqCst)
    }

    /// Mark the database as (not) reloading; data endpoints answer 503 meanwhile.
    pub fn set_reloading(&self, on: bool) {
        self.reloading.store(on, Ordering::SeqCst);
    }

    /// Re-read the database file and re-apply annotation appends.
    pub fn reload(&self) -> Result<usize, ServiceError> {
        let path = self.db_path.as_deref().ok_or_else(|| {
            ServiceError::Io {
                path: PathBuf::new(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no database file configured"),
            }
        })?;
        let db = RetrievalDatabase::load_for(path, &self.taxonomy)?;
        db.check_fingerprint(&self.params, FingerprintPolicy::Fail).map_err(ServiceError::core)?;
        self.db.replace(db);
        *self.texts.write().expect("text lock poisoned") = Arc::new(self.corpus_texts.clone());
        self.replay_appends()?;
        Ok(self.db.snapshot().len())
    }

    pub fn db_path(&self) -> Option<&Path> {
        self.db_path.as_deref()
    }

    pub(crate) fn annotations(&self) -> std::sync::MutexGuard<'_, Annotations> {
        self.annotations.lock().expect("annotation lock poisoned")
    }

    pub fn default_inference(&self) -> InferenceConfig {
        InferenceConfig { llm: self.llm_selector.clone(), ..Default::default() }
    }
}

/// Bind `addr` and serve until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: &str) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Io { path: PathBuf::from(addr), source: e })?;
    let local = listener.local_addr().map_err(|e| ServiceError::Io { path: PathBuf::from(addr), source: e })?;
    log::info!("listening on http://{local}");
    // Scripts wait for this line before sending requests.
    println!("listening on http://{local}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Io { path: PathBuf::from(addr), source: e })
}

/// `HTICL_LISTEN`, or the default loopback address.
pub fn listen_addr_from_env() -> String {
    std::env::var(LISTEN_ENV).ok().filter(|s| !s.is_empty()).unwrap_or_else(|| DEFAULT_LISTEN.to_string())
}
