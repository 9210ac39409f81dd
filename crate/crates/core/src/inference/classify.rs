use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::debug;
use serde::{Deserialize, Serialize};

use super::llm::{LlmClient, LlmRequest};
use super::policy::{self, FallbackSource, ParseOutcome};
use super::prompt::{self, DemoBlock, PromptTemplate, RenderedPrompt};
use super::{Demonstration, InferenceConfig, InferenceError, TextStore};
use crate::corpus::tokenize;
use crate::indexer::{encode, EncoderParams};
use crate::retrieval::{FingerprintPolicy, IndexedInstance, RetrievalDatabase};
use crate::taxonomy::{LabelPath, NodeId, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    Iterative,
    /// One prompt over whole label paths.
    Flat,
    /// The LLM picks the closest demonstration.
    Select,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRef {
    pub doc_id: String,
    pub path: LabelPath,
    pub score: f64,
}

impl From<&Demonstration> for DemoRef {
    fn from(d: &Demonstration) -> Self {
        Self { doc_id: d.doc_id.clone(), path: d.path.clone(), score: d.score }
    }
}

/// One LLM step. `level` is 0 for steps that choose a whole path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    pub current: String,
    pub demos: Vec<DemoRef>,
    pub candidates: Vec<String>,
    pub prompt: String,
    pub reply: String,
    pub parse: ParseOutcome,
    /// Single candidate: taken regardless of the reply.
    pub forced: bool,
    pub fallback_used: bool,
    pub fallback: Option<FallbackSource>,
    /// Nodes this step decided, level order.
    pub chosen: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub mode: TraceMode,
    pub template_version: String,
    pub db_fingerprint: String,
    pub llm: String,
    pub demos: Vec<DemoRef>,
    pub steps: Vec<LevelTrace>,
    pub path: LabelPath,
    pub labels: Vec<String>,
    pub llm_calls: usize,
}

impl InferenceTrace {
    pub fn fallback_used(&self) -> bool {
        self.steps.iter().any(|s| s.fallback_used)
    }
}

/// Encode `text` and return the most similar instance's path.
pub fn classify_retrieval_only(
    text: &str,
    db: &RetrievalDatabase,
    params: &EncoderParams,
) -> Result<LabelPath, InferenceError> {
    let query = encode(&tokenize(text), params)?.index_f32();
    Ok(db.top1(&query)?.instance.path.clone())
}

/// Everything a query needs, borrowed from a loaded model.
#[derive(Clone, Copy)]
pub struct Classifier<'a> {
    pub taxonomy: &'a Taxonomy,
    pub params: &'a EncoderParams,
    pub db: &'a RetrievalDatabase,
    pub texts: &'a TextStore,
    pub template: &'a PromptTemplate,
    pub cfg: &'a InferenceConfig,
}

impl<'a> Classifier<'a> {
    pub fn new(
        taxonomy: &'a Taxonomy,
        params: &'a EncoderParams,
        db: &'a RetrievalDatabase,
        texts: &'a TextStore,
        cfg: &'a InferenceConfig,
    ) -> Result<Self, InferenceError> {
        cfg.validate()?;
        if !cfg.candidate_set && !cfg.demos {
            return Err(InferenceError::Config("selecting a demonstration needs demos shown".into()));
        }
        db.check_taxonomy(taxonomy)?;
        db.check_fingerprint(params, FingerprintPolicy::Fail)?;
        Ok(Self { taxonomy, params, db, texts, template: PromptTemplate::builtin(), cfg })
    }

    pub fn encode_query(&self, text: &str) -> Result<Vec<Vec<f32>>, InferenceError> {
        Ok(encode(&tokenize(text), self.params)?.index_f32())
    }

    fn retrieve(
        &self,
        query: &[Vec<f32>],
        keep: impl Fn(&IndexedInstance) -> bool,
    ) -> Result<Vec<Demonstration>, InferenceError> {
        self.db
            .search_topk_diverse_where(query, self.cfg.k, self.cfg.diversity, Some(self.taxonomy), keep)?
            .into_iter()
            .map(|hit| {
                let text = self
                    .texts
                    .get(&hit.instance.doc_id)
                    .ok_or_else(|| InferenceError::MissingDemoText(hit.instance.doc_id.clone()))?;
                Ok(Demonstration {
                    doc_id: hit.instance.doc_id.clone(),
                    text: text.clone(),
                    path: hit.instance.path.clone(),
                    score: hit.score,
                })
            })
            .collect()
    }

    fn ask(&self, llm: &dyn LlmClient, prompt: &RenderedPrompt) -> Result<String, InferenceError> {
        let request = LlmRequest {
            messages: prompt.messages.clone(),
            temperature: self.cfg.temperature,
            context: prompt.context.clone(),
        };
        Ok(llm.complete(&request)?)
    }

    pub fn classify(&self, text: &str, llm: &dyn LlmClient) -> Result<InferenceTrace, InferenceError> {
        let query = self.encode_query(text)?;
        let demos = self.retrieve(&query, |_| true)?;
        let (mode, steps) = match (self.cfg.candidate_set, self.cfg.iterative) {
            (false, _) => (TraceMode::Select, vec![self.select_step(text, &query, &demos, llm)?]),
            (true, false) => (TraceMode::Flat, vec![self.flat_step(text, &query, &demos, llm)?]),
            (true, true) => (TraceMode::Iterative, self.iterative_steps(text, &query, &demos, llm)?),
        };
        let mut nodes: Vec<NodeId> = Vec::new();
        for step in &steps {
            if step.level == 0 || step.fallback == Some(FallbackSource::Top1Path) {
                nodes.clear();
            }
            nodes.extend(&step.chosen);
        }
        let path = LabelPath(nodes);
        self.taxonomy.validate_path(&path)?;
        let trace = InferenceTrace {
            mode,
            template_version: self.template.version().to_string(),
            db_fingerprint: self.db.encoder_fingerprint.clone(),
            llm: llm.name(),
            demos: demos.iter().map(DemoRef::from).collect(),
            llm_calls: steps.len(),
            labels: self.taxonomy.path_names(&path),
            path,
            steps,
        };
        debug!("classified as {:?} with {} LLM calls", trace.labels, trace.llm_calls);
        Ok(trace)
    }

    fn iterative_steps(
        &self,
        text: &str,
        query: &[Vec<f32>],
        demos: &[Demonstration],
        llm: &dyn LlmClient,
    ) -> Result<Vec<LevelTrace>, InferenceError> {
        let tax = self.taxonomy;
        let mut steps = Vec::with_capacity(tax.depth());
        let mut current = NodeId::ROOT;
        for level in 1..=tax.depth() {
            let retrieved = if self.cfg.per_level_retrieval && level > 1 {
                let below = self.retrieve(query, |inst| inst.path.passes_through(current))?;
                if below.is_empty() {
                    demos.to_vec()
                } else {
                    below
                }
            } else {
                demos.to_vec()
            };
            let shown: &[Demonstration] = if self.cfg.demos { &retrieved } else { &[] };
            let ids = policy::candidate_label_set(tax, current, shown, self.cfg)?;
            let names: Vec<String> = ids.iter().map(|&id| tax.display_name(id)).collect();
            let blocks: Vec<DemoBlock<'_>> = shown
                .iter()
                .map(|d| DemoBlock {
                    text: &d.text,
                    current_label: tax.display_name(if level == 1 { NodeId::ROOT } else { d.path.at_level(level - 1) }),
                    answer: tax.display_name(d.path.at_level(level)),
                })
                .collect();
            let rendered =
                prompt::render_level_prompt(self.template, text, &tax.display_name(current), &blocks, &names);
            let reply = self.ask(llm, &rendered)?;
            let parse = policy::parse_llm_label(&reply, &names);
            let mut step = LevelTrace {
                level,
                current: tax.display_name(current),
                demos: shown.iter().map(DemoRef::from).collect(),
                candidates: names,
                prompt: rendered.text(),
                reply,
                parse,
                forced: ids.len() == 1,
                fallback_used: false,
                fallback: None,
                chosen: Vec::new(),
            };
            let done = match (step.forced, parse.index()) {
                (true, _) => {
                    step.chosen.push(ids[0]);
                    false
                }
                (false, Some(i)) => {
                    step.chosen.push(ids[i]);
                    false
                }
                (false, None) => {
                    let fb = policy::fallback(tax, self.db, query, current, level, &retrieved, self.cfg.fallback)?;
                    step.fallback_used = true;
                    step.fallback = Some(fb.source);
                    step.chosen = fb.nodes;
                    matches!(fb.source, FallbackSource::RemainingPath | FallbackSource::Top1Path)
                }
            };
            current = *step.chosen.last().expect("every step chooses a node");
            steps.push(step);
            if done {
                break;
            }
        }
        Ok(steps)
    }

    fn flat_step(
        &self,
        text: &str,
        query: &[Vec<f32>],
        demos: &[Demonstration],
        llm: &dyn LlmClient,
    ) -> Result<LevelTrace, InferenceError> {
        let tax = self.taxonomy;
        let shown: &[Demonstration] = if self.cfg.demos { demos } else { &[] };
        let paths = policy::flat_candidates(tax, shown, self.cfg);
        let names: Vec<String> = paths.iter().map(|p| tax.path_text(p)).collect();
        let blocks: Vec<(&str, String)> = shown.iter().map(|d| (d.text.as_str(), tax.path_text(&d.path))).collect();
        let rendered = prompt::render_flat_prompt(self.template, text, &blocks, &names);
        let reply = self.ask(llm, &rendered)?;
        let parse = policy::parse_llm_label(&reply, &names);
        let forced = paths.len() == 1;
        let (chosen, fallback) = match (forced, parse.index()) {
            (true, _) => (paths[0].clone(), None),
            (false, Some(i)) => (paths[i].clone(), None),
            (false, None) => (self.db.top1(query)?.instance.path.clone(), Some(FallbackSource::Top1Path)),
        };
        Ok(LevelTrace {
            level: 0,
            current: tax.display_name(NodeId::ROOT),
            demos: shown.iter().map(DemoRef::from).collect(),
            candidates: names,
            prompt: rendered.text(),
            reply,
            parse,
            forced,
            fallback_used: fallback.is_some(),
            fallback,
            chosen: chosen.0,
        })
    }

    fn select_step(
        &self,
        text: &str,
        query: &[Vec<f32>],
        demos: &[Demonstration],
        llm: &dyn LlmClient,
    ) -> Result<LevelTrace, InferenceError> {
        let texts: Vec<&str> = demos.iter().map(|d| d.text.as_str()).collect();
        let rendered = prompt::render_select_prompt(self.template, text, &texts);
        let reply = self.ask(llm, &rendered)?;
        let pick = policy::parse_selection(&reply, demos.len());
        let forced = demos.len() == 1;
        let (chosen, fallback) = match (forced, pick) {
            (true, _) => (demos[0].path.clone(), None),
            (false, Some(i)) => (demos[i].path.clone(), None),
            (false, None) => (self.db.top1(query)?.instance.path.clone(), Some(FallbackSource::Top1Path)),
        };
        Ok(LevelTrace {
            level: 0,
            current: self.taxonomy.display_name(NodeId::ROOT),
            demos: demos.iter().map(DemoRef::from).collect(),
            candidates: rendered.context.candidates.clone(),
            prompt: rendered.text(),
            reply,
            parse: match pick {
                Some(i) => ParseOutcome::Matched(i, policy::MatchKind::Exact),
                None => ParseOutcome::NoMatch,
            },
            forced,
            fallback_used: fallback.is_some(),
            fallback,
            chosen: chosen.0,
        })
    }
}

/// Classify `texts` on up to `threads` worker threads; results keep input order.
pub fn classify_many(
    classifier: &Classifier<'_>,
    texts: &[String],
    llm: &dyn LlmClient,
    threads: usize,
) -> Vec<Result<InferenceTrace, InferenceError>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<InferenceTrace, InferenceError>>>> =
        Mutex::new((0..texts.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, texts.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= texts.len() {
                    break;
                }
                let r = classifier.classify(&texts[i], llm);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every slot filled")).collect()
}
