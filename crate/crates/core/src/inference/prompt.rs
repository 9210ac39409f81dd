//! Prompt rendering from the versioned template resource.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::llm::{ChatMessage, PromptContext, PromptKind};

const TEMPLATE_SOURCE: &str = include_str!("../../resources/prompt_template.txt");

#[derive(Debug)]
pub struct PromptTemplate {
    sections: HashMap<String, String>,
    version: String,
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self, String> {
        let mut sections = HashMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        for line in source.lines() {
            if line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if let Some((n, body)) = current.take() {
                    sections.insert(n, body.join("\n"));
                }
                current = Some((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            } else if !line.trim().is_empty() {
                return Err(format!("text outside a section: `{line}`"));
            }
        }
        if let Some((n, body)) = current {
            sections.insert(n, body.join("\n"));
        }
        let version = crate::sha256_hex(source.as_bytes())[..16].to_string();
        Ok(Self { sections, version })
    }

    /// The built-in template.
    pub fn builtin() -> &'static PromptTemplate {
        static TEMPLATE: OnceLock<PromptTemplate> = OnceLock::new();
        TEMPLATE.get_or_init(|| PromptTemplate::parse(TEMPLATE_SOURCE).expect("built-in template parses"))
    }

    /// First 16 hex digits of the SHA-256 of the template source.
    pub fn version(&self) -> &str {
        &self.version
    }

    fn render(&self, section: &str, vars: &[(&str, &str)]) -> String {
        let body = self.sections.get(section).unwrap_or_else(|| panic!("template section `{section}` missing"));
        // Single pass so substituted text is never re-scanned for placeholders.
        let mut out = String::with_capacity(body.len());
        let mut rest = body.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            match after.find('}').map(|end| (&after[..end], end)) {
                Some((key, end)) if vars.iter().any(|(k, _)| *k == key) => {
                    out.push_str(vars.iter().find(|(k, _)| *k == key).expect("present").1);
                    rest = &after[end + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// One demonstration block of a level prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoBlock<'a> {
    pub text: &'a str,
    pub current_label: String,
    pub answer: String,
}

pub fn flatten(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_candidates(candidates: &[String]) -> String {
    format!("[{}]", candidates.join(", "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub messages: Vec<ChatMessage>,
    pub context: PromptContext,
}

impl RenderedPrompt {
    /// System and user messages joined, for logs and traces.
    pub fn text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }
}

fn with_blocks(template: &PromptTemplate, instruction: &str, blocks: Vec<String>, context: PromptContext) -> RenderedPrompt {
    RenderedPrompt {
        messages: vec![
            ChatMessage::system(template.render(instruction, &[])),
            ChatMessage::user(blocks.join("\n\n")),
        ],
        context,
    }
}

/// K demonstration blocks followed by the query block.
pub fn render_level_prompt(
    template: &PromptTemplate,
    query_text: &str,
    current_label: &str,
    demos: &[DemoBlock<'_>],
    candidates: &[String],
) -> RenderedPrompt {
    let mut blocks: Vec<String> = demos
        .iter()
        .map(|d| {
            template.render(
                "level_demo",
                &[("text", &flatten(d.text)), ("current_label", &d.current_label), ("answer", &d.answer)],
            )
        })
        .collect();
    blocks.push(template.render(
        "level_query",
        &[
            ("text", &flatten(query_text)),
            ("current_label", current_label),
            ("candidates", &render_candidates(candidates)),
        ],
    ));
    let context = PromptContext {
        kind: PromptKind::Level,
        candidates: candidates.to_vec(),
        demo_answers: demos.iter().map(|d| d.answer.clone()).collect(),
    };
    with_blocks(template, "level_instruction", blocks, context)
}

/// One prompt over whole label paths.
pub fn render_flat_prompt(
    template: &PromptTemplate,
    query_text: &str,
    demos: &[(&str, String)],
    candidates: &[String],
) -> RenderedPrompt {
    let mut blocks: Vec<String> = demos
        .iter()
        .map(|(text, answer)| template.render("flat_demo", &[("text", &flatten(text)), ("answer", answer)]))
        .collect();
    blocks.push(template.render(
        "flat_query",
        &[("text", &flatten(query_text)), ("candidates", &render_candidates(candidates))],
    ));
    let context = PromptContext {
        kind: PromptKind::Flat,
        candidates: candidates.to_vec(),
        demo_answers: demos.iter().map(|(_, a)| a.clone()).collect(),
    };
    with_blocks(template, "flat_instruction", blocks, context)
}

/// Ask which demonstration text is closest to the query.
pub fn render_select_prompt(template: &PromptTemplate, query_text: &str, demo_texts: &[&str]) -> RenderedPrompt {
    let mut blocks: Vec<String> = demo_texts
        .iter()
        .enumerate()
        .map(|(i, t)| template.render("select_demo", &[("number", &(i + 1).to_string()), ("text", &flatten(t))]))
        .collect();
    blocks.push(template.render("select_query", &[("text", &flatten(query_text))]));
    let numbers: Vec<String> = (1..=demo_texts.len()).map(|i| i.to_string()).collect();
    let context = PromptContext { kind: PromptKind::Select, candidates: numbers.clone(), demo_answers: numbers };
    with_blocks(template, "select_instruction", blocks, context)
}

/// The description request; the label path is the final line.
pub fn render_describe_prompt(template: &PromptTemplate, path_text: &str) -> RenderedPrompt {
    let body = template.render("describe", &[("path", &flatten(path_text))]);
    let context = PromptContext { kind: PromptKind::Describe, candidates: Vec::new(), demo_answers: Vec::new() };
    with_blocks(template, "describe_instruction", vec![body], context)
}
