use super::llm::{LlmClient, LlmError, LlmRequest};
use super::prompt::{render_describe_prompt, PromptTemplate};
use super::InferenceError;
use crate::taxonomy::{LabelPath, Taxonomy};

/// Ask the LLM to describe `path` and store the reply on its leaf.
///
/// A leaf that already has a description is returned as is, without a call.
pub fn generate_label_description(
    taxonomy: &mut Taxonomy,
    path: &LabelPath,
    llm: &dyn LlmClient,
    temperature: f64,
) -> Result<String, InferenceError> {
    taxonomy.validate_path(path)?;
    let leaf = path.leaf();
    if let Some(d) = taxonomy.node(leaf)?.description.as_ref().filter(|d| !d.trim().is_empty()) {
        return Ok(d.clone());
    }
    let rendered = render_describe_prompt(PromptTemplate::builtin(), &taxonomy.path_text(path));
    let request = LlmRequest { messages: rendered.messages, temperature, context: rendered.context };
    let reply = llm.complete(&request)?;
    let reply = reply.trim();
    if reply.is_empty() {
        return Err(LlmError::EmptyReply.into());
    }
    taxonomy.set_description(leaf, reply.to_string())?;
    Ok(reply.to_string())
}

/// Describe every leaf; returns how many LLM calls were made.
pub fn describe_leaves(taxonomy: &mut Taxonomy, llm: &dyn LlmClient, temperature: f64) -> Result<usize, InferenceError> {
    let mut calls = 0;
    for leaf in taxonomy.leaves().to_vec() {
        let had = taxonomy.node(leaf)?.description.as_ref().is_some_and(|d| !d.trim().is_empty());
        let path = taxonomy.path_to(leaf)?;
        generate_label_description(taxonomy, &path, llm, temperature)?;
        calls += usize::from(!had);
    }
    Ok(calls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::llm::{EchoLlm, ScriptedLlm};

    const FIG3: &str = "artificial intelligence\tROOT\nspeech\tartificial intelligence\nspeech recognition\tspeech\n";

    #[test]
    fn echo_stub_yields_path_text_and_caches() {
        let mut t = Taxonomy::parse(FIG3).unwrap();
        let leaf = t.leaves()[0];
        let path = t.path_to(leaf).unwrap();
        let llm = ScriptedLlm::new(vec!["first".into()]);
        assert_eq!(generate_label_description(&mut t, &path, &llm, 0.2).unwrap(), "first");
        // a second call would exhaust the script
        assert_eq!(generate_label_description(&mut t, &path, &llm, 0.2).unwrap(), "first");

        let mut t = Taxonomy::parse(FIG3).unwrap();
        let d = generate_label_description(&mut t, &path, &EchoLlm, 0.2).unwrap();
        assert_eq!(d, "speech recognition of speech of artificial intelligence");
        assert_eq!(t.node(leaf).unwrap().description.as_deref(), Some(d.as_str()));
        assert_eq!(describe_leaves(&mut t, &EchoLlm, 0.2).unwrap(), 0);
    }

    #[test]
    fn empty_reply_is_an_error() {
        let mut t = Taxonomy::parse(FIG3).unwrap();
        let path = t.path_to(t.leaves()[0]).unwrap();
        let llm = ScriptedLlm::new(vec!["  ".into()]);
        assert_eq!(
            generate_label_description(&mut t, &path, &llm, 0.2).unwrap_err(),
            InferenceError::Llm(LlmError::EmptyReply)
        );
    }
}
