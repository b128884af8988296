//! Default prompt templates. Every template is overridable from config.
//!
//! Placeholders are `{name}` and are filled by [`fill`]. Each template starts
//! with a distinct header line so scripted mock backends can match on it.

use std::collections::BTreeMap;

pub const PROMPT_REWRITE: &str = "### TASK: PROMPT REWRITE\n\
Rewrite the user question so it is clear, specific and self-contained for searching a knowledge base. \
Keep the original intent. Reply with the rewritten question only.\n\n\
Question: {query}";

pub const RETRIEVAL_REWRITE: &str = "### TASK: RETRIEVAL REWRITE\n\
Below are knowledge fragments retrieved with the user's question. Use the terminology they contain \
to rewrite the question so it matches the knowledge base more precisely. Reply with the rewritten question only.\n\n\
Fragments:\n{context}\n\n\
Question: {query}";

pub const KEYWORD_REWRITE: &str = "### TASK: KEYWORD REWRITE\n\
Extract the search keywords from the question below for a web search engine. \
Reply with a comma-separated list of keywords and nothing else.\n\n\
Question: {query}";

pub const HYDE_REWRITE: &str = "### TASK: HYDE REWRITE\n\
Write a short paragraph that answers the question below using only your own knowledge. \
Reply with the paragraph only.\n\n\
Question: {query}";

pub const TRANSLATION_REWRITE: &str = "### TASK: TRANSLATION REWRITE\n\
Translate the question below into {target_language}. Keep product names and code identifiers unchanged. \
Reply with the translation only.\n\n\
Question: {query}";

pub const CONTEXT_REWRITE: &str = "### TASK: CONVERSATION QUERY REWRITE\n\
You are given a conversation and the user's latest question.\n\
1. If the question is ambiguous or uses pronouns that refer to earlier turns, replace them with the concrete terms from the conversation.\n\
2. If the user is rephrasing an earlier question because the previous answer was unsatisfactory, reflect on what was missing and make the question more precise.\n\
Reply with the rewritten question only.\n\n\
Conversation:\n{history}\n\n\
Latest question: {query}";

pub const CONTEXT_ANALYSIS: &str = "### TASK: CONVERSATION CONTEXT ANALYSIS\n\
You are given a numbered conversation and the user's latest question. Analyse how the earlier messages relate \
to the latest question, then list the indices of the messages that are needed to answer it.\n\
Reply with a JSON object inside a ```json fenced block with exactly two fields: \
\"analysis\" (string) and \"indices_of_related_messages\" (array of integers).\n\n\
Conversation:\n{history}\n\n\
Latest question: {query}";

pub const DIGEST: &str = "### TASK: KNOWLEDGE DIGEST\n\
Extract the information relevant to the question from the fragments below.\n\
Reply with a JSON object inside a ```json fenced block with two fields: \
\"summary\" (string) and \"supporting_chunk_ids\" (array of the fragment ids you used).\n\n\
Question: {query}\n\n\
Fragments:\n{fragments}";

pub const ANSWER_SYSTEM: &str = "### TASK: ANSWER\n\
You are a helpful assistant answering questions with the provided knowledge. \
Answer in the language of the question. Be accurate and concise, and do not invent facts that the knowledge does not support.";

pub const NO_KNOWLEDGE: &str = "No knowledge was retrieved for this question. \
Answer from the conversation only and tell the user that no supporting documents were found.";

pub const CITATION: &str = "### TASK: CITATION LOOK-BACK\n\
Below is an answer that was generated from numbered knowledge fragments. \
List the numbers of the fragments that were actually used to write the answer, as a JSON array such as [1, 3]. \
Reply with [] if none were used.\n\n\
Fragments:\n{fragments}\n\n\
Answer:\n{answer}";

/// Replaces every `{key}` with the corresponding value. Unknown placeholders
/// are left untouched.
pub fn fill(template: &str, vars: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match vars.get(key) {
                    Some(v) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
