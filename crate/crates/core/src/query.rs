//! User queries and their decomposition into subqueries.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_feature_matrix, FeatureMatrix};
use crate::error::{Error, Result};
use crate::text;

/// Decomposition prompt with a `{caption}` placeholder. Version 1.
pub const DECOMPOSE_PROMPT_TEMPLATE: &str = include_str!("../assets/decompose_prompt.txt");
pub const DECOMPOSE_PROMPT_VERSION: u32 = 1;

pub const LLM_API_KEY_ENV: &str = "XMRAG_LLM_API_KEY";

/// One atomic aspect of a query, optionally with its text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subquery {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl Subquery {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            embedding: None,
        }
    }
}

/// A user query and its ordered subqueries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub raw: String,
    subqueries: Vec<Subquery>,
}

impl Query {
    pub fn new(raw: impl Into<String>, subqueries: Vec<Subquery>) -> Result<Self> {
        if subqueries.is_empty() {
            return Err(Error::NoSubqueries);
        }
        let mut seen = HashSet::new();
        for sq in &subqueries {
            let key = text::canonical(&sq.text);
            if key.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "subquery {:?} has no tokens",
                    sq.text
                )));
            }
            if !seen.insert(key) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate subquery {:?}",
                    sq.text
                )));
            }
            if let Some(e) = &sq.embedding {
                let norm = l2_norm(e);
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::NotUnitNorm(norm));
                }
            }
        }
        Ok(Self {
            raw: raw.into(),
            subqueries,
        })
    }

    /// Build a query from plain subquery strings.
    pub fn from_texts<S: AsRef<str>>(raw: impl Into<String>, texts: &[S]) -> Result<Self> {
        Self::new(raw, texts.iter().map(|t| Subquery::new(t.as_ref())).collect())
    }

    pub fn subqueries(&self) -> &[Subquery] {
        &self.subqueries
    }

    pub fn texts(&self) -> Vec<&str> {
        self.subqueries.iter().map(|s| s.text.as_str()).collect()
    }

    /// Number of subqueries (n).
    pub fn len(&self) -> usize {
        self.subqueries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subqueries.is_empty()
    }

    pub fn has_embeddings(&self) -> bool {
        self.subqueries.iter().all(|s| s.embedding.is_some())
    }

    pub fn embedding(&self, i: usize) -> Result<&[f32]> {
        self.subqueries[i]
            .embedding
            .as_deref()
            .ok_or_else(|| Error::MissingEmbedding(self.subqueries[i].text.clone()))
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

const SENTENCE_PREFIXES: &[&str] = &[
    "draw an ",
    "draw a ",
    "a photo of ",
    "an image of ",
    "a picture of ",
];
const STYLE_SEPARATOR: &str = " in the style of ";

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack
        .to_ascii_lowercase()
        .find(needle)
        .filter(|&i| haystack.is_char_boundary(i) && haystack.is_char_boundary(i + needle.len()))
}

/// Split on '.' that ends a sentence (followed by whitespace or end of text).
fn sentences(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = raw.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '.' && chars.peek().is_none_or(|&(_, n)| n.is_whitespace()) {
            out.push(&raw[start..i]);
            start = i + 1;
        }
    }
    out.push(&raw[start..]);
    out
}

fn split_separators(clause: &str, out: &mut Vec<String>) {
    for part in clause.split([',', ';']) {
        let mut current: Vec<&str> = Vec::new();
        for word in part.split_whitespace() {
            if word.eq_ignore_ascii_case("and") {
                out.push(current.join(" "));
                current.clear();
            } else {
                current.push(word);
            }
        }
        out.push(current.join(" "));
    }
}

/// Deterministic decomposition: splits on commas, semicolons, the word "and",
/// sentence boundaries and the "<title> in the style of <artist>" /
/// "Draw a <species>. <caption>." query templates.
pub fn decompose_rule_based(raw: &str) -> Result<Vec<Subquery>> {
    if raw.trim().is_empty() {
        return Err(Error::EmptyInput("query is empty".into()));
    }
    let mut fragments = Vec::new();
    for sentence in sentences(raw) {
        let mut sentence = sentence.trim();
        for prefix in SENTENCE_PREFIXES {
            if let Some(rest) = strip_prefix_ci(sentence, prefix) {
                sentence = rest.trim_start();
                break;
            }
        }
        match find_ci(sentence, STYLE_SEPARATOR) {
            Some(pos) => {
                split_separators(&sentence[..pos], &mut fragments);
                // "in the style of Y" -> one subquery "style of Y"
                let style = &sentence[pos + " in the ".len()..];
                fragments.push(style.split_whitespace().collect::<Vec<_>>().join(" "));
            }
            None => split_separators(sentence, &mut fragments),
        }
    }

    let mut seen = HashSet::new();
    let subqueries: Vec<Subquery> = fragments
        .into_iter()
        .map(|f| f.trim().trim_end_matches(['.', '!', '?']).trim().to_string())
        .filter(|f| {
            let key = text::canonical(f);
            !key.is_empty() && seen.insert(key)
        })
        .map(Subquery::new)
        .collect();
    if subqueries.is_empty() {
        return Err(Error::NoSubqueries);
    }
    Ok(subqueries)
}

/// Text-completion service used for LLM decomposition.
pub trait LlmClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Render the decomposition prompt for a caption.
pub fn render_decompose_prompt(caption: &str) -> String {
    DECOMPOSE_PROMPT_TEMPLATE
        .trim_end()
        .replace("{caption}", caption.trim())
}

/// Extract entities from the last `Entity:` line of a completion.
pub fn parse_entities(completion: &str) -> Result<Vec<String>> {
    let line = completion
        .lines()
        .rev()
        .find_map(|l| l.trim_start().strip_prefix("Entity:"))
        .ok_or_else(|| Error::CompletionParse {
            reason: "no \"Entity:\" line".into(),
            completion: completion.to_string(),
        })?;
    let mut seen = HashSet::new();
    let entities: Vec<String> = line
        .split(',')
        .map(str::trim)
        .filter(|e| {
            let key = text::canonical(e);
            !key.is_empty() && seen.insert(key)
        })
        .map(str::to_string)
        .collect();
    if entities.is_empty() {
        return Err(Error::CompletionParse {
            reason: "empty entity list".into(),
            completion: completion.to_string(),
        });
    }
    Ok(entities)
}

/// Decompose a query with an external LLM.
pub fn decompose_llm(raw: &str, client: &dyn LlmClient) -> Result<Vec<Subquery>> {
    if raw.trim().is_empty() {
        return Err(Error::EmptyInput("query is empty".into()));
    }
    let completion = client.complete(&render_decompose_prompt(raw))?;
    Ok(parse_entities(&completion)?
        .into_iter()
        .map(Subquery::new)
        .collect())
}

/// Canned prompt -> completion responses.
#[derive(Debug, Clone, Default)]
pub struct ReplayLlmClient {
    responses: HashMap<String, String>,
}

impl ReplayLlmClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register the completion returned for the exact prompt.
    pub fn with_response(mut self, prompt: impl Into<String>, completion: impl Into<String>) -> Self {
        self.responses.insert(prompt.into(), completion.into());
        self
    }

    /// Register a completion for the decomposition prompt of `caption`.
    pub fn with_caption(self, caption: &str, completion: impl Into<String>) -> Self {
        self.with_response(render_decompose_prompt(caption), completion)
    }

    /// Load a JSON object mapping captions to completions.
    pub fn from_caption_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: HashMap<String, String> = serde_json::from_str(&text)?;
        Ok(map
            .into_iter()
            .fold(Self::new(), |c, (cap, comp)| c.with_caption(&cap, comp)))
    }
}

impl LlmClient for ReplayLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.responses
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::Transport("replay client has no response for prompt".into()))
    }
}

/// Configuration for a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            timeout_secs: 60,
        }
    }
}

/// OpenAI-style chat-completion client.
pub struct HttpLlmClient {
    config: LlmConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(config: LlmConfig, api_key: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key: api_key.into(),
            http,
        })
    }

    /// Build a client with the key taken from `XMRAG_LLM_API_KEY`.
    pub fn from_env(config: LlmConfig) -> Result<Self> {
        let key = std::env::var(LLM_API_KEY_ENV)
            .map_err(|_| Error::InvalidArgument(format!("{LLM_API_KEY_ENV} is not set")))?;
        Self::new(config, key)
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        log::debug!(
            "POST {} (authorization: Bearer <redacted>) body={}",
            self.config.endpoint,
            body
        );
        let resp = self
            .http
            .post(&self.config.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        log::debug!("response status={status} body={text}");
        if !status.is_success() {
            return Err(Error::Rejected(format!("{status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::CompletionParse {
                reason: "response has no choices[0].message.content".into(),
                completion: text,
            })
    }
}

/// Attach the rows of an XMRG embedding file to the query's subqueries.
pub fn attach_embeddings(query: &Query, embedding_file: impl AsRef<Path>) -> Result<Query> {
    attach_embedding_matrix(query, &read_feature_matrix(embedding_file)?)
}

/// Attach embedding rows (one per subquery, in order), L2-renormalized.
pub fn attach_embedding_matrix(query: &Query, m: &FeatureMatrix) -> Result<Query> {
    if m.rows() != query.len() {
        return Err(Error::EmbeddingCount {
            rows: m.rows(),
            subqueries: query.len(),
        });
    }
    let subqueries = query
        .subqueries
        .iter()
        .enumerate()
        .map(|(i, sq)| {
            let row = m.row(i);
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::ZeroEmbedding(i));
            }
            let embedding = row.iter().map(|&x| (f64::from(x) / norm) as f32).collect();
            Ok(Subquery {
                text: sq.text.clone(),
                embedding: Some(embedding),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Query {
        raw: query.raw.clone(),
        subqueries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(v: &[Subquery]) -> Vec<&str> {
        v.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn splits_commas_and_and() {
        let out = decompose_rule_based("small red bird, black wings, and small black beak").unwrap();
        assert_eq!(texts(&out), ["small red bird", "black wings", "small black beak"]);
    }

    #[test]
    fn style_template_keeps_style_clause() {
        let out = decompose_rule_based("Forest Road in the style of Theodore Rousseau").unwrap();
        assert_eq!(texts(&out), ["Forest Road", "style of Theodore Rousseau"]);
        let out = decompose_rule_based("Forest Road in the style of Theodore Rousseau.").unwrap();
        assert_eq!(texts(&out), ["Forest Road", "style of Theodore Rousseau"]);
    }

    #[test]
    fn species_template() {
        let out =
            decompose_rule_based("Draw a Yellow Warbler. This bird has a black crown and a yellow belly.")
                .unwrap();
        assert_eq!(
            texts(&out),
            ["Yellow Warbler", "This bird has a black crown", "a yellow belly"]
        );
        let out = decompose_rule_based("A photo of totem pole.").unwrap();
        assert_eq!(texts(&out), ["totem pole"]);
    }

    #[test]
    fn blank_input_rejected() {
        assert!(matches!(decompose_rule_based("   "), Err(Error::EmptyInput(_))));
        assert!(matches!(
            decompose_rule_based(", and ;"),
            Err(Error::NoSubqueries)
        ));
    }

    #[test]
    fn duplicates_dropped_in_first_occurrence_order() {
        let out = decompose_rule_based("Red bird, blue sky; red  BIRD, tree").unwrap();
        assert_eq!(texts(&out), ["Red bird", "blue sky", "tree"]);
    }

    #[test]
    fn entity_parsing() {
        assert_eq!(
            parse_entities("Entity: cars, road, traffic light").unwrap(),
            ["cars", "road", "traffic light"]
        );
        assert_eq!(
            parse_entities("sure\nEntity: a\nEntity: b, c, b").unwrap(),
            ["b", "c"]
        );
        let err = parse_entities("I cannot help").unwrap_err();
        match err {
            Error::CompletionParse { completion, .. } => assert_eq!(completion, "I cannot help"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_entities("Entity:  ").is_err());
    }

    #[test]
    fn prompt_has_placeholder_filled() {
        let p = render_decompose_prompt("a dog on a couch");
        assert!(p.ends_with("Caption:\na dog on a couch\n\nEntity:"));
        assert!(!p.contains("{caption}"));
        assert_eq!(DECOMPOSE_PROMPT_TEMPLATE.matches("{caption}").count(), 1);
    }

    #[test]
    fn replay_missing_prompt_is_transport_error() {
        let client = ReplayLlmClient::new();
        assert!(matches!(
            decompose_llm("anything", &client),
            Err(Error::Transport(_))
        ));
    }

    #[test]
    fn attach_normalizes_rows() {
        let q = Query::from_texts("q", &["a", "b", "c"]).unwrap();
        let m = FeatureMatrix::new(3, 2, vec![3.0, 4.0, 0.0, 2.0, -1.0, 1.0]).unwrap();
        let q2 = attach_embedding_matrix(&q, &m).unwrap();
        assert_eq!(q2.texts(), q.texts());
        for i in 0..3 {
            assert!((l2_norm(q2.embedding(i).unwrap()) - 1.0).abs() < 1e-5);
        }
        assert_eq!(q2.embedding(0).unwrap(), &[0.6, 0.8]);
    }

    #[test]
    fn attach_errors() {
        let q = Query::from_texts("q", &["a", "b", "c"]).unwrap();
        let two = FeatureMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert!(matches!(
            attach_embedding_matrix(&q, &two),
            Err(Error::EmbeddingCount {
                rows: 2,
                subqueries: 3
            })
        ));
        let zero = FeatureMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            attach_embedding_matrix(&q, &zero),
            Err(Error::ZeroEmbedding(1))
        ));
    }

    #[test]
    fn query_rejects_duplicates() {
        assert!(Query::from_texts("q", &["Red bird", "red bird!"]).is_err());
        assert!(Query::from_texts("q", &[] as &[&str]).is_err());
    }
}
