use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::KnowledgeError;
use crate::config::ResultFields;
use crate::types::{KnowledgeChunk, SourceKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub snippet: String,
    pub url: String,
    /// Engine-assigned order, 1-based.
    pub rank: usize,
}

impl SearchResult {
    /// Online results carry no embedding; they are scored downstream by the reranker.
    pub fn into_chunk(self, source_name: &str, kind: SourceKind) -> KnowledgeChunk {
        let text = match (self.title.is_empty(), self.snippet.is_empty()) {
            (false, false) => format!("{}\n{}", self.title, self.snippet),
            (false, true) => self.title.clone(),
            _ => self.snippet.clone(),
        };
        KnowledgeChunk {
            chunk_id: format!("{}:{}#{}", source_name, self.url, self.rank),
            text,
            embedding: None,
            source_uri: self.url,
            source_kind: kind,
            source_name: source_name.to_string(),
        }
    }
}

fn load_json_files(dir: &Path) -> Result<Vec<(String, serde_json::Value)>, KnowledgeError> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|_| KnowledgeError::UnreadablePath(dir.display().to_string()))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        let text = std::fs::read_to_string(&p).map_err(|_| KnowledgeError::UnreadablePath(p.display().to_string()))?;
        let v = serde_json::from_str(&text)
            .map_err(|e| KnowledgeError::InvalidSource(format!("{}: {e}", p.display())))?;
        out.push((p.display().to_string(), v));
    }
    Ok(out)
}

/// Lowercased, trimmed, sorted keywords; the fixture lookup key.
pub fn normalize_keywords(keywords: &[String]) -> Vec<String> {
    let mut k: Vec<String> =
        keywords.iter().map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect();
    k.sort();
    k.dedup();
    k
}

fn fixture_key(keywords: &[String], site: Option<&str>) -> String {
    let mut key = normalize_keywords(keywords).join("\u{1f}");
    if let Some(site) = site {
        key.push_str("\u{1e}site:");
        key.push_str(&site.to_lowercase());
    }
    key
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureResult {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
    pub url: String,
}

/// One recorded search-engine response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchFixture {
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
    pub results: Vec<FixtureResult>,
}

enum SearchMode {
    Fixture(HashMap<String, Vec<FixtureResult>>),
    Live { client: reqwest::Client, endpoint: String, api_key: Option<String> },
}

pub const ENV_SEARCH_API_KEY: &str = "POLYRAG_SEARCH_API_KEY";

/// Web search client, either replaying recorded fixtures or calling a
/// Bing-style endpoint that returns `webPages.value[]`.
pub struct SearchEngineClient {
    mode: SearchMode,
}

impl SearchEngineClient {
    pub fn from_fixtures(fixtures: Vec<SearchFixture>) -> Self {
        let map = fixtures.into_iter().map(|f| (fixture_key(&f.keywords, f.site.as_deref()), f.results)).collect();
        SearchEngineClient { mode: SearchMode::Fixture(map) }
    }

    /// Loads every `*.json` fixture in `dir`.
    pub fn from_fixture_dir(dir: &Path) -> Result<Self, KnowledgeError> {
        let mut fixtures = Vec::new();
        for (name, v) in load_json_files(dir)? {
            let f: SearchFixture =
                serde_json::from_value(v).map_err(|e| KnowledgeError::InvalidSource(format!("{name}: {e}")))?;
            fixtures.push(f);
        }
        Ok(Self::from_fixtures(fixtures))
    }

    pub fn live(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        SearchEngineClient { mode: SearchMode::Live { client: reqwest::Client::new(), endpoint: endpoint.into(), api_key } }
    }

    pub async fn query(
        &self,
        keywords: &[String],
        site: Option<&str>,
        n: usize,
    ) -> Result<Vec<SearchResult>, KnowledgeError> {
        let raw: Vec<FixtureResult> = match &self.mode {
            SearchMode::Fixture(map) => {
                let key = fixture_key(keywords, site);
                map.get(&key)
                    .cloned()
                    .ok_or_else(|| KnowledgeError::FixtureMiss(normalize_keywords(keywords).join(", ")))?
            }
            SearchMode::Live { client, endpoint, api_key } => {
                let mut q = keywords.join(" ");
                if let Some(site) = site {
                    q.push_str(&format!(" site:{site}"));
                }
                let url = reqwest::Url::parse_with_params(endpoint, &[("q", q.as_str()), ("count", &n.to_string())])
                    .map_err(|e| KnowledgeError::NetworkError(e.to_string()))?;
                let mut req = client.get(url);
                if let Some(key) = api_key {
                    req = req.header("Ocp-Apim-Subscription-Key", key);
                }
                let resp = req.send().await.map_err(|e| KnowledgeError::NetworkError(e.to_string()))?;
                if !resp.status().is_success() {
                    return Err(KnowledgeError::NetworkError(format!("HTTP {}", resp.status())));
                }
                let v: serde_json::Value = resp.json().await.map_err(|e| KnowledgeError::NetworkError(e.to_string()))?;
                v["webPages"]["value"]
                    .as_array()
                    .map(|items| {
                        items
                            .iter()
                            .map(|it| FixtureResult {
                                title: it["name"].as_str().unwrap_or_default().to_string(),
                                snippet: it["snippet"].as_str().unwrap_or_default().to_string(),
                                url: it["url"].as_str().unwrap_or_default().to_string(),
                            })
                            .collect()
                    })
                    .unwrap_or_default()
            }
        };
        Ok(raw
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, r)| SearchResult { title: r.title, snippet: r.snippet, url: r.url, rank: i + 1 })
            .collect())
    }
}

fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Substitutes `{name}` placeholders with percent-encoded parameter values.
pub fn fill_template(template: &str, params: &BTreeMap<String, String>) -> Result<String, KnowledgeError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| KnowledgeError::UnboundPlaceholder(after.to_string()))?;
        let key = &after[..close];
        let value = params.get(key).ok_or_else(|| KnowledgeError::UnboundPlaceholder(key.to_string()))?;
        out.push_str(&percent_encode(value));
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Walks a dot path such as `data.items[]` or `results[0].hits[]`. A `[]`
/// suffix fans out over an array, `[i]` selects one element.
pub fn walk_response_path<'a>(
    root: &'a serde_json::Value,
    path: &str,
) -> Result<Vec<&'a serde_json::Value>, KnowledgeError> {
    let miss = |why: String| KnowledgeError::ParsePathMiss(format!("{path}: {why}"));
    let mut current = vec![root];
    for segment in path.split('.').filter(|s| !s.is_empty()) {
        let (name, brackets) = match segment.find('[') {
            Some(i) => (&segment[..i], &segment[i..]),
            None => (segment, ""),
        };
        let mut next = Vec::new();
        for v in current {
            let v = if name.is_empty() { v } else { v.get(name).ok_or_else(|| miss(format!("no field {name}")))? };
            next.push(v);
        }
        current = next;
        let mut rest = brackets;
        while let Some(stripped) = rest.strip_prefix('[') {
            let close = stripped.find(']').ok_or_else(|| miss("unclosed bracket".into()))?;
            let inner = &stripped[..close];
            let mut next = Vec::new();
            for v in current {
                let arr = v.as_array().ok_or_else(|| miss(format!("{name} is not an array")))?;
                if inner.is_empty() {
                    next.extend(arr.iter());
                } else {
                    let i: usize = inner.parse().map_err(|_| miss(format!("bad index {inner}")))?;
                    next.push(arr.get(i).ok_or_else(|| miss(format!("index {i} out of range")))?);
                }
            }
            current = next;
            rest = &stripped[close + 1..];
        }
    }
    Ok(current)
}

/// A recorded HTTP-API exchange: the filled request path and its response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpFixture {
    pub request: String,
    pub response: serde_json::Value,
}

enum HttpTransport {
    Fixture(HashMap<String, serde_json::Value>),
    Live { client: reqwest::Client, base_url: String },
}

/// In-site search API with configurable request templating and response parsing.
pub struct HttpApiClient {
    transport: HttpTransport,
    endpoint_template: String,
    response_path: String,
    fields: ResultFields,
}

impl HttpApiClient {
    pub fn from_fixtures(
        fixtures: Vec<HttpFixture>,
        endpoint_template: impl Into<String>,
        response_path: impl Into<String>,
        fields: ResultFields,
    ) -> Self {
        HttpApiClient {
            transport: HttpTransport::Fixture(fixtures.into_iter().map(|f| (f.request, f.response)).collect()),
            endpoint_template: endpoint_template.into(),
            response_path: response_path.into(),
            fields,
        }
    }

    pub fn from_fixture_dir(
        dir: &Path,
        endpoint_template: impl Into<String>,
        response_path: impl Into<String>,
        fields: ResultFields,
    ) -> Result<Self, KnowledgeError> {
        let mut fixtures = Vec::new();
        for (name, v) in load_json_files(dir)? {
            let f: HttpFixture =
                serde_json::from_value(v).map_err(|e| KnowledgeError::InvalidSource(format!("{name}: {e}")))?;
            fixtures.push(f);
        }
        Ok(Self::from_fixtures(fixtures, endpoint_template, response_path, fields))
    }

    pub fn live(
        base_url: impl Into<String>,
        endpoint_template: impl Into<String>,
        response_path: impl Into<String>,
        fields: ResultFields,
    ) -> Self {
        HttpApiClient {
            transport: HttpTransport::Live { client: reqwest::Client::new(), base_url: base_url.into() },
            endpoint_template: endpoint_template.into(),
            response_path: response_path.into(),
            fields,
        }
    }

    pub fn request_path(&self, params: &BTreeMap<String, String>) -> Result<String, KnowledgeError> {
        fill_template(&self.endpoint_template, params)
    }

    pub async fn query(&self, params: &BTreeMap<String, String>, n: usize) -> Result<Vec<SearchResult>, KnowledgeError> {
        let path = self.request_path(params)?;
        let body = match &self.transport {
            HttpTransport::Fixture(map) => map.get(&path).cloned().ok_or_else(|| KnowledgeError::FixtureMiss(path.clone()))?,
            HttpTransport::Live { client, base_url } => {
                let url = format!("{}{}", base_url.trim_end_matches('/'), path);
                let resp = client.get(url).send().await.map_err(|e| KnowledgeError::NetworkError(e.to_string()))?;
                if !resp.status().is_success() {
                    return Err(KnowledgeError::NetworkError(format!("HTTP {}", resp.status())));
                }
                resp.json().await.map_err(|e| KnowledgeError::NetworkError(e.to_string()))?
            }
        };
        self.parse(&body, n)
    }

    pub fn parse(&self, body: &serde_json::Value, n: usize) -> Result<Vec<SearchResult>, KnowledgeError> {
        let items = walk_response_path(body, &self.response_path)?;
        let text = |v: &serde_json::Value, field: &str| match v.get(field) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) if !other.is_null() => other.to_string(),
            _ => String::new(),
        };
        Ok(items
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, v)| SearchResult {
                title: text(v, &self.fields.title),
                snippet: text(v, &self.fields.snippet),
                url: text(v, &self.fields.url),
                rank: i + 1,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn kw(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn fixture() -> SearchEngineClient {
        SearchEngineClient::from_fixtures(vec![SearchFixture {
            keywords: kw(&["agentscope", "werewolf"]),
            site: None,
            results: (1..=3)
                .map(|i| FixtureResult { title: format!("t{i}"), snippet: format!("s{i}"), url: format!("https://x/{i}") })
                .collect(),
        }])
    }

    #[tokio::test]
    async fn fixture_replay_assigns_ranks() {
        let results = fixture().query(&kw(&["agentscope", "werewolf"]), None, 10).await.unwrap();
        assert_eq!(results.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(results[0].url, "https://x/1");
    }

    #[tokio::test]
    async fn keyword_normalization_hits_same_fixture() {
        let a = fixture().query(&kw(&["Werewolf", "AgentScope"]), None, 10).await.unwrap();
        let b = fixture().query(&kw(&["agentscope", "werewolf"]), None, 10).await.unwrap();
        assert_eq!(a, b);
    }

    #[tokio::test]
    async fn unrecorded_keywords_miss() {
        let err = fixture().query(&kw(&["olympics"]), None, 10).await.unwrap_err();
        assert!(matches!(err, KnowledgeError::FixtureMiss(_)));
        // the site constraint is part of the key
        assert!(fixture().query(&kw(&["agentscope", "werewolf"]), Some("github.com"), 3).await.is_err());
    }

    #[test]
    fn template_substitution() {
        let mut params = BTreeMap::new();
        params.insert("q".to_string(), "ski".to_string());
        assert_eq!(fill_template("/search?q={q}", &params).unwrap(), "/search?q=ski");
        params.insert("q".to_string(), "100m final".to_string());
        assert_eq!(fill_template("/search?q={q}", &params).unwrap(), "/search?q=100m%20final");
        let err = fill_template("/search?q={q}&lang={lang}", &params).unwrap_err();
        assert_eq!(err, KnowledgeError::UnboundPlaceholder("lang".into()));
        assert!(matches!(fill_template("/x", &BTreeMap::new()), Ok(p) if p == "/x"));
    }

    #[tokio::test]
    async fn http_fixture_walks_response_path() {
        let body = json!({"data": {"items": [
            {"title": "Ski jumping", "snippet": "Results", "url": "https://o/1"},
            {"title": "Alpine", "snippet": "Schedule", "url": "https://o/2"}
        ]}});
        let client = HttpApiClient::from_fixtures(
            vec![HttpFixture { request: "/search?q=ski".into(), response: body }],
            "/search?q={q}",
            "data.items[]",
            ResultFields::default(),
        );
        let mut params = BTreeMap::new();
        params.insert("q".to_string(), "ski".to_string());
        let results = client.query(&params, 10).await.unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(results[1].title, "Alpine");
        assert_eq!(results[1].rank, 2);
    }

    #[test]
    fn path_walk_errors_and_indexing() {
        let body = json!({"a": [{"b": [1, 2]}, {"b": [3]}]});
        let v = walk_response_path(&body, "a[].b[]").unwrap();
        assert_eq!(v, vec![&json!(1), &json!(2), &json!(3)]);
        assert_eq!(walk_response_path(&body, "a[1].b[0]").unwrap(), vec![&json!(3)]);
        assert!(matches!(walk_response_path(&body, "data.items[]"), Err(KnowledgeError::ParsePathMiss(_))));
        assert!(matches!(walk_response_path(&body, "a[5]"), Err(KnowledgeError::ParsePathMiss(_))));
    }

    #[test]
    fn search_result_to_chunk() {
        let r = SearchResult { title: "T".into(), snippet: "S".into(), url: "https://u".into(), rank: 2 };
        let c = r.into_chunk("web", SourceKind::SearchEngine);
        assert_eq!(c.text, "T\nS");
        assert!(c.embedding.is_none());
        assert_eq!(c.source_uri, "https://u");
    }
}
