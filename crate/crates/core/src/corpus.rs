//! Knowledge bases, dialogues, tokenization and context flattening.
//!
//! Every lexical component (BM25, reranking, overlap metrics, the sequence
//! model vocabulary) goes through [`tokenize`], so they all agree on what a
//! token is.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased alphanumeric tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    /// Tokens joined by single spaces.
    pub fn join(&self) -> String {
        self.0.join(" ")
    }

    /// Concatenation of two sequences.
    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut tokens = self.0.clone();
        tokens.extend(other.0.iter().cloned());
        TokenSeq(tokens)
    }

    /// Wraps tokens that are already normalized. Used by decoders that emit
    /// vocabulary entries, which are themselves tokenizer output.
    pub(crate) fn from_normalized(tokens: Vec<String>) -> Self {
        TokenSeq(tokens)
    }
}

impl Deref for TokenSeq {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

/// Lowercases `text` and splits it on every maximal run of non-alphanumeric
/// characters, dropping empty segments.
pub fn tokenize(text: &str) -> TokenSeq {
    let lowered = text.to_lowercase();
    TokenSeq(
        lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

impl KnowledgeEntry {
    /// Title (when present) followed by the body text.
    pub fn indexed_text(&self) -> String {
        match &self.title {
            Some(title) => format!("{title} {}", self.text),
            None => self.text.clone(),
        }
    }
}

/// An ordered collection of knowledge entries with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    entries: Vec<KnowledgeEntry>,
    by_id: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(entries: Vec<KnowledgeEntry>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if tokenize(&entry.text).is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "knowledge entry `{}` has no tokens",
                    entry.id
                )));
            }
            if by_id.insert(entry.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(entry.id.clone()));
            }
        }
        Ok(Self { entries, by_id })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &KnowledgeEntry> {
        self.entries.iter()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.entries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn marker(self) -> &'static str {
        match self {
            Role::User => "user:",
            Role::System => "system:",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub context: Vec<Utterance>,
    #[serde(rename = "response")]
    pub target_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_knowledge_id: Option<String>,
}

impl Dialogue {
    /// Text of the final context utterance.
    pub fn last_utterance(&self) -> &str {
        self.context.last().map(|u| u.text.as_str()).unwrap_or("")
    }

    /// Context utterances joined by spaces, without role markers.
    pub fn plain_context(&self) -> String {
        self.context
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Joins the context utterances in order, each prefixed with its role marker.
pub fn flatten_context(d: &Dialogue) -> String {
    d.context
        .iter()
        .map(|u| format!("{} {}", u.role.marker(), u.text))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let records: Vec<(usize, KnowledgeEntry)> = read_jsonl(path)?;
    let mut by_id = HashMap::with_capacity(records.len());
    let mut entries = Vec::with_capacity(records.len());
    for (line, entry) in records {
        if tokenize(&entry.text).is_empty() {
            return Err(parse_error(path, line, "field `text` has no tokens"));
        }
        if by_id.insert(entry.id.clone(), entries.len()).is_some() {
            return Err(Error::DuplicateId(entry.id));
        }
        entries.push(entry);
    }
    Ok(KnowledgeBase { entries, by_id })
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let records: Vec<(usize, Dialogue)> = read_jsonl(path)?;
    let mut seen = HashMap::with_capacity(records.len());
    let mut out = Vec::with_capacity(records.len());
    for (line, d) in records {
        if d.context.is_empty() {
            return Err(parse_error(path, line, "field `context` is empty"));
        }
        if seen.insert(d.id.clone(), line).is_some() {
            return Err(Error::DuplicateId(d.id));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn save_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    write_jsonl(path, dialogues)
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads one JSON record per non-blank line, keeping 1-based line numbers.
pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        out.push((i + 1, record));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn utt(role: Role, text: &str) -> Utterance {
        Utterance {
            role,
            text: text.into(),
        }
    }

    fn dialogue(context: Vec<Utterance>) -> Dialogue {
        Dialogue {
            id: "d".into(),
            context,
            target_response: "r".into(),
            gold_query: None,
            gold_knowledge_id: None,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(&*tokenize("New Orleans, USA"), toks(&["new", "orleans", "usa"]).as_slice());
        assert_eq!(&*tokenize("it's 1971!"), toks(&["it", "s", "1971"]).as_slice());
        assert_eq!(&*tokenize("  --a__B  "), toks(&["a", "b"]).as_slice());
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten_context(&dialogue(vec![utt(Role::User, "hi")])), "user: hi");
        let two = dialogue(vec![utt(Role::User, "a"), utt(Role::System, "b")]);
        assert_eq!(flatten_context(&two), "user: a system: b");
        let three = dialogue(vec![
            utt(Role::User, "tell me"),
            utt(Role::System, "sure"),
            utt(Role::User, "what is its color"),
        ]);
        let flat = flatten_context(&three);
        let markers = flat
            .split(' ')
            .filter(|w| *w == "user:" || *w == "system:")
            .count();
        assert_eq!(markers, 3);
        assert_eq!(three.plain_context(), "tell me sure what is its color");
        assert_eq!(three.last_utterance(), "what is its color");
    }

    fn write_file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_empty_and_ordered_files() {
        let empty = write_file(&[]);
        assert!(load_knowledge_base(empty.path()).unwrap().is_empty());
        assert!(load_dialogues(empty.path()).unwrap().is_empty());

        let kb = write_file(&[
            r#"{"id":"k2","text":"beta"}"#,
            r#"{"id":"k1","text":"alpha","title":"A"}"#,
            r#"{"id":"k3","text":"gamma"}"#,
        ]);
        let kb = load_knowledge_base(kb.path()).unwrap();
        let ids: Vec<_> = kb.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["k2", "k1", "k3"]);
        assert_eq!(kb.get("k1").unwrap().indexed_text(), "A alpha");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_file(&[r#"{"id":"k1","text":"alpha"}"#, r#"{"id":"k2"}"#]);
        let err = load_knowledge_base(f.path()).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("text"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_file(&[r#"{"id":"k1","text":"a"}"#, r#"{"id":"k1","text":"b"}"#]);
        let err = load_knowledge_base(f.path()).unwrap_err();
        assert!(err.to_string().contains("k1"));

        let d = r#"{"id":"d1","context":[{"role":"user","text":"hi"}],"response":"yo"}"#;
        let f = write_file(&[d, d]);
        assert!(matches!(load_dialogues(f.path()), Err(Error::DuplicateId(id)) if id == "d1"));
    }

    #[test]
    fn empty_context_rejected() {
        let f = write_file(&[r#"{"id":"d1","context":[],"response":"yo"}"#]);
        assert!(matches!(load_dialogues(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn dialogue_schema_round_trips() {
        let line = r#"{"id":"d1","context":[{"role":"user","text":"hi"},{"role":"system","text":"hello"}],"response":"ok","gold_query":"q","gold_knowledge_id":"k1"}"#;
        let f = write_file(&[line]);
        let ds = load_dialogues(f.path()).unwrap();
        assert_eq!(ds[0].gold_knowledge_id.as_deref(), Some("k1"));
        assert_eq!(serde_json::to_string(&ds[0]).unwrap(), line);
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(text in "\\PC{0,40}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&once.join()), once.clone());
            for t in once.iter() {
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
        }

        #[test]
        fn knowledge_base_round_trips(texts in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,4}", 0..8)) {
            let entries: Vec<_> = texts.iter().enumerate().map(|(i, t)| KnowledgeEntry {
                id: format!("k{i}"),
                text: t.clone(),
                title: (i % 2 == 0).then(|| format!("title {i}")),
            }).collect();
            let kb = KnowledgeBase::new(entries).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            kb.save_jsonl(f.path()).unwrap();
            prop_assert_eq!(load_knowledge_base(f.path()).unwrap(), kb);
        }
    }
}
