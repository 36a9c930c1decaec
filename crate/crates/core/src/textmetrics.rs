//! Discourse cleaning, lexicon sentiment scoring, coarse labels and topic votes.
//!
//! Scoring is deliberately transparent: a token matches a lexicon entry
//! case-insensitively, a negator directly before the word (an intensifier in
//! between is allowed) flips the sign and scales by `negation_factor`, and an
//! intensifier multiplies the next sentiment word. Polarity is the clamped mean
//! of matched weights, subjectivity the mean of matched subjectivity weights.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::binning::{base36_decode, extract_thread_id};
use crate::error::{Error, Result};
use crate::ingest::RawDiscourseRecord;

/// Label threshold: strictly above is positive, strictly below the negative is negative.
pub const LABEL_THRESHOLD: f64 = 0.1;
pub const DEFAULT_NEGATION_FACTOR: f64 = 0.5;
pub const DEFAULT_MIN_LEN: usize = 3;
pub const OTHER_TOPIC: &str = "other";

const DEFAULT_LEXICON: &str = include_str!("../data/default_lexicon.csv");
const DEFAULT_TOPICS: &str = include_str!("../data/default_topics.csv");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexEntry {
    pub polarity: f64,
    pub subjectivity: f64,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    pub entries: HashMap<String, LexEntry>,
    pub negators: HashSet<String>,
    pub intensifiers: HashMap<String, f64>,
    pub negation_factor: f64,
}

impl Lexicon {
    /// The lexicon shipped with the crate (`data/default_lexicon.csv`).
    pub fn shipped() -> Self {
        Self::from_csv_reader(DEFAULT_LEXICON.as_bytes(), "default_lexicon.csv")
            .expect("shipped lexicon is valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f, &path.display().to_string())
    }

    /// Reads `word,polarity,subjectivity,flags` where flags is empty,
    /// `negator`, or `intensifier=<multiplier>`.
    pub fn from_csv_reader<R: Read>(reader: R, name: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.len() < 3 || header[0] != "word" || header[1] != "polarity" || header[2] != "subjectivity" {
            return Err(Error::schema(name, "expected header word,polarity,subjectivity,flags"));
        }
        let mut lex = Lexicon {
            entries: HashMap::new(),
            negators: HashSet::new(),
            intensifiers: HashMap::new(),
            negation_factor: DEFAULT_NEGATION_FACTOR,
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |msg: String| Error::schema(name, format!("row {}: {msg}", i + 1));
            let word = rec.get(0).unwrap_or("").trim().to_lowercase();
            if word.is_empty() {
                return Err(bad("empty word".into()));
            }
            let flags = rec.get(3).unwrap_or("").trim();
            if flags == "negator" {
                lex.negators.insert(word);
                continue;
            }
            if let Some(m) = flags.strip_prefix("intensifier=") {
                let m: f64 = m.parse().map_err(|_| bad(format!("bad multiplier `{m}`")))?;
                lex.intensifiers.insert(word, m);
                continue;
            }
            if !flags.is_empty() {
                return Err(bad(format!("unknown flag `{flags}`")));
            }
            let num = |k: usize| -> Result<f64> {
                let s = rec.get(k).unwrap_or("").trim();
                s.parse().map_err(|_| bad(format!("bad number `{s}`")))
            };
            let polarity = num(1)?;
            let subjectivity = num(2)?;
            if !(-1.0..=1.0).contains(&polarity) || !(0.0..=1.0).contains(&subjectivity) {
                return Err(bad(format!("weights ({polarity}, {subjectivity}) out of range")));
            }
            lex.entries.insert(word, LexEntry { polarity, subjectivity });
        }
        Ok(lex)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topic {
    pub name: String,
    /// Each keyword is a token sequence (multi-word keywords allowed).
    pub keywords: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicRuleSet {
    pub topics: Vec<Topic>,
}

impl TopicRuleSet {
    pub fn shipped() -> Self {
        Self::from_csv_reader(DEFAULT_TOPICS.as_bytes(), "default_topics.csv")
            .expect("shipped topics are valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f, &path.display().to_string())
    }

    /// Reads `topic,keyword` rows; topics keep their first-appearance order.
    pub fn from_csv_reader<R: Read>(reader: R, name: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header != ["topic", "keyword"] {
            return Err(Error::schema(name, "expected header topic,keyword"));
        }
        let mut topics: Vec<Topic> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let topic = rec[0].trim().to_lowercase();
            let kw = tokenize(&rec[1]);
            if topic.is_empty() || kw.is_empty() {
                return Err(Error::schema(name, "empty topic or keyword"));
            }
            match topics.iter_mut().find(|t| t.name == topic) {
                Some(t) => t.keywords.push(kw),
                None => topics.push(Topic { name: topic, keywords: vec![kw] }),
            }
        }
        if topics.is_empty() {
            return Err(Error::schema(name, "no topics"));
        }
        Ok(TopicRuleSet { topics })
    }
}

#[derive(Debug, Clone)]
pub struct CleaningConfig {
    pub header_patterns: Vec<Regex>,
    pub min_len: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        let patterns = [
            r"(?i)posted by u/[A-Za-z0-9_-]+(?:\s+\d+\s+\w+\s+ago)?",
            r"(?i)skip to main content",
            r"(?i)go to reddit home",
            r"(?i)open (?:menu|navigation)",
            r"(?i)\b(?:log in|sign up|get app)\b",
            r"(?i)sort by:?\s*(?:best|top|new|controversial|old|q&a)\b",
            r"(?i)\blevel \d+\b",
            r"(?i)\[(?:deleted|removed)\]",
            r"(?i)continue this thread",
            r"(?i)\b\d+ more repl(?:y|ies)\b",
        ];
        CleaningConfig {
            header_patterns: patterns.iter().map(|p| Regex::new(p).expect("valid pattern")).collect(),
            min_len: DEFAULT_MIN_LEN,
        }
    }
}

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S+").expect("valid url regex"))
}

fn whitespace_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s+").expect("valid regex"))
}

/// Strips URLs and header noise, collapses whitespace; repeated to a fixpoint so
/// that `clean_str(clean_str(x)) == clean_str(x)`.
pub fn clean_str(text: &str, cfg: &CleaningConfig) -> String {
    let mut cur = text.to_string();
    for _ in 0..16 {
        let mut s = url_regex().replace_all(&cur, " ").into_owned();
        for p in &cfg.header_patterns {
            s = p.replace_all(&s, " ").into_owned();
        }
        let s = whitespace_regex().replace_all(&s, " ").trim().to_string();
        if s == cur {
            break;
        }
        cur = s;
    }
    cur
}

/// Title and body joined by a single space, then cleaned.
pub fn clean_text(raw: &RawDiscourseRecord, cfg: &CleaningConfig) -> String {
    clean_str(&format!("{} {}", raw.title, raw.body), cfg)
}

/// Lowercased tokens: maximal runs of alphanumerics and apostrophes.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace('\u{2019}', "'")
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sentiment {
    pub polarity: f64,
    pub subjectivity: f64,
}

pub fn score_sentiment(text: &str, lex: &Lexicon) -> Sentiment {
    score_tokens(&tokenize(text), lex)
}

pub fn score_tokens(tokens: &[String], lex: &Lexicon) -> Sentiment {
    let mut pol_sum = 0.0;
    let mut subj_sum = 0.0;
    let mut hits = 0usize;
    for (i, tok) in tokens.iter().enumerate() {
        let Some(entry) = lex.entries.get(tok) else { continue };
        let mut weight = entry.polarity;
        let mut j = i;
        if j > 0 {
            if let Some(m) = lex.intensifiers.get(&tokens[j - 1]) {
                weight *= m;
                j -= 1;
            }
        }
        if j > 0 && lex.negators.contains(&tokens[j - 1]) {
            weight *= -lex.negation_factor;
        }
        pol_sum += weight;
        subj_sum += entry.subjectivity;
        hits += 1;
    }
    if hits == 0 {
        return Sentiment { polarity: 0.0, subjectivity: 0.0 };
    }
    let n = hits as f64;
    Sentiment {
        polarity: (pol_sum / n).clamp(-1.0, 1.0),
        subjectivity: (subj_sum / n).clamp(0.0, 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Neutral,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Neutral => "neutral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "positive" => Some(Label::Positive),
            "negative" => Some(Label::Negative),
            "neutral" => Some(Label::Neutral),
            _ => None,
        }
    }
}

pub fn label_sentiment(polarity: f64) -> Result<Label> {
    if !(-1.0..=1.0).contains(&polarity) {
        return Err(Error::Contract(format!("polarity {polarity} outside [-1, 1]")));
    }
    Ok(if polarity > LABEL_THRESHOLD {
        Label::Positive
    } else if polarity < -LABEL_THRESHOLD {
        Label::Negative
    } else {
        Label::Neutral
    })
}

fn count_occurrences(tokens: &[String], keyword: &[String]) -> usize {
    if keyword.is_empty() || keyword.len() > tokens.len() {
        return 0;
    }
    tokens.windows(keyword.len()).filter(|w| *w == keyword).count()
}

/// Keyword-vote topic: the unique argmax of hit counts, `"other"` on ties or no hits.
pub fn assign_topic(text: &str, rules: &TopicRuleSet) -> String {
    assign_topic_tokens(&tokenize(text), rules)
}

pub fn assign_topic_tokens(tokens: &[String], rules: &TopicRuleSet) -> String {
    let counts: Vec<usize> = rules
        .topics
        .iter()
        .map(|t| t.keywords.iter().map(|k| count_occurrences(tokens, k)).sum())
        .collect();
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 || counts.iter().filter(|&&c| c == max).count() > 1 {
        return OTHER_TOPIC.to_string();
    }
    let i = counts.iter().position(|&c| c == max).expect("max exists");
    rules.topics[i].name.clone()
}

/// One cleaned, scored discourse item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscourseItem {
    pub collection_code: String,
    /// Base-36 value of the thread id (pseudo-time).
    pub item_key: u64,
    pub thread_id: String,
    pub text: String,
    pub polarity: f64,
    pub subjectivity: f64,
    pub label: Label,
    pub topic: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    /// Sorted by `(collection_code, item_key)`, input order within ties.
    pub items: Vec<DiscourseItem>,
    pub dropped_short: usize,
    pub dropped_duplicate: usize,
    pub dropped_bad_thread_id: usize,
}

/// Cleans, deduplicates (exact `(collection, url, text)` match), scores and labels
/// a batch of raw records.
pub fn build_corpus(
    records: &[RawDiscourseRecord],
    lex: &Lexicon,
    rules: &TopicRuleSet,
    cfg: &CleaningConfig,
) -> Corpus {
    enum Outcome {
        Short,
        BadId,
        Item(DiscourseItem),
    }
    let outcomes: Vec<Outcome> = records
        .par_iter()
        .map(|r| {
            let text = clean_text(r, cfg);
            if text.chars().count() < cfg.min_len {
                return Outcome::Short;
            }
            let Some(thread) = extract_thread_id(&r.url) else { return Outcome::BadId };
            let Ok(item_key) = base36_decode(thread) else { return Outcome::BadId };
            let tokens = tokenize(&text);
            let s = score_tokens(&tokens, lex);
            let label = label_sentiment(s.polarity).expect("scorer clamps polarity");
            Outcome::Item(DiscourseItem {
                collection_code: r.collection_code.clone(),
                item_key,
                thread_id: thread.to_lowercase(),
                topic: assign_topic_tokens(&tokens, rules),
                text,
                polarity: s.polarity,
                subjectivity: s.subjectivity,
                label,
            })
        })
        .collect();

    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for (rec, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Outcome::Short => corpus.dropped_short += 1,
            Outcome::BadId => corpus.dropped_bad_thread_id += 1,
            Outcome::Item(item) => {
                if seen.insert((item.collection_code.clone(), rec.url.clone(), item.text.clone())) {
                    corpus.items.push(item);
                } else {
                    corpus.dropped_duplicate += 1;
                }
            }
        }
    }
    corpus
        .items
        .sort_by(|a, b| (&a.collection_code, a.item_key).cmp(&(&b.collection_code, b.item_key)));
    corpus
}
