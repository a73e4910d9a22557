//! Linguistic annotation and text embedding.
//!
//! The defaults are small, deterministic and offline. External services can
//! replace either one through the [`Annotator`] and [`Embedder`] traits.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textdiff::{tokenize, TokenSeq};

pub const EMBEDDING_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum LingoError {
    #[error("annotator backend failed: {0}")]
    Annotator(String),
    #[error("embedder backend failed: {0}")]
    Embedder(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pos {
    NOUN,
    VERB,
    ADJ,
    ADV,
    PRON,
    DET,
    ADP,
    NUM,
    PART,
    PROPN,
    PUNCT,
    SYM,
    X,
}

impl Pos {
    pub const ALL: [Pos; 13] = [
        Pos::NOUN,
        Pos::VERB,
        Pos::ADJ,
        Pos::ADV,
        Pos::PRON,
        Pos::DET,
        Pos::ADP,
        Pos::NUM,
        Pos::PART,
        Pos::PROPN,
        Pos::PUNCT,
        Pos::SYM,
        Pos::X,
    ];
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Pos {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pos::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| format!("unknown POS tag {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedText {
    pub tokens: TokenSeq,
    pub lemmas: Vec<String>,
    pub pos: Vec<Pos>,
}

impl AnnotatedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub trait Annotator: Send + Sync {
    fn annotate(&self, text: &str) -> Result<AnnotatedText, LingoError>;
}

/// Lowercase + suffix-stripping lemmas, lexicon POS tags with suffix rules.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultAnnotator;

impl Annotator for DefaultAnnotator {
    fn annotate(&self, text: &str) -> Result<AnnotatedText, LingoError> {
        Ok(annotate(text))
    }
}

pub fn annotate(text: &str) -> AnnotatedText {
    let tokens = tokenize(text);
    let mut lemmas = Vec::with_capacity(tokens.len());
    let mut pos = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.tokens().iter().enumerate() {
        let tag = tag_word(&tok.text, i == 0);
        let lemma = match tag {
            Pos::NOUN | Pos::VERB | Pos::X => lemmatize(&tok.text),
            _ => tok.text.to_lowercase(),
        };
        lemmas.push(lemma);
        pos.push(tag);
    }
    AnnotatedText {
        tokens,
        lemmas,
        pos,
    }
}

const PRONOUNS: &[&str] = &[
    "i", "me", "my", "mine", "you", "your", "yours", "he", "him", "his", "she", "her", "hers",
    "it", "its", "we", "us", "our", "ours", "they", "them", "their", "theirs", "this", "that",
    "these", "those", "who", "whom", "what", "which", "myself", "yourself", "everyone",
    "someone", "anyone", "nobody", "everybody", "something", "nothing", "everything",
];
const DETERMINERS: &[&str] = &[
    "a", "an", "the", "every", "each", "some", "any", "no", "all", "both", "another",
];
const ADPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "by", "for", "with", "about", "from", "into", "onto", "over",
    "under", "after", "before", "since", "until", "during", "between", "through", "across",
    "near", "around", "against", "without", "within", "per", "via", "like", "than", "as",
];
const PARTICLES: &[&str] = &["not", "to", "n't", "'s", "up", "off", "out"];
const ADVERBS: &[&str] = &[
    "now", "then", "soon", "later", "ago", "already", "still", "just", "very", "too", "also",
    "again", "never", "always", "often", "here", "there", "when", "where", "why", "how", "so",
    "well", "almost", "once", "twice", "ever", "yet", "tonight",
];
const VERBS: &[&str] = &[
    "is", "am", "are", "was", "were", "be", "been", "being", "have", "has", "had", "do",
    "does", "did", "will", "would", "can", "could", "shall", "should", "may", "might", "must",
    "go", "going", "went", "gone", "get", "got", "make", "made", "take", "took", "see", "saw",
    "seen", "come", "came", "say", "said", "know", "knew", "think", "thought", "love", "loved",
    "like", "want", "need", "meet", "met", "born", "moved", "killed", "signed", "opened",
    "closed", "celebrate", "happened", "starts", "ends", "begins", "was", "let",
];
const ADJECTIVES: &[&str] = &[
    "good", "bad", "great", "new", "old", "big", "small", "last", "next", "first", "early",
    "late", "happy", "merry", "best", "nice", "long", "short", "same", "other", "many", "few",
    "more", "most", "much",
];
const NOUNS: &[&str] = &[
    "today", "yesterday", "tomorrow", "day", "days", "week", "weeks", "month", "months",
    "year", "years", "morning", "evening", "night", "afternoon", "time", "date", "photo",
    "class", "meeting", "party", "dinner", "lunch", "breakfast", "weekend", "holiday",
    "people", "man", "woman", "friend", "friends", "family", "home", "work", "school", "city",
    "room", "bathroom", "question", "answer", "pizza", "coffee", "music", "game", "report",
];
const PROPER: &[&str] = &[
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep",
    "sept", "oct", "nov", "dec", "monday", "tuesday", "wednesday", "thursday", "friday",
    "saturday", "sunday", "christmas", "thanksgiving", "easter", "halloween", "hanukkah",
];

fn tag_word(word: &str, sentence_initial: bool) -> Pos {
    if word.chars().all(|c| !c.is_alphanumeric()) {
        return if word.chars().all(|c| c.is_ascii_punctuation() && !is_symbol(c)) {
            Pos::PUNCT
        } else {
            Pos::SYM
        };
    }
    if is_numeric_like(word) {
        return Pos::NUM;
    }
    let lower = word.to_lowercase();
    let w = lower.as_str();
    let lists: [(&[&str], Pos); 9] = [
        (PROPER, Pos::PROPN),
        (PRONOUNS, Pos::PRON),
        (DETERMINERS, Pos::DET),
        (PARTICLES, Pos::PART),
        (ADPOSITIONS, Pos::ADP),
        (ADVERBS, Pos::ADV),
        (VERBS, Pos::VERB),
        (ADJECTIVES, Pos::ADJ),
        (NOUNS, Pos::NOUN),
    ];
    if let Some((_, tag)) = lists.iter().find(|(words, _)| words.contains(&w)) {
        return *tag;
    }
    if !sentence_initial && word.chars().next().is_some_and(char::is_uppercase) {
        return Pos::PROPN;
    }
    suffix_tag(w).unwrap_or(Pos::X)
}

fn is_symbol(c: char) -> bool {
    matches!(c, '$' | '%' | '#' | '@' | '&' | '*' | '+' | '=' | '<' | '>' | '^' | '~' | '|')
}

/// Digits with optional inner separators: `1999`, `03/14/2019`, `1,000`, `2014-03-30`.
fn is_numeric_like(word: &str) -> bool {
    word.chars().next().is_some_and(|c| c.is_ascii_digit())
        && word.chars().last().is_some_and(|c| c.is_ascii_digit())
        && word
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '/' | '-' | '.' | ',' | ':'))
}

fn suffix_tag(w: &str) -> Option<Pos> {
    const RULES: &[(&str, Pos)] = &[
        ("ly", Pos::ADV),
        ("ing", Pos::VERB),
        ("ed", Pos::VERB),
        ("tion", Pos::NOUN),
        ("sion", Pos::NOUN),
        ("ment", Pos::NOUN),
        ("ness", Pos::NOUN),
        ("ity", Pos::NOUN),
        ("er", Pos::NOUN),
        ("ous", Pos::ADJ),
        ("ful", Pos::ADJ),
        ("able", Pos::ADJ),
        ("ible", Pos::ADJ),
        ("ive", Pos::ADJ),
        ("al", Pos::ADJ),
        ("ic", Pos::ADJ),
    ];
    RULES
        .iter()
        .find(|(suffix, _)| w.len() > suffix.len() + 2 && w.ends_with(suffix))
        .map(|&(_, tag)| tag)
}

fn lemmatize(word: &str) -> String {
    let w = word.to_lowercase();
    const IE_PLURALS: &[&str] = &["movies", "cookies", "selfies", "ties", "lies", "pies", "dies"];
    if IE_PLURALS.contains(&w.as_str()) {
        return w[..w.len() - 1].to_string();
    }
    const TABLE: &[(&str, &str)] = &[
        ("ies", "y"),
        ("ied", "y"),
        ("sses", "ss"),
        ("ches", "ch"),
        ("shes", "sh"),
        ("ing", ""),
        ("ed", ""),
        ("s", ""),
    ];
    for &(suffix, repl) in TABLE {
        if w.len() > suffix.len() + 2 && w.ends_with(suffix) && !w.ends_with("ss") {
            return format!("{}{}", &w[..w.len() - suffix.len()], repl);
        }
    }
    w
}

/// Unit-norm vector, or all zeros for empty text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn normalized(mut v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding(v)
    }
}

pub trait Embedder: Send + Sync {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, LingoError>;

    fn embed(&self, text: &str) -> Result<Embedding, LingoError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| LingoError::Embedder("empty response".into()))
    }
}

/// Hashed character 3/4/5-gram term frequencies, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedNgramEmbedder;

impl Embedder for HashedNgramEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, LingoError> {
        Ok(texts.iter().map(|t| embed(t)).collect())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(chars: &[char]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut buf = [0u8; 4];
    for c in chars {
        for b in c.encode_utf8(&mut buf).bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

pub fn embed(text: &str) -> Embedding {
    let mut v = vec![0.0; EMBEDDING_DIM];
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Embedding(v);
    }
    let padded: Vec<char> = std::iter::once(' ')
        .chain(trimmed.to_lowercase().chars())
        .chain(std::iter::once(' '))
        .collect();
    for n in 3..=5 {
        for gram in padded.windows(n) {
            v[(fnv1a(gram) % EMBEDDING_DIM as u64) as usize] += 1.0;
        }
    }
    Embedding::normalized(v)
}

/// `1 - a·b`; a zero vector on either side gives the neutral distance 1.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64, LingoError> {
    if a.dim() != b.dim() {
        return Err(LingoError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.is_zero() || b.is_zero() {
        return Ok(1.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// Annotator + embedder pair handed to the slicing pipeline.
#[derive(Clone)]
pub struct Lingo {
    pub annotator: Arc<dyn Annotator>,
    pub embedder: Arc<dyn Embedder>,
}

impl Default for Lingo {
    fn default() -> Self {
        Lingo {
            annotator: Arc::new(DefaultAnnotator),
            embedder: Arc::new(HashedNgramEmbedder),
        }
    }
}

impl fmt::Debug for Lingo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lingo").finish_non_exhaustive()
    }
}

#[derive(Debug, Serialize)]
struct AnnotateRequest<'a> {
    texts: Vec<&'a str>,
    tokens: Vec<Vec<&'a str>>,
}

#[derive(Debug, Deserialize)]
struct AnnotateResponse {
    annotations: Vec<RemoteAnnotation>,
}

#[derive(Debug, Deserialize)]
struct RemoteAnnotation {
    lemmas: Vec<String>,
    pos: Vec<String>,
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

/// Annotator served over HTTP.
///
/// The request carries our tokenization so that the returned lemma and POS
/// lists line up with it: `{"texts": [..], "tokens": [[..], ..]}` answered by
/// `{"annotations": [{"lemmas": [..], "pos": [..]}, ..]}`.
pub struct HttpAnnotator {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpAnnotator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        HttpAnnotator {
            endpoint: endpoint.into(),
            agent: http_agent(timeout),
        }
    }
}

impl Annotator for HttpAnnotator {
    fn annotate(&self, text: &str) -> Result<AnnotatedText, LingoError> {
        let tokens = tokenize(text);
        let req = AnnotateRequest {
            texts: vec![text],
            tokens: vec![tokens.texts()],
        };
        let err = |e: String| LingoError::Annotator(e);
        let mut resp: AnnotateResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(&req)
            .map_err(|e| err(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| err(e.to_string()))?;
        let ann = resp
            .annotations
            .pop()
            .ok_or_else(|| err("no annotation returned".into()))?;
        if ann.lemmas.len() != tokens.len() || ann.pos.len() != tokens.len() {
            return Err(err(format!(
                "annotation length mismatch: {} tokens, {} lemmas, {} tags",
                tokens.len(),
                ann.lemmas.len(),
                ann.pos.len()
            )));
        }
        let pos = ann
            .pos
            .iter()
            .map(|p| p.parse::<Pos>().map_err(err))
            .collect::<Result<_, _>>()?;
        Ok(AnnotatedText {
            tokens,
            lemmas: ann.lemmas,
            pos,
        })
    }
}

/// Embedder served over HTTP: `{"texts": [..]}` answered by `{"vectors": [[..], ..]}`.
/// Returned vectors are re-normalized locally.
pub struct HttpEmbedder {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        HttpEmbedder {
            endpoint: endpoint.into(),
            agent: http_agent(timeout),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, LingoError> {
        let err = |e: String| LingoError::Embedder(e);
        let resp: EmbedResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(&EmbedRequest { texts })
            .map_err(|e| err(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| err(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(err(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        Ok(resp.vectors.into_iter().map(Embedding::normalized).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &Embedding, b: &Embedding) -> f64 {
        a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn annotate_examples() {
        let a = annotate("today");
        assert_eq!(a.lemmas, ["today"]);
        assert_eq!(a.pos, [Pos::NOUN]);

        assert!(annotate("").is_empty());
        assert_eq!(annotate("1999").pos, [Pos::NUM]);
        assert_eq!(annotate("on 03/14/2019 .").pos, [Pos::ADP, Pos::NUM, Pos::PUNCT]);
    }

    #[test]
    fn annotate_lengths_agree() {
        let a = annotate("@virreedom Merry Christmas! We're watching movies, finally.");
        assert_eq!(a.lemmas.len(), a.len());
        assert_eq!(a.pos.len(), a.len());
        assert_eq!(a.pos[0], Pos::SYM);
        assert!(a.pos.contains(&Pos::PROPN));
        let i = a.tokens.texts().iter().position(|t| *t == "movies").unwrap();
        assert_eq!(a.lemmas[i], "movie");
    }

    #[test]
    fn embed_is_deterministic_and_normalized() {
        let a = embed("today");
        assert_eq!(a, embed("today"));
        assert_eq!(a.dim(), EMBEDDING_DIM);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!(embed("").is_zero());
    }

    #[test]
    fn shared_ngrams_dominate() {
        let today = embed("today");
        assert!(cos(&today, &embed("today!")) > cos(&today, &embed("1999-10-23")));
    }

    #[test]
    fn cosine_distance_edges() {
        let v = embed("merry christmas");
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-12);

        let mut e1 = vec![0.0; 4];
        let mut e2 = vec![0.0; 4];
        e1[0] = 1.0;
        e2[3] = 1.0;
        assert_eq!(
            cosine_distance(&Embedding(e1), &Embedding(e2)).unwrap(),
            1.0
        );
        assert_eq!(cosine_distance(&embed(""), &v).unwrap(), 1.0);
        assert!(matches!(
            cosine_distance(&Embedding(vec![1.0]), &v),
            Err(LingoError::DimensionMismatch(1, EMBEDDING_DIM))
        ));
    }

    #[test]
    fn cosine_distance_matches_direct_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut unit = || {
                let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                Embedding::normalized(raw)
            };
            let (a, b) = (unit(), unit());
            let mut dot = 0.0;
            for k in 0..16 {
                dot += a.0[k] * b.0[k];
            }
            let d = cosine_distance(&a, &b).unwrap();
            assert!((d - (1.0 - dot)).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&d));
        }
    }

    #[test]
    fn pos_round_trips_through_strings() {
        for p in Pos::ALL {
            assert_eq!(p.to_string().parse::<Pos>().unwrap(), p);
        }
        assert!("DATE".parse::<Pos>().is_err());
    }
}
