//! Token-level alignment between an input and its transformed output.
//!
//! Everything here works on whitespace/punctuation tokens rather than
//! characters: key phrases are token runs, and the normalized distance that
//! decides which runs count as "key" is a token-level Levenshtein distance.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Placeholder output of a negative (ineligible) example.
pub const NA: &str = "N/A";

/// Normalized distance at or above which the retained tokens are the key phrase.
pub const KEY_PHRASE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Byte offsets into the source string.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    source: String,
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Source substring covered by a token range; empty for an empty range.
    pub fn span_text(&self, span: Range<usize>) -> &str {
        match self.byte_span(span) {
            Some(r) => &self.source[r],
            None => "",
        }
    }

    pub fn byte_span(&self, span: Range<usize>) -> Option<Range<usize>> {
        if span.is_empty() || span.end > self.tokens.len() {
            return None;
        }
        Some(self.tokens[span.start].start..self.tokens[span.end - 1].end)
    }

    /// Rebuilds the source from the tokens and the gaps between them.
    pub fn reconstruct(&self) -> String {
        let mut out = String::with_capacity(self.source.len());
        let mut cursor = 0;
        for tok in &self.tokens {
            out.push_str(&self.source[cursor..tok.start]);
            out.push_str(&tok.text);
            cursor = tok.end;
        }
        out.push_str(&self.source[cursor..]);
        out
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Splits on whitespace, then peels leading and trailing punctuation off each
/// chunk as single-character tokens. Chunks made only of punctuation stay whole.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut push = |start: usize, end: usize| {
        tokens.push(Token {
            text: text[start..end].to_string(),
            start,
            end,
        })
    };

    let mut chunk_start = None;
    let bounds = text
        .char_indices()
        .map(|(i, c)| (i, c.is_whitespace()))
        .chain(std::iter::once((text.len(), true)));
    for (i, ws) in bounds {
        match (chunk_start, ws) {
            (None, false) => chunk_start = Some(i),
            (Some(s), true) => {
                split_chunk(&text[s..i], s, &mut push);
                chunk_start = None;
            }
            _ => {}
        }
    }

    TokenSeq {
        source: text.to_string(),
        tokens,
    }
}

fn split_chunk(chunk: &str, offset: usize, push: &mut impl FnMut(usize, usize)) {
    if chunk.chars().all(is_punct) {
        push(offset, offset + chunk.len());
        return;
    }
    let chars: Vec<(usize, char)> = chunk.char_indices().collect();
    let first_word = chars.iter().position(|&(_, c)| !is_punct(c)).unwrap();
    let last_word = chars.iter().rposition(|&(_, c)| !is_punct(c)).unwrap();
    let char_end = |k: usize| chars.get(k + 1).map_or(chunk.len(), |&(b, _)| b);

    for &(b, c) in &chars[..first_word] {
        push(offset + b, offset + b + c.len_utf8());
    }
    push(offset + chars[first_word].0, offset + char_end(last_word));
    for &(b, c) in &chars[last_word + 1..] {
        push(offset + b, offset + b + c.len_utf8());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Keep(usize, usize),
    Substitute(usize, usize),
    Delete(usize),
    Insert(usize),
}

impl EditOp {
    pub fn cost(&self) -> usize {
        match self {
            EditOp::Keep(..) => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    pub fn cost(&self) -> usize {
        self.ops.iter().map(EditOp::cost).sum()
    }

    /// Source-side indices in script order (Keep, Substitute, Delete).
    pub fn source_indices(&self) -> Vec<usize> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                EditOp::Keep(i, _) | EditOp::Substitute(i, _) | EditOp::Delete(i) => Some(i),
                EditOp::Insert(_) => None,
            })
            .collect()
    }

    /// Target-side indices in script order (Keep, Substitute, Insert).
    pub fn target_indices(&self) -> Vec<usize> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                EditOp::Keep(_, j) | EditOp::Substitute(_, j) | EditOp::Insert(j) => Some(j),
                EditOp::Delete(_) => None,
            })
            .collect()
    }
}

/// Minimal unit-cost edit script between two sequences.
///
/// Among minimal-cost scripts the one with the most `Keep`s wins; remaining
/// ties are resolved during backtrace in the order Keep, Substitute, Delete,
/// Insert.
pub fn edit_script_slices<T: PartialEq>(x: &[T], y: &[T]) -> EditScript {
    let (n, m) = (x.len(), y.len());
    let w = m + 1;
    // (cost, -keeps) minimized lexicographically.
    let mut dp = vec![(0usize, 0isize); (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = (i, 0);
    }
    for (j, cell) in dp.iter_mut().enumerate().take(w) {
        *cell = (j, 0);
    }
    let edit = |(c, k): (usize, isize)| (c + 1, k);
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * w + j - 1];
            let mut best = edit(diag);
            if x[i - 1] == y[j - 1] {
                best = best.min((diag.0, diag.1 - 1));
            }
            best = best.min(edit(dp[(i - 1) * w + j]));
            best = best.min(edit(dp[i * w + j - 1]));
            dp[i * w + j] = best;
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let diag = dp[(i - 1) * w + j - 1];
            if x[i - 1] == y[j - 1] && (diag.0, diag.1 - 1) == here {
                ops.push(EditOp::Keep(i - 1, j - 1));
                i -= 1;
                j -= 1;
                continue;
            }
            if edit(diag) == here {
                ops.push(EditOp::Substitute(i - 1, j - 1));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && edit(dp[(i - 1) * w + j]) == here {
            ops.push(EditOp::Delete(i - 1));
            i -= 1;
        } else {
            ops.push(EditOp::Insert(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    EditScript { ops }
}

pub fn edit_script(x: &TokenSeq, y: &TokenSeq) -> EditScript {
    edit_script_slices(&x.texts(), &y.texts())
}

/// Edit cost divided by the longer length; 0 when both sides are empty.
pub fn normalized_distance_slices<T: PartialEq>(x: &[T], y: &[T]) -> f64 {
    let longest = x.len().max(y.len());
    if longest == 0 {
        return 0.0;
    }
    edit_script_slices(x, y).cost() as f64 / longest as f64
}

pub fn normalized_distance(x: &TokenSeq, y: &TokenSeq) -> f64 {
    normalized_distance_slices(&x.texts(), &y.texts())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyPhraseSource {
    UnmodifiedPart,
    ModifiedPart,
    FullSentence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPhrase {
    pub text: String,
    /// Token range in the input.
    pub token_span: Range<usize>,
    pub source: KeyPhraseSource,
}

impl KeyPhrase {
    pub fn full_sentence(x: &TokenSeq) -> Self {
        KeyPhrase {
            text: x.span_text(0..x.len()).to_string(),
            token_span: 0..x.len(),
            source: KeyPhraseSource::FullSentence,
        }
    }
}

/// Key phrases of a labeled pair: the retained runs of `x` when most of it
/// changed, the changed runs otherwise. Negative pairs use the whole input.
pub fn extract_key_phrases(x_text: &str, y_text: &str) -> Vec<KeyPhrase> {
    let x = tokenize(x_text);
    if y_text.trim() == NA {
        return vec![KeyPhrase::full_sentence(&x)];
    }
    let y = tokenize(y_text);
    let script = edit_script(&x, &y);
    let longest = x.len().max(y.len());
    let distance = if longest == 0 {
        0.0
    } else {
        script.cost() as f64 / longest as f64
    };

    let mut kept = vec![false; x.len()];
    for op in &script.ops {
        if let EditOp::Keep(i, _) = *op {
            kept[i] = true;
        }
    }
    let (want_kept, source) = if distance >= KEY_PHRASE_THRESHOLD {
        (true, KeyPhraseSource::UnmodifiedPart)
    } else {
        (false, KeyPhraseSource::ModifiedPart)
    };

    let phrases: Vec<KeyPhrase> = runs(&kept, want_kept)
        .into_iter()
        .map(|span| KeyPhrase {
            text: x.span_text(span.clone()).to_string(),
            token_span: span,
            source,
        })
        .collect();
    if phrases.is_empty() {
        vec![KeyPhrase::full_sentence(&x)]
    } else {
        phrases
    }
}

/// Maximal runs of indices whose flag equals `want`.
fn runs(flags: &[bool], want: bool) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().chain(std::iter::once(&!want)).enumerate() {
        match (start, f == want) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffSpans {
    pub deleted: Vec<Span>,
    pub added: Vec<Span>,
}

/// Red/green spans: deleted covers Delete/Substitute sources in `x`, added
/// covers Insert/Substitute targets in `y`. Adjacent tokens merge into one span.
pub fn diff_spans(x_text: &str, y_text: &str) -> DiffSpans {
    let x = tokenize(x_text);
    let y = tokenize(y_text);
    let script = edit_script(&x, &y);
    let mut removed = vec![false; x.len()];
    let mut inserted = vec![false; y.len()];
    for op in &script.ops {
        match *op {
            EditOp::Delete(i) => removed[i] = true,
            EditOp::Insert(j) => inserted[j] = true,
            EditOp::Substitute(i, j) => {
                removed[i] = true;
                inserted[j] = true;
            }
            EditOp::Keep(..) => {}
        }
    }
    let to_spans = |seq: &TokenSeq, flags: &[bool]| {
        runs(flags, true)
            .into_iter()
            .filter_map(|r| {
                let bytes = seq.byte_span(r)?;
                Some(Span {
                    start: bytes.start,
                    end: bytes.end,
                    text: seq.source()[bytes].to_string(),
                })
            })
            .collect()
    };
    DiffSpans {
        deleted: to_spans(&x, &removed),
        added: to_spans(&y, &inserted),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).texts().into_iter().map(String::from).collect()
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        assert_eq!(toks("Oct. 23, 1999"), ["Oct", ".", "23", ",", "1999"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("today"), ["today"]);
    }

    #[test]
    fn tokenize_keeps_inner_and_pure_punctuation() {
        assert_eq!(toks("03/14/2019"), ["03/14/2019"]);
        assert_eq!(toks("today == 2014-03-30"), ["today", "==", "2014-03-30"]);
        assert_eq!(toks("N/A"), ["N/A"]);
        assert_eq!(toks("(wow!)"), ["(", "wow", "!", ")"]);
    }

    #[test]
    fn tokenize_reconstructs_with_unicode() {
        let s = "  Caf\u{e9}, na\u{ef}ve\u{2014}really?  ";
        assert_eq!(tokenize(s).reconstruct(), s);
    }

    #[test]
    fn edit_script_examples() {
        let s = edit_script_slices(&["a", "b", "c"], &["a", "b", "c"]);
        assert!(s.ops.iter().all(|op| matches!(op, EditOp::Keep(..))));
        assert_eq!(s.cost(), 0);

        let s = edit_script_slices(&["a", "b", "c"], &["a", "c"]);
        assert_eq!(
            s.ops,
            [EditOp::Keep(0, 0), EditOp::Delete(1), EditOp::Keep(2, 1)]
        );

        let empty: [&str; 0] = [];
        let s = edit_script_slices(&empty, &["a"]);
        assert_eq!(s.ops, [EditOp::Insert(0)]);
    }

    #[test]
    fn normalized_distance_examples() {
        let a = tokenize("Took a photo today .");
        assert_eq!(normalized_distance(&a, &a), 0.0);
        assert_eq!(normalized_distance(&a, &tokenize("today")), 0.8);
        assert_eq!(
            normalized_distance(&tokenize("a b c"), &tokenize("d e f")),
            1.0
        );
        assert_eq!(normalized_distance(&tokenize(""), &tokenize("")), 0.0);
    }

    #[test]
    fn key_phrase_retained_token() {
        let kps = extract_key_phrases("Took a photo today.", "today == 2014-03-30");
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].text, "today");
        assert_eq!(kps[0].token_span, 3..4);
        assert_eq!(kps[0].source, KeyPhraseSource::UnmodifiedPart);
    }

    #[test]
    fn key_phrase_qa_rewrite_sits_on_threshold() {
        // 5 edits over 10 tokens: exactly at the boundary, so retained runs win.
        let x = "Q: What room is this? A: bathroom";
        let y = "Q: Is this a bathroom? A: yes";
        assert_eq!(normalized_distance(&tokenize(x), &tokenize(y)), 0.5);
        let kps = extract_key_phrases(x, y);
        let texts: Vec<&str> = kps.iter().map(|k| k.text.as_str()).collect();
        assert_eq!(texts, ["Q:", "? A:"]);
        assert!(kps.iter().all(|k| k.source == KeyPhraseSource::UnmodifiedPart));
    }

    #[test]
    fn key_phrase_modified_parts() {
        let x = "Q: What room is this? A: bathroom";
        let kps = extract_key_phrases(x, "Q: Which room is this? A: kitchen");
        let texts: Vec<&str> = kps.iter().map(|k| k.text.as_str()).collect();
        assert_eq!(texts, ["What", "bathroom"]);
        assert!(kps.iter().all(|k| k.source == KeyPhraseSource::ModifiedPart));
    }

    #[test]
    fn key_phrase_negative_is_full_sentence() {
        let kps = extract_key_phrases("I love pizza.", " N/A ");
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].source, KeyPhraseSource::FullSentence);
        assert_eq!(kps[0].text, "I love pizza.");
    }

    #[test]
    fn key_phrase_falls_back_when_runs_empty() {
        // Output contains the input entirely: nothing modified in x.
        let kps = extract_key_phrases("today", "today today today");
        assert_eq!(kps[0].source, KeyPhraseSource::UnmodifiedPart);
        let kps = extract_key_phrases("a b c d", "a b c d e");
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].source, KeyPhraseSource::FullSentence);
    }

    #[test]
    fn diff_spans_examples() {
        assert_eq!(diff_spans("same text", "same text"), DiffSpans::default());

        let d = diff_spans("is reading", "is not reading");
        assert!(d.deleted.is_empty());
        assert_eq!(d.added.len(), 1);
        assert_eq!(d.added[0].text, "not");
        assert_eq!((d.added[0].start, d.added[0].end), (3, 6));

        let d = diff_spans("abc", "");
        assert_eq!(d.deleted[0].text, "abc");
        assert!(d.added.is_empty());
    }
}
