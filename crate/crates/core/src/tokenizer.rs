//! Whitespace-and-punctuation tokenizer with byte-offset tracking.
//!
//! Words are maximal alphanumeric runs, every other visible character is its
//! own token, apostrophe clitics (`'s`, `'re`, ...) attach to the following
//! letters, and the bracket markers `[REASON]` / `[ACT]` are single tokens.
//! Because span boundaries always fall on whitespace or at line starts, tokens
//! never straddle a span.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::segmenter::{SegmentLabel, SegmentedTrajectory, ACT_MARKER, REASON_MARKER};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";
pub const SPECIALS: [&str; 5] = [PAD, BOS, UNK, REASON_MARKER, ACT_MARKER];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    pub pad: u32,
    pub bos: u32,
    pub unk: u32,
    pub reason_marker: u32,
    pub act_marker: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Build a vocabulary: specials first, then tokens with `count >= min_count`
    /// ordered by descending count and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for (s, e) in split_offsets(doc.as_ref()) {
                *counts.entry(&doc.as_ref()[s..e]).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let special = |s: &str| {
            token_to_id
                .get(s)
                .copied()
                .ok_or_else(|| Error::InvalidVocab(format!("missing special token {s:?}")))
        };
        Ok(Self {
            pad: special(PAD)?,
            bos: special(BOS)?,
            unk: special(UNK)?,
            reason_marker: special(REASON_MARKER)?,
            act_marker: special(ACT_MARKER)?,
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(self.unk)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&VocabFile {
            tokens: self.id_to_token.clone(),
        })?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        Self::from_tokens(file.tokens)
    }

    /// Join token texts with single spaces.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedTrajectory {
    pub token_ids: Vec<u32>,
    pub offsets: Vec<Range<usize>>,
    pub labels: Vec<Option<SegmentLabel>>,
}

impl TokenizedTrajectory {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte ranges of the tokens of `doc`.
pub fn split_offsets(doc: &str) -> Vec<(usize, usize)> {
    let bytes = doc.as_bytes();
    let mut out = Vec::new();
    let mut it = doc.char_indices().peekable();
    while let Some((i, c)) = it.next() {
        if c.is_whitespace() {
            continue;
        }
        if c == '[' {
            let rest = &doc[i..];
            if let Some(m) = [REASON_MARKER, ACT_MARKER].iter().find(|m| rest.starts_with(**m)) {
                let end = i + m.len();
                while it.peek().is_some_and(|&(j, _)| j < end) {
                    it.next();
                }
                out.push((i, end));
                continue;
            }
        }
        if is_word_char(c) {
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = it.peek() {
                if !is_word_char(d) {
                    break;
                }
                end = j + d.len_utf8();
                it.next();
            }
            out.push((i, end));
            continue;
        }
        if c == '\'' {
            let prev_is_word = out.last().is_some_and(|&(_, e)| e == i)
                && doc[..i].chars().next_back().is_some_and(is_word_char);
            let next_is_alpha = it.peek().is_some_and(|&(_, d)| d.is_alphabetic());
            if prev_is_word && next_is_alpha {
                let mut end = i + 1;
                while let Some(&(j, d)) = it.peek() {
                    if !d.is_alphabetic() {
                        break;
                    }
                    end = j + d.len_utf8();
                    it.next();
                }
                out.push((i, end));
                continue;
            }
        }
        debug_assert!(i < bytes.len());
        out.push((i, i + c.len_utf8()));
    }
    out
}

/// Tokenize a document; labels are left unset.
pub fn tokenize_with_offsets(doc: &str, vocab: &Vocab) -> TokenizedTrajectory {
    let offsets: Vec<Range<usize>> = split_offsets(doc).into_iter().map(|(s, e)| s..e).collect();
    TokenizedTrajectory {
        token_ids: offsets.iter().map(|r| vocab.id(&doc[r.clone()])).collect(),
        labels: vec![None; offsets.len()],
        offsets,
    }
}

/// Assign each token the label of the span containing it.
pub fn label_tokens(mut tok: TokenizedTrajectory, seg: &SegmentedTrajectory) -> Result<TokenizedTrajectory> {
    let mut spans = seg.spans.iter().peekable();
    for (t, r) in tok.offsets.iter().enumerate() {
        while spans.peek().is_some_and(|s| s.char_range.end <= r.start) {
            spans.next();
        }
        tok.labels[t] = match spans.peek() {
            Some(s) if s.char_range.start <= r.start && r.end <= s.char_range.end => Some(s.label),
            Some(s) if s.char_range.start < r.end => {
                return Err(Error::BoundaryStraddle {
                    token: t,
                    start: r.start,
                    end: r.end,
                })
            }
            _ => None,
        };
    }
    Ok(tok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{segment, MarkerPolicy, RawTrajectory, SegmentationRules};

    fn texts(doc: &str) -> Vec<&str> {
        split_offsets(doc).into_iter().map(|(s, e)| &doc[s..e]).collect()
    }

    #[test]
    fn punctuation_is_detached() {
        assert_eq!(
            texts("Reasoning: I should find the fridge."),
            vec!["Reasoning", ":", "I", "should", "find", "the", "fridge", "."]
        );
    }

    #[test]
    fn clitics_and_markers() {
        assert_eq!(texts("It's here"), vec!["It", "'s", "here"]);
        assert_eq!(texts("'quoted'"), vec!["'", "quoted", "'"]);
        assert_eq!(texts("[REASON] go [ACT] search[tray]"), vec![
            "[REASON]", "go", "[ACT]", "search", "[", "tray", "]"
        ]);
    }

    #[test]
    fn single_token_offset() {
        let vocab = Vocab::build(&["kitchen"], 1).unwrap();
        let tok = tokenize_with_offsets("kitchen", &vocab);
        assert_eq!(tok.offsets, vec![0..7]);
        assert_eq!(vocab.token(tok.token_ids[0]), "kitchen");
    }

    #[test]
    fn vocab_order_and_min_count() {
        let v = Vocab::build(&["a a b"], 1).unwrap();
        assert_eq!(&v.tokens()[5..], &["a".to_string(), "b".to_string()]);
        assert_eq!(v.reason_marker, 3);
        let v2 = Vocab::build(&["a a b"], 2).unwrap();
        let tok = tokenize_with_offsets("a b", &v2);
        assert_eq!(tok.token_ids[1], v2.unk);
        assert!(matches!(Vocab::build::<&str>(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn markers_map_to_special_ids() {
        let v = Vocab::build(&["x"], 1).unwrap();
        let tok = tokenize_with_offsets("[REASON] x [ACT] x", &v);
        assert_eq!(tok.token_ids[0], v.reason_marker);
        assert_eq!(tok.token_ids[2], v.act_marker);
    }

    #[test]
    fn fridge_labels_follow_spans() {
        let raw = RawTrajectory {
            env_name: "e".into(),
            task_id: "t".into(),
            goal: "g".into(),
            lines: vec![
                "Reasoning: I should find the fridge. It's likely in the kitchen.".into(),
                "Action: goto kitchen".into(),
            ],
            final_success: true,
        };
        let seg = segment(&raw, &SegmentationRules::default()).unwrap();
        let v = Vocab::build(&[seg.document.as_str()], 1).unwrap();
        let tok = label_tokens(tokenize_with_offsets(&seg.document, &v), &seg).unwrap();
        assert_eq!(tok.len(), 19);
        assert!(tok.labels[..15].iter().all(|l| *l == Some(SegmentLabel::Reason)));
        assert!(tok.labels[15..].iter().all(|l| *l == Some(SegmentLabel::Action)));

        let rules = SegmentationRules::default().with_marker_policy(MarkerPolicy::MarkersUnsupervised);
        let seg = segment(&raw, &rules).unwrap();
        let tok = label_tokens(tokenize_with_offsets(&seg.document, &v), &seg).unwrap();
        assert_eq!(tok.labels[0], None);
        assert_eq!(tok.labels[1], None);
        assert_eq!(tok.labels[2], Some(SegmentLabel::Reason));
        assert_eq!(tok.labels[15], None);
        assert_eq!(tok.labels[17], Some(SegmentLabel::Action));
    }

    #[test]
    fn straddling_token_is_an_error() {
        let raw = RawTrajectory {
            env_name: "e".into(),
            task_id: "t".into(),
            goal: "g".into(),
            lines: vec!["Action: goto kitchen".into()],
            final_success: true,
        };
        let mut seg = segment(&raw, &SegmentationRules::default()).unwrap();
        seg.spans[0].char_range = 10..20;
        let v = Vocab::build(&[seg.document.as_str()], 1).unwrap();
        let r = label_tokens(tokenize_with_offsets(&seg.document, &v), &seg);
        assert!(matches!(r, Err(Error::BoundaryStraddle { token: 2, .. })));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let v = Vocab::build(&["b a a c"], 1).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
