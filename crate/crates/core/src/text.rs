//! Sentence segmentation, tokenization and vocabulary handling.
//!
//! Tokenization is rule based: text is lowercased, split on whitespace, and
//! every ASCII punctuation character becomes its own token. Because `[` and `]`
//! are punctuation, corpus text can never produce one of the reserved
//! bracketed tokens.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::corpus::TaskRecord;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const REP: u32 = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[REP]"];

/// Template words that must always be encodable.
pub const TEMPLATE_WORDS: [&str; 4] = ["definition", "input", "output", ":"];

/// Ids of the template words, fixed by [`Vocab::base`].
pub const DEFINITION: u32 = 5;
pub const INPUT: u32 = 6;
pub const OUTPUT: u32 = 7;
pub const COLON: u32 = 8;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("min_count must be at least 1")]
    BadMinCount,
    #[error("token id {id} is out of range for a vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Splits text into sentences on `.`, `?` or `!` followed by whitespace or the
/// end of the text. Terminators stay with their sentence.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        current.push(c);
        let terminator = matches!(c, '.' | '?' | '!');
        let boundary = chars.get(i + 1).map_or(true, |n| n.is_whitespace());
        if terminator && boundary {
            push_trimmed(&mut out, &current);
            current.clear();
        }
    }
    push_trimmed(&mut out, &current);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// Lowercased whitespace + punctuation tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut tokens, &mut word);
        } else if c.is_ascii_punctuation() {
            flush(&mut tokens, &mut word);
            tokens.push(c.to_string());
        } else {
            word.extend(c.to_lowercase());
        }
    }
    flush(&mut tokens, &mut word);
    tokens
}

fn flush(tokens: &mut Vec<String>, word: &mut String) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// Token sequence, optionally tagged with the definition sentence each
/// half-open span of positions came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub sentence_spans: Option<Vec<(usize, usize)>>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids, sentence_spans: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends EOS, the form gold outputs take under teacher forcing.
    pub fn with_eos(mut self) -> Self {
        self.ids.push(EOS);
        self
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        self.sentence_spans.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// A vocabulary holding only the reserved and template tokens.
    pub fn base() -> Self {
        let mut v = Self { token_to_id: HashMap::new(), id_to_token: Vec::new() };
        for t in RESERVED.iter().chain(TEMPLATE_WORDS.iter()) {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::base();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Encodes raw text. Unknown tokens become UNK; corpus text can never
    /// produce a reserved id other than UNK.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let ids = tokenize(text)
            .iter()
            .map(|t| match self.token_to_id.get(t.as_str()) {
                Some(&id) if id as usize >= RESERVED.len() => id,
                _ => UNK,
            })
            .collect();
        TokenSeq::new(ids)
    }

    /// Encodes a list of sentences back to back, recording their spans.
    pub fn encode_sentences<S: AsRef<str>>(&self, sentences: &[S]) -> TokenSeq {
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(sentences.len());
        for s in sentences {
            let start = ids.len();
            ids.extend(self.encode(s.as_ref()).ids);
            spans.push((start, ids.len()));
        }
        TokenSeq { ids, sentence_spans: Some(spans) }
    }

    /// Joins tokens with single spaces, dropping reserved tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TextError> {
        self.decode_with(ids, false)
    }

    /// Like [`Vocab::decode`], optionally keeping reserved tokens for inspection.
    pub fn decode_with(&self, ids: &[u32], keep_reserved: bool) -> Result<String, TextError> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or(TextError::IdOutOfRange { id, size: self.len() })?;
            if keep_reserved || id as usize >= RESERVED.len() {
                parts.push(tok);
            }
        }
        Ok(parts.join(" "))
    }

    /// One token per line; the first five lines are the reserved header.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TextError> {
        for t in &self.id_to_token {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TextError> {
        let mut id_to_token = Vec::new();
        for line in r.lines() {
            id_to_token.push(line?);
        }
        if id_to_token.len() < RESERVED.len()
            || id_to_token[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(TextError::Malformed("missing reserved header".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(TextError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { token_to_id, id_to_token })
    }
}

/// Builds a vocabulary from every definition sentence, input and gold output
/// in the corpus. Tokens seen fewer than `min_count` times are left out and
/// encode to UNK.
pub fn build_vocab(corpus: &[TaskRecord], min_count: usize) -> Result<Vocab, TextError> {
    if min_count == 0 {
        return Err(TextError::BadMinCount);
    }
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    // ids assigned by (descending count, token): independent of task order
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut add = |text: &str| {
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    };
    for task in corpus {
        for s in &task.definition_sentences {
            add(s);
        }
        for inst in &task.instances {
            add(&inst.input_text);
            for g in &inst.gold_outputs {
                add(g);
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocab::from_tokens(kept.into_iter().map(|(t, _)| t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Instance, TaskKind};
    use proptest::prelude::*;

    fn task(def: &str, input: &str, out: &str) -> TaskRecord {
        TaskRecord {
            task_id: "t".into(),
            definition_sentences: segment_sentences(def),
            instances: vec![Instance { input_text: input.into(), gold_outputs: vec![out.into()] }],
            kind: TaskKind::Generation,
            label_space: None,
        }
    }

    #[test]
    fn template_ids_are_fixed() {
        let v = Vocab::base();
        let ids: Vec<u32> = TEMPLATE_WORDS.iter().map(|w| v.id(w).unwrap()).collect();
        assert_eq!(ids, vec![DEFINITION, INPUT, OUTPUT, COLON]);
        assert_eq!(v.id("[REP]"), Some(REP));
    }

    #[test]
    fn segments_on_terminators() {
        assert_eq!(segment_sentences("Output yes. Otherwise no."), vec!["Output yes.", "Otherwise no."]);
        assert_eq!(segment_sentences("no terminator here"), vec!["no terminator here"]);
        assert_eq!(segment_sentences("A! B? C."), vec!["A!", "B?", "C."]);
        assert_eq!(segment_sentences("   "), Vec::<String>::new());
        // a period inside a token is not a boundary
        assert_eq!(segment_sentences("Use v1.2 now. Done"), vec!["Use v1.2 now.", "Done"]);
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let v = build_vocab(&[task("x.", "a a b", "a")], 2).unwrap();
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
        assert_eq!(v.token(REP), Some("[REP]"));
        assert!(matches!(build_vocab(&[], 1), Err(TextError::EmptyCorpus)));
    }

    #[test]
    fn encode_decode_contracts() {
        let v = Vocab::from_tokens(["a", "b"]);
        assert!(v.encode("").ids.is_empty());
        assert_eq!(v.decode(&v.encode("a b").ids).unwrap(), "a b");
        assert_eq!(v.encode("zzz").ids, vec![UNK]);
        assert_eq!(v.decode_with(&[BOS, v.id("a").unwrap(), EOS], true).unwrap(), "[BOS] a [EOS]");
        assert_eq!(v.decode(&[BOS, v.id("a").unwrap(), EOS]).unwrap(), "a");
        assert!(matches!(v.decode(&[999]), Err(TextError::IdOutOfRange { .. })));
    }

    #[test]
    fn reserved_strings_in_text_are_escaped() {
        let v = Vocab::from_tokens(["rep"]);
        let ids = v.encode("[REP] [PAD]").ids;
        assert!(ids.iter().all(|&i| i != REP && i != PAD));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_tokens(["alpha", "beta"]);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[BOS]\n[EOS]\n[REP]\n"));
        assert_eq!(Vocab::read_from(buf.as_slice()).unwrap(), v);
        assert!(Vocab::read_from("a\nb\n".as_bytes()).is_err());
    }

    #[test]
    fn sentence_spans_cover_tokens() {
        let v = Vocab::from_tokens(["output", "yes", "."]);
        let seq = v.encode_sentences(&["Output yes.", "yes"]);
        assert_eq!(seq.spans(), &[(0, 3), (3, 4)]);
    }

    proptest! {
        #[test]
        fn segmentation_is_idempotent(words in prop::collection::vec("[a-z]{1,5}[.?!]?", 0..12)) {
            let text = words.join(" ");
            let once = segment_sentences(&text);
            let again = segment_sentences(&once.join(" "));
            prop_assert_eq!(once, again);
        }

        #[test]
        fn encoding_never_emits_special_ids(text in "[ -~]{0,40}") {
            let v = Vocab::from_tokens(tokenize(&text));
            for id in v.encode(&text).ids {
                prop_assert!(id == UNK || id as usize >= RESERVED.len());
            }
        }
    }
}
