//! WordPiece tokenization of instructions.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const NUM_SPECIALS: usize = 3;

const CONTINUATION: &str = "##";
const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from tokens listed in id order. The first three
    /// must be the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != [PAD, UNK, MASK] {
            return Err(Error::Data(format!(
                "vocabulary must start with {PAD}, {UNK}, {MASK}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?} at line {}", id + 1)));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Lowercases, turns punctuation into spaces, and splits on whitespace.
pub fn basic_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Greedy longest-match-first subword split of one word; `None` if some
/// suffix cannot be matched.
fn split_word(word: &str, vocab: &Vocab) -> Option<Vec<String>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_CHARS_PER_WORD {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece.insert_str(0, CONTINUATION);
            }
            if vocab.contains(&piece) {
                found = Some(piece);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// WordPiece token strings for `text`. A word that cannot be covered becomes
/// a single `[UNK]`.
pub fn wordpiece(text: &str, vocab: &Vocab) -> Vec<String> {
    basic_words(text)
        .iter()
        .flat_map(|w| split_word(w, vocab).unwrap_or_else(|| vec![UNK.to_owned()]))
        .collect()
}

/// Joins pieces back into words, gluing `##` continuations to their head.
pub fn detokenize(pieces: &[String]) -> String {
    let mut out = String::new();
    for p in pieces {
        if let Some(rest) = p.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(p);
        }
    }
    out
}

/// Token ids and their positions (`positions[i] == i`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedInstruction {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
}

impl EncodedInstruction {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes and truncates to the first `max_len` pieces.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> EncodedInstruction {
    let ids: Vec<usize> = wordpiece(text, vocab)
        .iter()
        .take(max_len)
        .map(|p| vocab.id(p).unwrap_or(UNK_ID))
        .collect();
    let positions = (0..ids.len()).collect();
    EncodedInstruction { ids, positions }
}

/// Specials, then whole words by descending frequency (ties broken
/// lexicographically) until `target_size` entries, then the single-character
/// pieces needed to cover every word that did not make the cut.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if target_size < NUM_SPECIALS {
        return Err(Error::invalid(format!(
            "vocabulary size {target_size} is smaller than the {NUM_SPECIALS} special tokens"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in basic_words(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = [PAD, UNK, MASK].iter().map(|s| s.to_string()).collect();
    let keep = (target_size - NUM_SPECIALS).min(ranked.len());
    tokens.extend(ranked[..keep].iter().map(|(w, _)| w.clone()));

    let mut fallback = BTreeSet::new();
    for (word, _) in &ranked[keep..] {
        for (i, c) in word.chars().enumerate() {
            fallback.insert(if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") });
        }
    }
    for piece in fallback {
        if !tokens.contains(&piece) {
            tokens.push(piece);
        }
    }
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut t: Vec<String> = [PAD, UNK, MASK].iter().map(|s| s.to_string()).collect();
        t.extend(extra.iter().map(|s| s.to_string()));
        Vocab::from_tokens(t).unwrap()
    }

    #[test]
    fn rectangle_splits_into_known_pieces() {
        let v = vocab(&["re", "##ct", "##ang", "##le", "white"]);
        assert_eq!(wordpiece("rectangle", &v), ["re", "##ct", "##ang", "##le"]);
        assert_eq!(wordpiece("White", &v), ["white"]);
        assert_eq!(wordpiece("xyz", &v), [UNK]);
        assert!(wordpiece("", &v).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let v = vocab(&["b", "bo", "box", "##x", "##es"]);
        assert_eq!(wordpiece("boxes", &v), ["box", "##es"]);
        // A dead end after a partial match makes the whole word unknown.
        assert_eq!(wordpiece("boxq", &v), [UNK]);
    }

    #[test]
    fn punctuation_and_case_are_normalized() {
        assert_eq!(basic_words("Pick up, the RED cup!"), ["pick", "up", "the", "red", "cup"]);
    }

    #[test]
    fn encode_truncates_and_numbers_positions() {
        let v = vocab(&["a", "b", "c"]);
        let e = encode("a b c", &v, 2);
        assert_eq!(e.ids, vec![3, 4]);
        assert_eq!(e.positions, vec![0, 1]);
        assert_eq!(encode("", &v, 4), EncodedInstruction::default());
        assert_eq!(encode("a zz", &v, 8).ids, vec![3, UNK_ID]);
    }

    #[test]
    fn build_vocab_small_corpus() {
        let v = build_vocab(&["a a b"], 5).unwrap();
        assert_eq!(v.tokens(), &[PAD, UNK, MASK, "a", "b"]);
        assert!(build_vocab(&["a"], 2).is_err());
        assert!(build_vocab::<&str>(&[], 5).is_err());
    }

    #[test]
    fn build_vocab_breaks_ties_lexicographically_and_adds_fallbacks() {
        let v = build_vocab(&["zeta alpha beta"], 4).unwrap();
        assert_eq!(v.token(3), Some("alpha"));
        for w in ["beta", "zeta"] {
            let pieces = wordpiece(w, &v);
            assert!(!pieces.contains(&UNK.to_string()));
            assert_eq!(detokenize(&pieces), w);
        }
        assert_eq!(v, build_vocab(&["zeta alpha beta"], 4).unwrap());
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let v = build_vocab(&["pick up the cup"], 10).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
        assert!(Vocab::from_text("[PAD]\n[UNK]\n[MASK]\nx\nx\n").is_err());
    }

    proptest! {
        #[test]
        fn pieces_reassemble_words(words in prop::collection::vec("[a-e]{1,8}", 1..6)) {
            let v = vocab(&["a", "b", "c", "d", "e", "##a", "##b", "##c", "##d", "##e", "ab", "##cd"]);
            let text = words.join(" ");
            let pieces = wordpiece(&text, &v);
            prop_assert_eq!(detokenize(&pieces), text);
        }

        #[test]
        fn encode_respects_max_len(text in "[a-z ]{0,40}", max_len in 1usize..10) {
            let v = build_vocab(&["the quick brown fox"], 6).unwrap();
            let e = encode(&text, &v, max_len);
            prop_assert!(e.len() <= max_len);
            prop_assert_eq!(e.positions, (0..e.ids.len()).collect::<Vec<_>>());
        }
    }
}
