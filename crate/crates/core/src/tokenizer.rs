//! Lowercase subword vocabulary: training, greedy segmentation and decoding.
//!
//! Word boundaries are carried by a marker character (`▁`) prefixed to every
//! word except the first word of a segment, so the first word of `"gato negro"`
//! is looked up as `gato` and the second one as `▁negro`. Vocabulary training
//! runs a deterministic pair-merge procedure over those marked words and never
//! merges across word boundaries.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Fixed order of the special pieces at the top of every vocabulary.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Prefix marking a word-initial piece.
pub const BOUNDARY: char = '\u{2581}';

/// Vocabulary size used by the published model presets.
pub const PRESET_VOCAB_SIZE: usize = 31_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SubwordVocabulary {
    pieces: Vec<String>,
    piece_ids: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl SubwordVocabulary {
    /// Builds a vocabulary from an ordered piece list whose first five entries
    /// are the special pieces in [`SPECIALS`] order.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary needs at least {} pieces, got {}",
                SPECIALS.len(),
                pieces.len()
            )));
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if pieces[i] != *special {
                return Err(Error::Config(format!(
                    "piece {i} must be {special}, found {:?}",
                    pieces[i]
                )));
            }
        }
        let mut piece_ids = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (id, piece) in pieces.iter().enumerate() {
            if piece.is_empty() {
                return Err(Error::Config(format!("piece {id} is empty")));
            }
            if id >= SPECIALS.len() {
                if piece.to_lowercase() != *piece {
                    return Err(Error::Config(format!("piece {piece:?} is not lowercase")));
                }
                if piece.chars().any(char::is_whitespace) {
                    return Err(Error::Config(format!("piece {piece:?} contains whitespace")));
                }
                max_piece_chars = max_piece_chars.max(piece.chars().count());
            }
            if piece_ids.insert(piece.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate piece {piece:?}")));
            }
        }
        Ok(Self {
            pieces,
            piece_ids,
            max_piece_chars,
        })
    }

    /// Reads the one-piece-per-line vocabulary file format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces = text.lines().map(str::to_string).collect();
        Self::from_pieces(pieces).map_err(|e| match e {
            Error::Config(message) => Error::data(path, 0, message),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.pieces.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.piece_ids.get(piece).copied()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn cls_id(&self) -> u32 {
        2
    }
    pub fn sep_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Greedy longest-prefix segmentation of already-lowercased text.
    ///
    /// Returns `(piece id, first char, one past last char)` with char indices
    /// into the marked character stream handed in.
    fn segment(&self, chars: &[char]) -> Vec<(u32, usize, usize)> {
        let mut out = Vec::new();
        let mut pos = 0;
        let mut buf = String::new();
        while pos < chars.len() {
            let longest = self.max_piece_chars.min(chars.len() - pos);
            let mut matched = None;
            for len in (1..=longest).rev() {
                buf.clear();
                buf.extend(&chars[pos..pos + len]);
                if let Some(&id) = self.piece_ids.get(buf.as_str()) {
                    if !self.is_special(id) {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push((id, pos, pos + len));
                    pos += len;
                }
                // A marker nothing starts with carries no content of its own.
                None if chars[pos] == BOUNDARY => pos += 1,
                None => {
                    out.push((self.unk_id(), pos, pos + 1));
                    pos += 1;
                }
            }
        }
        out
    }

    /// Lowercases and segments one text segment into pieces with char spans
    /// into `text`.
    fn pieces_for_text(&self, text: &str) -> Vec<Piece> {
        let words = split_words(text);
        self.pieces_for_words(&words)
    }

    fn pieces_for_words(&self, words: &[Word]) -> Vec<Piece> {
        let mut out = Vec::new();
        for (w, word) in words.iter().enumerate() {
            let mut chars = Vec::with_capacity(word.lower.len() + 1);
            let mut source = Vec::with_capacity(word.lower.len() + 1);
            if w > 0 {
                chars.push(BOUNDARY);
                source.push(None);
            }
            for &(c, src) in &word.lower {
                chars.push(c);
                source.push(Some(src));
            }
            for (id, start, end) in self.segment(&chars) {
                let covered: Vec<usize> = source[start..end].iter().flatten().copied().collect();
                let span = match (covered.iter().min(), covered.iter().max()) {
                    (Some(&lo), Some(&hi)) => (lo, hi + 1),
                    _ => (word.start, word.start),
                };
                out.push(Piece { id, span, word: w });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    id: u32,
    span: (usize, usize),
    word: usize,
}

#[derive(Debug)]
struct Word {
    /// Lowercased characters paired with their source char index.
    lower: Vec<(char, usize)>,
    start: usize,
}

fn split_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current: Option<Word> = None;
    for (idx, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if let Some(word) = current.take() {
                words.push(word);
            }
            continue;
        }
        let word = current.get_or_insert_with(|| Word {
            lower: Vec::new(),
            start: idx,
        });
        for lc in c.to_lowercase() {
            word.lower.push((lc, idx));
        }
    }
    if let Some(word) = current {
        words.push(word);
    }
    words
}

/// How a pair input is shortened when it does not fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Truncation {
    /// Drop one token at a time from whichever segment is currently longer
    /// (the second segment on ties).
    #[default]
    LongestFirst,
    /// Only ever shorten the second segment; the first is kept whole if it fits.
    OnlySecond,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
    /// Char span of each content token inside its own source segment; `None`
    /// for special and padding positions.
    pub char_offsets: Vec<Option<(usize, usize)>>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Assembles `[CLS] a [SEP] (b [SEP])` from already-segmented ids and pads
    /// to `max_len`.
    pub fn from_segments(
        a: &[u32],
        b: Option<&[u32]>,
        max_len: usize,
        vocab: &SubwordVocabulary,
        truncation: Truncation,
    ) -> Result<Self> {
        let a: Vec<(u32, Option<(usize, usize)>)> = a.iter().map(|&id| (id, None)).collect();
        let b: Option<Vec<_>> = b.map(|b| b.iter().map(|&id| (id, None)).collect());
        assemble(a, b, max_len, vocab, truncation)
    }
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    Ok(())
}

type Tokens = Vec<(u32, Option<(usize, usize)>)>;

fn assemble(
    mut a: Tokens,
    mut b: Option<Tokens>,
    max_len: usize,
    vocab: &SubwordVocabulary,
    truncation: Truncation,
) -> Result<EncodedSequence> {
    check_max_len(max_len)?;
    match b.as_mut() {
        None => a.truncate(max_len - 2),
        Some(b) => {
            let budget = max_len - 3;
            match truncation {
                Truncation::LongestFirst => {
                    while a.len() + b.len() > budget {
                        if a.len() > b.len() {
                            a.pop();
                        } else {
                            b.pop();
                        }
                    }
                }
                Truncation::OnlySecond => {
                    a.truncate(budget);
                    b.truncate(budget - a.len());
                }
            }
        }
    }

    let mut seq = EncodedSequence {
        ids: Vec::with_capacity(max_len),
        attention_mask: Vec::with_capacity(max_len),
        segment_ids: Vec::with_capacity(max_len),
        char_offsets: Vec::with_capacity(max_len),
    };
    let mut push = |id: u32, segment: u8, offset: Option<(usize, usize)>| {
        seq.ids.push(id);
        seq.attention_mask.push(1);
        seq.segment_ids.push(segment);
        seq.char_offsets.push(offset);
    };
    push(vocab.cls_id(), 0, None);
    for (id, offset) in a {
        push(id, 0, offset);
    }
    push(vocab.sep_id(), 0, None);
    if let Some(b) = b {
        for (id, offset) in b {
            push(id, 1, offset);
        }
        push(vocab.sep_id(), 1, None);
    }
    while seq.ids.len() < max_len {
        seq.ids.push(vocab.pad_id());
        seq.attention_mask.push(0);
        seq.segment_ids.push(0);
        seq.char_offsets.push(None);
    }
    Ok(seq)
}

/// Encodes a single text or a text pair with the default truncation policy.
pub fn encode(
    text_a: &str,
    text_b: Option<&str>,
    max_len: usize,
    vocab: &SubwordVocabulary,
) -> Result<EncodedSequence> {
    encode_with(text_a, text_b, max_len, vocab, Truncation::LongestFirst)
}

pub fn encode_with(
    text_a: &str,
    text_b: Option<&str>,
    max_len: usize,
    vocab: &SubwordVocabulary,
    truncation: Truncation,
) -> Result<EncodedSequence> {
    let to_tokens = |text: &str| -> Tokens {
        vocab
            .pieces_for_text(text)
            .into_iter()
            .map(|p| (p.id, Some(p.span)))
            .collect()
    };
    assemble(to_tokens(text_a), text_b.map(to_tokens), max_len, vocab, truncation)
}

/// Encodes pre-split words (tagging tasks).
///
/// Offsets refer to the words joined by single spaces. The second return value
/// maps every position to the index of the word it came from.
pub fn encode_words<S: AsRef<str>>(
    words: &[S],
    max_len: usize,
    vocab: &SubwordVocabulary,
) -> Result<(EncodedSequence, Vec<Option<usize>>)> {
    check_max_len(max_len)?;
    let joined = words.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    let split = split_words(&joined);
    if split.len() != words.len() {
        return Err(Error::InvalidArgument(
            "words must be non-empty and free of whitespace".into(),
        ));
    }
    let mut pieces = vocab.pieces_for_words(&split);
    pieces.truncate(max_len - 2);
    let mut word_index = vec![None];
    word_index.extend(pieces.iter().map(|p| Some(p.word)));
    let tokens = pieces.into_iter().map(|p| (p.id, Some(p.span))).collect();
    let seq = assemble(tokens, None, max_len, vocab, Truncation::LongestFirst)?;
    word_index.resize(seq.len(), None);
    Ok((seq, word_index))
}

/// Turns ids back into text. Special pieces are dropped, except the unknown
/// piece which renders as `[UNK]`; a separator between two segments renders as
/// a space.
pub fn decode(ids: &[u32], vocab: &SubwordVocabulary) -> Result<String> {
    let mut out = String::new();
    let mut pending_break = false;
    for &id in ids {
        let piece = vocab
            .piece(id)
            .ok_or_else(|| Error::InvalidArgument(format!("id {id} outside vocabulary of {}", vocab.len())))?;
        if id == vocab.sep_id() {
            pending_break = !out.is_empty();
            continue;
        }
        if vocab.is_special(id) && id != vocab.unk_id() {
            continue;
        }
        if pending_break && !piece.starts_with(BOUNDARY) {
            out.push(' ');
        }
        pending_break = false;
        out.push_str(piece);
    }
    Ok(out.replace(BOUNDARY, " ").trim().to_string())
}

/// Learns a vocabulary of exactly `target_size` pieces (specials included) by
/// repeatedly merging the most frequent adjacent symbol pair. Ties go to the
/// lexicographically smallest `(left, right)` pair.
pub fn train_vocabulary<I, S>(corpus: I, target_size: usize) -> Result<SubwordVocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: HashMap<Vec<char>, u64> = HashMap::new();
    for line in corpus {
        for (w, word) in split_words(line.as_ref()).into_iter().enumerate() {
            let mut chars: Vec<char> = Vec::with_capacity(word.lower.len() + 1);
            if w > 0 {
                chars.push(BOUNDARY);
            }
            chars.extend(word.lower.iter().map(|&(c, _)| c));
            *word_counts.entry(chars).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }

    let alphabet: BTreeSet<char> = word_counts.keys().flatten().copied().collect();
    let needed = alphabet.len() + SPECIALS.len();
    if target_size < needed {
        return Err(Error::InvalidArgument(format!(
            "target size {target_size} cannot hold {} characters plus {} specials",
            alphabet.len(),
            SPECIALS.len()
        )));
    }

    let mut trainer = MergeTrainer::new(word_counts, &alphabet);
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));
    let mut known: HashSet<String> = pieces.iter().cloned().collect();

    while pieces.len() < target_size {
        let merged = trainer.merge_best().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "corpus supports only {} pieces, {target_size} requested",
                pieces.len()
            ))
        })?;
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
    }
    SubwordVocabulary::from_pieces(pieces)
}

type Pair = (u32, u32);

struct MergeTrainer {
    symbols: Vec<String>,
    symbol_ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    pair_counts: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, HashSet<usize>>,
    ranked: BTreeSet<(Reverse<u64>, String, String)>,
}

impl MergeTrainer {
    fn new(word_counts: HashMap<Vec<char>, u64>, alphabet: &BTreeSet<char>) -> Self {
        let symbols: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let symbol_ids: HashMap<String, u32> = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        // Sort the word types so the training walk never depends on hash order.
        let mut word_counts: Vec<_> = word_counts.into_iter().collect();
        word_counts.sort();
        let words = word_counts
            .into_iter()
            .map(|(chars, count)| {
                let ids = chars.iter().map(|c| symbol_ids[&c.to_string()]).collect();
                (ids, count)
            })
            .collect();
        let mut trainer = Self {
            symbols,
            symbol_ids,
            words,
            pair_counts: HashMap::new(),
            pair_words: HashMap::new(),
            ranked: BTreeSet::new(),
        };
        for w in 0..trainer.words.len() {
            trainer.account(w, true);
        }
        trainer
    }

    fn rank_key(&self, pair: Pair, count: u64) -> (Reverse<u64>, String, String) {
        (
            Reverse(count),
            self.symbols[pair.0 as usize].clone(),
            self.symbols[pair.1 as usize].clone(),
        )
    }

    /// Adds or removes the pair contributions of one word.
    fn account(&mut self, w: usize, add: bool) {
        let (ids, count) = &self.words[w];
        let count = *count;
        let pairs: Vec<Pair> = ids.windows(2).map(|p| (p[0], p[1])).collect();
        for pair in pairs {
            let old = self.pair_counts.get(&pair).copied().unwrap_or(0);
            let new = if add { old + count } else { old - count };
            if old > 0 {
                let key = self.rank_key(pair, old);
                self.ranked.remove(&key);
            }
            if new > 0 {
                let key = self.rank_key(pair, new);
                self.ranked.insert(key);
                self.pair_counts.insert(pair, new);
            } else {
                self.pair_counts.remove(&pair);
            }
            if add {
                self.pair_words.entry(pair).or_default().insert(w);
            }
        }
    }

    fn merge_best(&mut self) -> Option<String> {
        let (_, left, right) = self.ranked.iter().next()?.clone();
        let pair = (self.symbol_ids[&left], self.symbol_ids[&right]);
        let merged = format!("{left}{right}");
        let merged_id = match self.symbol_ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = self.symbols.len() as u32;
                self.symbols.push(merged.clone());
                self.symbol_ids.insert(merged.clone(), id);
                id
            }
        };
        let mut affected: Vec<usize> = self.pair_words.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for w in affected {
            if !self.words[w].0.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            self.account(w, false);
            let ids = &self.words[w].0;
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    next.push(merged_id);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            self.words[w].0 = next;
            self.account(w, true);
        }
        Some(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(extra: &[&str]) -> SubwordVocabulary {
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        pieces.extend(extra.iter().map(|s| s.to_string()));
        SubwordVocabulary::from_pieces(pieces).unwrap()
    }

    fn content_pieces(seq: &EncodedSequence, vocab: &SubwordVocabulary) -> Vec<String> {
        seq.ids
            .iter()
            .filter(|&&id| !vocab.is_special(id) || id == vocab.unk_id())
            .map(|&id| vocab.piece(id).unwrap().to_string())
            .collect()
    }

    #[test]
    fn merges_repeated_character() {
        let vocab = train_vocabulary(["aaaa"], 7).unwrap();
        assert_eq!(vocab.len(), 7);
        assert!(vocab.id("a").is_some());
        assert!(vocab.id("aa").is_some());
    }

    #[test]
    fn single_character_alphabet_fills_target_exactly() {
        let vocab = train_vocabulary(["cccc"], 6).unwrap();
        let mut expected: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        expected.push("c".into());
        assert_eq!(vocab.pieces(), expected.as_slice());
    }

    #[test]
    fn training_errors() {
        assert!(train_vocabulary(Vec::<&str>::new(), 10).is_err());
        assert!(train_vocabulary(["   "], 10).is_err());
        // three characters plus five specials do not fit in seven pieces
        assert!(train_vocabulary(["abc"], 7).is_err());
        // nothing left to merge
        assert!(train_vocabulary(["ab"], 20).is_err());
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // (a,b) and (c,d) both occur once; (a,b) sorts first.
        let vocab = train_vocabulary(["ab cd"], 5 + 5 + 1).unwrap();
        assert_eq!(vocab.piece(10), Some("ab"));
    }

    #[test]
    fn longest_prefix_wins() {
        let vocab = vocab_of(&["ga", "to", "gato"]);
        let seq = encode("gato", None, 8, &vocab).unwrap();
        assert_eq!(content_pieces(&seq, &vocab), vec!["gato"]);
        assert_eq!(seq.len(), 8);
    }

    #[test]
    fn empty_input_skeleton() {
        let vocab = vocab_of(&["a"]);
        let seq = encode("", None, 8, &vocab).unwrap();
        assert_eq!(seq.ids, vec![2, 3, 0, 0, 0, 0, 0, 0]);
        assert_eq!(seq.attention_mask, vec![1, 1, 0, 0, 0, 0, 0, 0]);
        assert!(encode("", None, 2, &vocab).is_err());
    }

    #[test]
    fn pair_layout_and_segments() {
        let vocab = vocab_of(&["a", "b", "\u{2581}b"]);
        let seq = encode("a", Some("b b"), 8, &vocab).unwrap();
        assert_eq!(seq.ids, vec![2, 5, 3, 6, 7, 3, 0, 0]);
        assert_eq!(seq.segment_ids, vec![0, 0, 0, 1, 1, 1, 0, 0]);
        assert_eq!(seq.char_offsets[3], Some((0, 1)));
        assert_eq!(seq.char_offsets[4], Some((2, 3)));
    }

    #[test]
    fn longest_first_truncation() {
        let vocab = vocab_of(&["a", "\u{2581}a"]);
        let seq = encode("a a a a a", Some("a a"), 7, &vocab).unwrap();
        // budget 4: a shrinks from 5 to 2, then tie 2/2 removes from b
        let a = seq
            .segment_ids
            .iter()
            .zip(&seq.attention_mask)
            .filter(|(s, m)| **s == 0 && **m == 1)
            .count();
        assert_eq!(seq.len(), 7);
        assert_eq!(a, 2 + 2);
        let seq = encode_with("a a a", Some("a a a a"), 7, &vocab, Truncation::OnlySecond).unwrap();
        assert_eq!(&seq.ids[..5], &[2, 5, 6, 6, 3]);
        assert_eq!(seq.ids[5], 5);
        assert_eq!(seq.ids[6], 3);
    }

    #[test]
    fn long_input_has_exact_length() {
        let vocab = vocab_of(&["x", "\u{2581}x"]);
        let text = vec!["x"; 600].join(" ");
        let seq = encode(&text, None, 512, &vocab).unwrap();
        assert_eq!(seq.len(), 512);
        assert_eq!(seq.ids[511], vocab.sep_id());
        assert!(seq.attention_mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn unknown_characters() {
        let vocab = vocab_of(&["a"]);
        let seq = encode("a?a", None, 8, &vocab).unwrap();
        assert_eq!(&seq.ids[..5], &[2, 5, 1, 5, 3]);
        assert_eq!(decode(&seq.ids, &vocab).unwrap(), "a[UNK]a");
    }

    #[test]
    fn decode_specials_and_range() {
        let vocab = vocab_of(&["a"]);
        assert_eq!(decode(&[2, 3], &vocab).unwrap(), "");
        assert!(decode(&[99], &vocab).is_err());
        assert_eq!(decode(&[2, 5, 3, 5, 3, 0], &vocab).unwrap(), "a a");
    }

    #[test]
    fn encode_words_tracks_word_index() {
        let vocab = vocab_of(&["ga", "to", "\u{2581}ga"]);
        let (seq, words) = encode_words(&["Gato", "ga"], 8, &vocab).unwrap();
        assert_eq!(&seq.ids[..5], &[2, 5, 6, 7, 3]);
        assert_eq!(&words[..5], &[None, Some(0), Some(0), Some(1), None]);
        assert!(encode_words(&["two words"], 8, &vocab).is_err());
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = train_vocabulary(["hola mundo", "hola gato"], 20).unwrap();
        vocab.save(&path).unwrap();
        assert_eq!(SubwordVocabulary::load(&path).unwrap(), vocab);

        std::fs::write(&path, "[UNK]\n[PAD]\n[CLS]\n[SEP]\n[MASK]\na\n").unwrap();
        assert!(SubwordVocabulary::load(&path).is_err());
        assert!(SubwordVocabulary::from_pieces(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(["Upper".to_string()])
                .collect()
        )
        .is_err());
    }
}
