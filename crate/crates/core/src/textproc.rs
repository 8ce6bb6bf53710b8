//! Character vocabularies, text normalization and WER/CER scoring.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const N_SPECIALS: usize = 4;

const SPECIAL_TAGS: [&str; N_SPECIALS] = ["<blank>", "<pad>", "<bos>", "<eos>"];

/// Maximum text length accepted by default.
pub const MAX_TEXT_TOKENS: usize = 600;

/// Character vocabulary. Ids `0..4` are `<blank> <pad> <bos> <eos>`; printable
/// symbols follow in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<char>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    /// Number of non-pad tokens.
    pub fn len(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD_ID).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Vocab {
    /// Builds a vocabulary from printable symbols. Duplicates are rejected.
    pub fn new(printable: &[char]) -> Result<Self> {
        for (i, c) in printable.iter().enumerate() {
            if printable[..i].contains(c) {
                return Err(Error::Config(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Self { symbols: printable.to_vec() })
    }

    /// Lower-case Latin vocabulary with 80 printable symbols (84 in total).
    pub fn english() -> Self {
        let mut s: Vec<char> = Vec::new();
        s.push(' ');
        s.extend('a'..='z');
        s.extend('A'..='Z');
        s.extend('0'..='9');
        s.extend("'.,?!-:;\"()&/$%@#".chars());
        Self::new(&s).expect("distinct symbols")
    }

    /// Arabic vocabulary with 94 printable symbols (98 in total), including
    /// the diacritic marks so diacritized text can be modeled.
    pub fn arabic() -> Self {
        let mut s: Vec<char> = Vec::new();
        s.push(' ');
        s.extend('\u{0621}'..='\u{063A}');
        s.extend('\u{0640}'..='\u{064A}');
        s.extend('\u{064B}'..='\u{0652}');
        s.push('\u{0670}');
        s.extend('\u{0660}'..='\u{0669}');
        s.extend('0'..='9');
        s.extend(".,?!\u{061F}\u{060C}".chars());
        s.extend('a'..='z');
        s.truncate(94);
        Self::new(&s).expect("distinct symbols")
    }

    pub fn size(&self) -> usize {
        N_SPECIALS + self.symbols.len()
    }

    pub fn printable(&self) -> &[char] {
        &self.symbols
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|p| p + N_SPECIALS)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(N_SPECIALS).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        text.chars()
            .enumerate()
            .map(|(position, symbol)| {
                self.id_of(symbol).ok_or(Error::UnknownSymbol { symbol, position })
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq::new)
    }

    /// Tokenizes with a length cap: longer input is an error unless
    /// `truncate` is set.
    pub fn tokenize_bounded(&self, text: &str, max_len: usize, truncate: bool) -> Result<TokenSeq> {
        let mut seq = self.tokenize(text)?;
        if seq.ids.len() > max_len {
            if !truncate {
                return Err(Error::TooLong { len: seq.ids.len(), max: max_len });
            }
            seq.ids.truncate(max_len);
        }
        Ok(seq)
    }

    /// Inverse of [`Vocab::tokenize`]; special ids are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.size() {
                return Err(Error::InvalidId { id, size: self.size() });
            }
            if let Some(c) = self.symbol(id) {
                out.push(c);
            }
        }
        Ok(out)
    }

    /// Vocabulary file text: one symbol per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tag in SPECIAL_TAGS {
            out.push_str(tag);
            out.push('\n');
        }
        for &c in &self.symbols {
            out.push(c);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
        let lines = match lines.last() {
            Some(&"") => &lines[..lines.len() - 1],
            _ => &lines[..],
        };
        if lines.len() < N_SPECIALS || lines[..N_SPECIALS] != SPECIAL_TAGS {
            return Err(Error::Config("vocabulary must start with <blank> <pad> <bos> <eos>".into()));
        }
        let mut symbols = Vec::new();
        for (n, line) in lines[N_SPECIALS..].iter().enumerate() {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(Error::Config(format!(
                        "vocabulary line {} must hold exactly one character",
                        n + N_SPECIALS + 1
                    )))
                }
            }
        }
        Self::new(&symbols)
    }
}

/// Arabic diacritics: tanween, harakat, shadda, sukun and superscript alef.
pub fn is_diacritic(c: char) -> bool {
    matches!(c, '\u{064B}'..='\u{0652}' | '\u{0670}')
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOpts {
    pub lowercase: bool,
    pub strip_punct: bool,
    pub strip_diacritics: bool,
}

impl NormalizeOpts {
    pub const NONE: Self = Self { lowercase: false, strip_punct: false, strip_diacritics: false };
    pub const ALL: Self = Self { lowercase: true, strip_punct: true, strip_diacritics: true };
}

/// Applies the requested transforms. Punctuation is anything that is neither
/// alphanumeric, whitespace nor a diacritic; stripping it also collapses
/// whitespace runs so the result is idempotent.
pub fn normalize(text: &str, opts: NormalizeOpts) -> String {
    let mut out = String::with_capacity(text.len());
    let keep = |c: char| {
        !(opts.strip_diacritics && is_diacritic(c))
            && !(opts.strip_punct && !(c.is_alphanumeric() || c.is_whitespace() || is_diacritic(c)))
    };
    for c in text.chars() {
        if opts.lowercase {
            out.extend(c.to_lowercase().filter(|&l| keep(l)));
        } else if keep(c) {
            out.push(c);
        }
    }
    if opts.strip_punct {
        let words: Vec<&str> = out.split_whitespace().collect();
        words.join(" ")
    } else {
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub distance: usize,
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = alloc::vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = EditOps { distance: d[n * w + m], ..EditOps::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            if here == d[(i - 1) * w + j - 1] + cost {
                ops.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorUnit {
    Word,
    Char,
}

/// Corpus-level WER or CER: total edits over total reference length, after
/// normalization. May exceed 1.
pub fn error_rate(refs: &[&str], hyps: &[&str], unit: ErrorUnit, opts: NormalizeOpts) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch { refs: refs.len(), hyps: hyps.len() });
    }
    let mut edits = 0usize;
    let mut total = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (normalize(r, opts), normalize(h, opts));
        match unit {
            ErrorUnit::Word => {
                let rw: Vec<&str> = r.split_whitespace().collect();
                let hw: Vec<&str> = h.split_whitespace().collect();
                edits += edit_distance(&rw, &hw).distance;
                total += rw.len();
            }
            ErrorUnit::Char => {
                let rc: Vec<char> = r.chars().collect();
                let hc: Vec<char> = h.chars().collect();
                edits += edit_distance(&rc, &hc).distance;
                total += rc.len();
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn ab_vocab() -> Vocab {
        Vocab::new(&['a', 'b']).unwrap()
    }

    #[test]
    fn preset_sizes_match_configured_counts() {
        assert_eq!(Vocab::english().size(), 84);
        assert_eq!(Vocab::arabic().size(), 98);
    }

    #[test]
    fn normalize_examples() {
        let lp = NormalizeOpts { lowercase: true, strip_punct: true, strip_diacritics: false };
        assert_eq!(normalize("Hello, World!", lp), "hello world");
        assert_eq!(normalize("abc", NormalizeOpts::NONE), "abc");
        assert_eq!(normalize("", NormalizeOpts::ALL), "");
    }

    #[test]
    fn diacritics_are_removed_and_nothing_else() {
        // kataba with fatha on each letter, then sukun and superscript alef
        let text = "\u{0643}\u{064E}\u{062A}\u{064E}\u{0628}\u{064E} \u{0645}\u{0652}\u{0670}";
        let opts = NormalizeOpts { strip_diacritics: true, ..NormalizeOpts::NONE };
        let oracle: String = text.chars().filter(|c| !('\u{064B}'..='\u{0652}').contains(c) && *c != '\u{0670}').collect();
        assert_eq!(normalize(text, opts), oracle);
        assert_eq!(normalize(text, opts), "\u{0643}\u{062A}\u{0628} \u{0645}");
    }

    #[test]
    fn tokenize_examples() {
        let v = ab_vocab();
        assert_eq!(v.tokenize("ab").unwrap().ids, vec![4, 5]);
        assert!(v.tokenize("").unwrap().ids.is_empty());
        assert_eq!(v.tokenize("abc"), Err(Error::UnknownSymbol { symbol: 'c', position: 2 }));
        assert_eq!(v.detokenize(&[4, 5]).unwrap(), "ab");
        assert_eq!(v.detokenize(&[BOS_ID, 4, EOS_ID]).unwrap(), "a");
        assert_eq!(v.detokenize(&[6]), Err(Error::InvalidId { id: 6, size: 6 }));
    }

    #[test]
    fn length_limit_boundary() {
        let v = ab_vocab();
        let s600: String = "ab".repeat(300);
        let s601 = s600.clone() + "a";
        assert_eq!(v.tokenize_bounded(&s600, MAX_TEXT_TOKENS, false).unwrap().ids.len(), 600);
        assert_eq!(v.tokenize_bounded(&s601, MAX_TEXT_TOKENS, false), Err(Error::TooLong { len: 601, max: 600 }));
        assert_eq!(v.tokenize_bounded(&s601, MAX_TEXT_TOKENS, true).unwrap().ids.len(), 600);
    }

    #[test]
    fn vocab_file_round_trip_keeps_space_symbol() {
        let v = Vocab::new(&[' ', 'x', 'y']).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("<blank>\n<pad>\n<bos>\n<eos>\n \n"));
        assert_eq!(Vocab::from_file_string(&text).unwrap(), v);
        assert!(Vocab::from_file_string("<pad>\n").is_err());
    }

    #[test]
    fn edit_distance_examples() {
        let c = |s: &str| s.chars().collect::<Vec<_>>();
        assert_eq!(edit_distance(&c("abc"), &c("abc")).distance, 0);
        let k = edit_distance(&c("kitten"), &c("sitting"));
        assert_eq!(k.distance, 3);
        assert_eq!(k.substitutions + k.insertions + k.deletions, 3);
        let e = edit_distance(&c(""), &c("ab"));
        assert_eq!((e.insertions, e.distance), (2, 2));
    }

    #[test]
    fn error_rate_examples() {
        let n = NormalizeOpts::NONE;
        assert_eq!(error_rate(&["a b"], &["a b"], ErrorUnit::Word, n).unwrap(), 0.0);
        assert!((error_rate(&["a b c"], &["a x c"], ErrorUnit::Word, n).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(error_rate(&["ab"], &["abab"], ErrorUnit::Char, n).unwrap(), 1.0);
        assert_eq!(error_rate(&["a"], &[], ErrorUnit::Char, n), Err(Error::LengthMismatch { refs: 1, hyps: 0 }));
        assert_eq!(error_rate(&[""], &["x"], ErrorUnit::Char, n), Err(Error::EmptyReference));
    }

    /// Plain recursive Levenshtein, independent of the DP table above.
    fn lev(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ar)), Some((y, br))) => {
                let sub = lev(ar, br) + usize::from(x != y);
                sub.min(lev(ar, b) + 1).min(lev(a, br) + 1)
            }
        }
    }

    proptest! {
        #[test]
        fn edit_distance_matches_recursive_oracle(a in proptest::collection::vec(0u8..3, 0..6), b in proptest::collection::vec(0u8..3, 0..6)) {
            let ops = edit_distance(&a, &b);
            prop_assert_eq!(ops.distance, lev(&a, &b));
            prop_assert_eq!(ops.distance, ops.substitutions + ops.insertions + ops.deletions);
        }

        #[test]
        fn edit_distance_is_a_metric(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
            let (a, b, c): (Vec<char>, Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect(), c.chars().collect());
            let ab = edit_distance(&a, &b).distance;
            prop_assert_eq!(ab, edit_distance(&b, &a).distance);
            prop_assert!(edit_distance(&a, &c).distance <= ab + edit_distance(&b, &c).distance);
        }

        #[test]
        fn tokenize_round_trips(s in "[ab]{0,40}") {
            let v = ab_vocab();
            let t = v.tokenize(&s).unwrap();
            prop_assert_eq!(t.ids.len(), s.chars().count());
            prop_assert_eq!(v.detokenize(&t.ids).unwrap(), s);
        }

        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,30}", lc: bool, p: bool, d: bool) {
            let o = NormalizeOpts { lowercase: lc, strip_punct: p, strip_diacritics: d };
            let once = normalize(&s, o);
            prop_assert_eq!(normalize(&once, o), once);
        }

        #[test]
        fn identical_text_scores_zero(s in "[a-z]{1,10}( [a-z]{1,10}){0,4}") {
            prop_assert_eq!(error_rate(&[s.as_str()], &[s.as_str()], ErrorUnit::Word, NormalizeOpts::ALL).unwrap(), 0.0);
            prop_assert_eq!(error_rate(&[s.as_str()], &[s.as_str()], ErrorUnit::Char, NormalizeOpts::ALL).unwrap(), 0.0);
        }

        #[test]
        fn stripping_diacritics_never_increases_cer(base in "[\u{0628}-\u{062A}]{1,8}", marks in proptest::collection::vec(0usize..10, 1..8)) {
            let mut hyp = String::new();
            for (i, c) in base.chars().enumerate() {
                hyp.push(c);
                let m = marks[i % marks.len()];
                if m < 8 {
                    hyp.push(char::from_u32(0x064B + m as u32).unwrap());
                }
            }
            let strip = NormalizeOpts { strip_diacritics: true, ..NormalizeOpts::NONE };
            let raw = error_rate(&[base.as_str()], &[hyp.as_str()], ErrorUnit::Char, NormalizeOpts::NONE).unwrap();
            let stripped = error_rate(&[base.as_str()], &[hyp.as_str()], ErrorUnit::Char, strip).unwrap();
            prop_assert!(stripped <= raw);
            prop_assert_eq!(stripped, 0.0);
        }
    }
}
