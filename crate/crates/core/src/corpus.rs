//! Vocabulary, corpora and the synthetic grammars used as machine-checkable
//! training data.
//!
//! Tokenization is character level. The two special tokens always occupy the
//! top ids: `<eos>` at `size - 2` and `<mask>` at `size - 1`.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const EOS_SURFACE: &str = "<eos>";
pub const MASK_SURFACE: &str = "<mask>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        let n = r.tokens.len();
        if n < 3 || r.tokens[n - 2] != EOS_SURFACE || r.tokens[n - 1] != MASK_SURFACE {
            return Err(Error::config("vocab must end with <eos>, <mask> and hold a content token"));
        }
        let content: Vec<char> = r.tokens[..n - 2]
            .iter()
            .map(|t| {
                let mut cs = t.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::config(format!("vocab token `{t}` is not a single character"))),
                }
            })
            .collect::<Result<_>>()?;
        Vocab::from_alphabet(&content)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    /// Builds a vocabulary from distinct content symbols, appending the specials.
    pub fn from_alphabet(symbols: &[char]) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        let mut tokens = Vec::with_capacity(symbols.len() + 2);
        for &c in symbols {
            if !seen.insert(c) {
                return Err(Error::config(format!("duplicate vocab symbol `{c}`")));
            }
            tokens.push(c.to_string());
        }
        tokens.push(EOS_SURFACE.to_string());
        tokens.push(MASK_SURFACE.to_string());
        Ok(Vocab { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask_id(&self) -> TokenId {
        (self.tokens.len() - 1) as TokenId
    }

    pub fn eos_id(&self) -> TokenId {
        (self.tokens.len() - 2) as TokenId
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len() - 2
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.tokens[..self.tokens.len() - 2]
                    .iter()
                    .position(|t| t.chars().next() == Some(c))
                    .map(|i| i as TokenId)
                    .ok_or_else(|| Error::config(format!("symbol `{c}` not in vocab")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.tokens.get(id as usize).map(String::as_str).unwrap_or("?"))
            .collect()
    }

    /// Decodes after stripping the trailing run of `<eos>` tokens.
    pub fn decode_trimmed(&self, ids: &[TokenId]) -> String {
        self.decode(strip_eos_suffix(ids, self.eos_id()))
    }
}

/// Character vocabulary in first-occurrence order, specials appended.
pub fn build_char_vocab(text: &str) -> Result<Vocab> {
    let mut seen = HashSet::new();
    let symbols: Vec<char> = text.chars().filter(|c| seen.insert(*c)).collect();
    if symbols.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Vocab::from_alphabet(&symbols)
}

pub fn strip_eos_suffix(ids: &[TokenId], eos: TokenId) -> &[TokenId] {
    let end = ids.iter().rposition(|&t| t != eos).map_or(0, |i| i + 1);
    &ids[..end]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<Vec<TokenId>>,
    pub split: Split,
}

impl Corpus {
    pub fn new(sequences: Vec<Vec<TokenId>>, split: Split, vocab: &Vocab) -> Result<Self> {
        for seq in &sequences {
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab.size() || t == vocab.mask_id()) {
                return Err(Error::config(format!("corpus token id {bad} is invalid for this vocab")));
            }
        }
        Ok(Corpus { sequences, split })
    }

    /// One document per non-empty line.
    pub fn from_lines(text: &str, vocab: &Vocab, split: Split) -> Result<Self> {
        let seqs = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| vocab.encode(l))
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(seqs, split, vocab)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Synthetic languages with exact membership checks.
///
/// `ModArith` strings are left-to-right chains `d (op d = d)+` where each
/// digit after `=` is the running value modulo `modulus`, e.g. `3+4=7-5=2`.
/// `Brackets` strings are non-empty balanced words over `pairs` bracket kinds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GrammarSpec {
    ModArith { modulus: u32, ops: String, max_len: usize },
    Brackets { pairs: u32, max_len: usize },
}

const BRACKETS: [(char, char); 3] = [('(', ')'), ('[', ']'), ('{', '}')];

impl GrammarSpec {
    pub fn mod_arith(modulus: u32, ops: &str, max_len: usize) -> Self {
        GrammarSpec::ModArith { modulus, ops: ops.to_string(), max_len }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GrammarSpec::ModArith { modulus, ops, max_len } => {
                if !(2..=10).contains(modulus) {
                    return Err(Error::config("mod_arith modulus must be in 2..=10"));
                }
                if ops.is_empty() || ops.chars().any(|c| !"+-*".contains(c)) {
                    return Err(Error::config("mod_arith ops must be a non-empty subset of `+-*`"));
                }
                let uniq: HashSet<char> = ops.chars().collect();
                if uniq.len() != ops.chars().count() {
                    return Err(Error::config("mod_arith ops contain duplicates"));
                }
                if *max_len < 5 {
                    return Err(Error::config("mod_arith max_len must be at least 5"));
                }
            }
            GrammarSpec::Brackets { pairs, max_len } => {
                if !(1..=3).contains(pairs) {
                    return Err(Error::config("brackets pairs must be in 1..=3"));
                }
                if *max_len < 2 {
                    return Err(Error::config("brackets max_len must be at least 2"));
                }
            }
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        match self {
            GrammarSpec::ModArith { max_len, .. } | GrammarSpec::Brackets { max_len, .. } => *max_len,
        }
    }

    pub fn alphabet(&self) -> Vec<char> {
        match self {
            GrammarSpec::ModArith { modulus, ops, .. } => (0..*modulus)
                .map(|d| char::from_digit(d, 10).expect("digit"))
                .chain(ops.chars())
                .chain(std::iter::once('='))
                .collect(),
            GrammarSpec::Brackets { pairs, .. } => {
                BRACKETS[..*pairs as usize].iter().flat_map(|&(o, c)| [o, c]).collect()
            }
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        self.validate()?;
        Vocab::from_alphabet(&self.alphabet())
    }

    /// Membership test on a plain string.
    pub fn accepts(&self, s: &str) -> bool {
        match self {
            GrammarSpec::ModArith { modulus, ops, .. } => check_arith(s, *modulus, ops),
            GrammarSpec::Brackets { pairs, .. } => check_brackets(s, *pairs),
        }
    }

    pub fn sample_string<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match self {
            GrammarSpec::ModArith { modulus, ops, max_len } => {
                let ops: Vec<char> = ops.chars().collect();
                let k_max = (max_len - 1) / 4;
                let k = rng.random_range(1..=k_max);
                let mut acc = rng.random_range(0..*modulus);
                let mut s = String::with_capacity(1 + 4 * k);
                s.push(digit(acc));
                for _ in 0..k {
                    let op = ops[rng.random_range(0..ops.len())];
                    let b = rng.random_range(0..*modulus);
                    acc = apply_op(acc, op, b, *modulus);
                    s.push(op);
                    s.push(digit(b));
                    s.push('=');
                    s.push(digit(acc));
                }
                s
            }
            GrammarSpec::Brackets { pairs, max_len } => {
                let n = rng.random_range(1..=max_len / 2);
                let mut s = String::with_capacity(2 * n);
                let mut stack = Vec::new();
                let mut opens_left = n;
                while opens_left > 0 || !stack.is_empty() {
                    let open = stack.is_empty() || (opens_left > 0 && rng.random_bool(0.5));
                    if open {
                        let kind = BRACKETS[rng.random_range(0..*pairs as usize)];
                        s.push(kind.0);
                        stack.push(kind.1);
                        opens_left -= 1;
                    } else {
                        s.push(stack.pop().expect("non-empty stack"));
                    }
                }
                s
            }
        }
    }
}

fn digit(d: u32) -> char {
    char::from_digit(d, 10).expect("single digit")
}

fn apply_op(a: u32, op: char, b: u32, m: u32) -> u32 {
    match op {
        '+' => (a + b) % m,
        '-' => (a + m - b) % m,
        '*' => (a * b) % m,
        _ => unreachable!("validated op"),
    }
}

fn check_arith(s: &str, modulus: u32, ops: &str) -> bool {
    let cs: Vec<char> = s.chars().collect();
    if cs.len() < 5 || (cs.len() - 1) % 4 != 0 {
        return false;
    }
    let dig = |c: char| c.to_digit(10).filter(|d| *d < modulus);
    let Some(mut acc) = dig(cs[0]) else { return false };
    for chunk in cs[1..].chunks(4) {
        let (op, b, eq, r) = (chunk[0], chunk[1], chunk[2], chunk[3]);
        if !ops.contains(op) || eq != '=' {
            return false;
        }
        let (Some(b), Some(r)) = (dig(b), dig(r)) else { return false };
        acc = apply_op(acc, op, b, modulus);
        if acc != r {
            return false;
        }
    }
    true
}

fn check_brackets(s: &str, pairs: u32) -> bool {
    let kinds = &BRACKETS[..pairs as usize];
    let mut stack = Vec::new();
    for c in s.chars() {
        if let Some(&(_, close)) = kinds.iter().find(|(o, _)| *o == c) {
            stack.push(close);
        } else if kinds.iter().any(|(_, cl)| *cl == c) {
            if stack.pop() != Some(c) {
                return false;
            }
        } else {
            return false;
        }
    }
    !s.is_empty() && stack.is_empty()
}

/// `n` grammar strings, reproducible from `seed`.
pub fn gen_synthetic(spec: &GrammarSpec, n: usize, seed: u64) -> Result<Corpus> {
    use rand::SeedableRng;
    if n == 0 {
        return Err(Error::config("gen_synthetic needs n >= 1"));
    }
    let vocab = spec.vocab()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..n)
        .map(|_| vocab.encode(&spec.sample_string(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(seqs, Split::Train, &vocab)
}

/// True iff the sequence, with its `<eos>` suffix removed, is in the language.
pub fn grammar_check(seq: &[TokenId], spec: &GrammarSpec) -> bool {
    let Ok(vocab) = spec.vocab() else { return false };
    let body = strip_eos_suffix(seq, vocab.eos_id());
    if body.iter().any(|&t| !vocab.is_content(t)) {
        return false;
    }
    spec.accepts(&vocab.decode(body))
}

/// Appends `n_end ~ Uniform{0..=n_max}` end-of-sequence tokens.
pub fn pad_with_eos<R: Rng + ?Sized>(
    response: &[TokenId],
    eos: TokenId,
    n_max: usize,
    rng: &mut R,
) -> (Vec<TokenId>, usize) {
    let n_end = rng.random_range(0..=n_max);
    let mut out = Vec::with_capacity(response.len() + n_end);
    out.extend_from_slice(response);
    out.extend(std::iter::repeat_n(eos, n_end));
    (out, n_end)
}

/// Concatenates documents, each followed by one `<eos>`, and cuts the stream
/// into non-overlapping windows of length `len`. The trailing partial window
/// is dropped.
pub fn pack_sequences(corpus: &Corpus, len: usize, eos: TokenId) -> Result<Vec<Vec<TokenId>>> {
    if len < 2 {
        return Err(Error::config("window length must be at least 2"));
    }
    let stream: Vec<TokenId> = corpus
        .sequences
        .iter()
        .flat_map(|d| d.iter().copied().chain(std::iter::once(eos)))
        .collect();
    if stream.len() < len {
        return Err(Error::InsufficientData { needed: len, have: stream.len() });
    }
    Ok(stream.chunks_exact(len).map(<[TokenId]>::to_vec).collect())
}

/// One fixed-length window per document: the document, a random `<eos>` run
/// from [`pad_with_eos`], then `<eos>` fill up to `len`.
pub fn eos_padded_windows<R: Rng + ?Sized>(
    corpus: &Corpus,
    len: usize,
    eos: TokenId,
    n_max: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TokenId>>> {
    corpus
        .sequences
        .iter()
        .map(|doc| {
            if doc.len() > len {
                return Err(Error::config(format!("document of length {} exceeds window {len}", doc.len())));
            }
            let (mut w, _) = pad_with_eos(doc, eos, n_max, rng);
            w.truncate(len);
            w.resize(len, eos);
            Ok(w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn char_vocab_examples() {
        let v = build_char_vocab("abba").unwrap();
        assert_eq!(v.tokens(), &["a", "b", "<eos>", "<mask>"]);
        assert_eq!((v.size(), v.mask_id(), v.eos_id()), (4, 3, 2));

        let v = build_char_vocab("a").unwrap();
        assert_eq!((v.size(), v.mask_id()), (3, 2));

        assert!(matches!(build_char_vocab(""), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn arith_examples() {
        let spec = GrammarSpec::mod_arith(10, "+", 5);
        let v = spec.vocab().unwrap();
        assert!(grammar_check(&v.encode("3+4=7").unwrap(), &spec));
        assert!(!grammar_check(&v.encode("3+4=8").unwrap(), &spec));
        let mut ids = v.encode("3+4=7").unwrap();
        ids.extend([v.eos_id(), v.eos_id()]);
        assert!(grammar_check(&ids, &spec));
    }

    #[test]
    fn arith_chains_and_malformed() {
        let spec = GrammarSpec::mod_arith(10, "+-*", 61);
        assert!(spec.accepts("3+4=7-9=8*3=4"));
        assert!(!spec.accepts("3+4=7-9=8*3=5"));
        assert!(!spec.accepts("3+4=7-"));
        assert!(!spec.accepts("3"));
        assert!(!spec.accepts(""));
        let v = spec.vocab().unwrap();
        // interior eos or mask is never valid
        let mut ids = v.encode("3+4=7").unwrap();
        ids.insert(2, v.eos_id());
        assert!(!grammar_check(&ids, &spec));
        let mut ids = v.encode("3+4=7").unwrap();
        ids[1] = v.mask_id();
        assert!(!grammar_check(&ids, &spec));
    }

    #[test]
    fn gen_mod10_three_samples() {
        let spec = GrammarSpec::mod_arith(10, "+", 5);
        let corpus = gen_synthetic(&spec, 3, 7).unwrap();
        let v = spec.vocab().unwrap();
        assert_eq!(corpus.len(), 3);
        for seq in &corpus.sequences {
            let s = v.decode(seq);
            let b: Vec<u32> = s.chars().filter_map(|c| c.to_digit(10)).collect();
            assert_eq!(s.len(), 5);
            assert_eq!(&s[1..2], "+");
            assert_eq!(&s[3..4], "=");
            assert_eq!((b[0] + b[1]) % 10, b[2]);
            assert!(grammar_check(seq, &spec));
        }
    }

    #[test]
    fn gen_brackets_prefix_scan() {
        let spec = GrammarSpec::Brackets { pairs: 1, max_len: 20 };
        let corpus = gen_synthetic(&spec, 1, 0).unwrap();
        let s = spec.vocab().unwrap().decode(&corpus.sequences[0]);
        let mut depth = 0i64;
        for c in s.chars() {
            depth += if c == '(' { 1 } else { -1 };
            assert!(depth >= 0);
        }
        assert_eq!(depth, 0);
        assert!(grammar_check(&corpus.sequences[0], &spec));
    }

    #[test]
    fn gen_is_deterministic() {
        let spec = GrammarSpec::mod_arith(10, "+-", 33);
        assert_eq!(gen_synthetic(&spec, 20, 5).unwrap(), gen_synthetic(&spec, 20, 5).unwrap());
    }

    #[test]
    fn gen_rejects_zero() {
        assert!(gen_synthetic(&GrammarSpec::mod_arith(10, "+", 5), 0, 1).is_err());
    }

    #[test]
    fn pad_with_eos_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let resp = vec![0, 1, 2];
        for _ in 0..200 {
            let (out, n) = pad_with_eos(&resp, 9, 50, &mut rng);
            assert!(n <= 50);
            assert_eq!(out.len(), 3 + n);
            assert!(out[3..].iter().all(|&t| t == 9));
        }
        let (out, n) = pad_with_eos(&resp, 9, 0, &mut rng);
        assert_eq!((out, n), (resp, 0));
    }

    #[test]
    fn pad_with_eos_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let sum: usize = (0..draws).map(|_| pad_with_eos(&[], 0, 50, &mut rng).1).sum();
        let mean = sum as f64 / draws as f64;
        // variance of Uniform{0..=50} is ((51^2 - 1) / 12)
        let se = ((51.0f64 * 51.0 - 1.0) / 12.0 / draws as f64).sqrt();
        assert!((mean - 25.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn packing_examples() {
        let v = build_char_vocab("abc").unwrap();
        let eos = v.eos_id();
        let c = Corpus::new(vec![vec![0, 1, 2], vec![2, 1, 0, 0]], Split::Train, &v).unwrap();
        let w = pack_sequences(&c, 4, eos).unwrap();
        assert_eq!(w, vec![vec![0, 1, 2, eos], vec![2, 1, 0, 0]]);

        let c = Corpus::new(vec![vec![0, 1, 2]], Split::Train, &v).unwrap();
        assert_eq!(pack_sequences(&c, 4, eos).unwrap(), vec![vec![0, 1, 2, eos]]);

        let c = Corpus::new(vec![vec![0]], Split::Train, &v).unwrap();
        assert!(matches!(pack_sequences(&c, 16, eos), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn corpus_rejects_mask_tokens() {
        let v = build_char_vocab("ab").unwrap();
        assert!(Corpus::new(vec![vec![0, v.mask_id()]], Split::Train, &v).is_err());
        assert!(Corpus::new(vec![vec![7]], Split::Train, &v).is_err());
    }

    #[test]
    fn vocab_serde_roundtrip() {
        let v = GrammarSpec::mod_arith(7, "+*", 9).vocab().unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&s).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"{"tokens":["a","<mask>","<eos>"]}"#).is_err());
    }
}
