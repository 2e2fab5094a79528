//! BPE tokenizer with byte-fallback: whitespace pre-tokenization with a
//! word-boundary marker, character-coverage control, greedy frequency
//! merging, and lossless encode/decode for arbitrary UTF-8.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The sentencepiece-style word-boundary marker (U+2581).
pub const MARKER: char = '\u{2581}';

const N_SPECIALS: usize = 3;
const N_BYTES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub vocab_size: usize,
    pub character_coverage: f64,
    pub byte_fallback: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            vocab_size: 32_768,
            character_coverage: 0.9995,
            byte_fallback: true,
            seed: 0,
        }
    }
}

/// Serialized tokenizer: ids are dense, with BOS = 0, EOS = 1, PAD = 2,
/// byte tokens 3..=258, then alphabet and merged tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerModel {
    pub version: u32,
    pub word_boundary_marker: char,
    pub byte_fallback: bool,
    pub bos_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
    /// Piece strings for non-special, non-byte ids, indexed from `text_base()`.
    pub vocab: Vec<String>,
    pub merges: Vec<(String, String)>,
    #[serde(skip)]
    token_ids: HashMap<String, u32>,
    #[serde(skip)]
    merge_ranks: HashMap<(String, String), usize>,
}

/// One unit of the in-flight encoding: either a text piece (marker, covered
/// character, or merged token) or a raw fallback byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Sym {
    Piece(String),
    Byte(u8),
}

impl TokenizerModel {
    pub fn from_parts(vocab: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut model = TokenizerModel {
            version: 1,
            word_boundary_marker: MARKER,
            byte_fallback: true,
            bos_id: 0,
            eos_id: 1,
            pad_id: 2,
            vocab,
            merges,
            token_ids: HashMap::new(),
            merge_ranks: HashMap::new(),
        };
        model.rebuild()?;
        Ok(model)
    }

    /// First id of the text-piece range.
    pub fn text_base(&self) -> u32 {
        (N_SPECIALS + if self.byte_fallback { N_BYTES } else { 0 }) as u32
    }

    pub fn vocab_size(&self) -> usize {
        self.text_base() as usize + self.vocab.len()
    }

    fn rebuild(&mut self) -> Result<()> {
        self.token_ids.clear();
        let base = self.text_base();
        for (i, tok) in self.vocab.iter().enumerate() {
            if self.token_ids.insert(tok.clone(), base + i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate vocab entry {tok:?}")));
            }
        }
        self.merge_ranks.clear();
        for (rank, (l, r)) in self.merges.iter().enumerate() {
            let joined = format!("{l}{r}");
            if !self.token_ids.contains_key(&joined) {
                return Err(Error::Tokenizer(format!(
                    "merge output {joined:?} missing from vocab"
                )));
            }
            self.merge_ranks.entry((l.clone(), r.clone())).or_insert(rank);
        }
        Ok(())
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.token_ids.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<String> {
        let base = self.text_base();
        if id == self.bos_id {
            Some("<s>".into())
        } else if id == self.eos_id {
            Some("</s>".into())
        } else if id == self.pad_id {
            Some("<pad>".into())
        } else if self.byte_fallback && id < base {
            Some(format!("<0x{:02X}>", id as usize - N_SPECIALS))
        } else {
            self.vocab.get((id - base) as usize).cloned()
        }
    }

    fn sym_id(&self, sym: &Sym) -> u32 {
        match sym {
            Sym::Byte(b) => N_SPECIALS as u32 + *b as u32,
            Sym::Piece(s) => self.token_ids[s],
        }
    }

    /// Split text into pre-tokens of symbols. Spaces become marker symbols
    /// that start a new pre-token; a dummy marker is prepended so encoding is
    /// position-independent; literal marker characters and uncovered
    /// characters fall back to raw bytes; non-space whitespace becomes its
    /// own single-symbol pre-token.
    fn symbolize(&self, text: &str) -> Result<Vec<Vec<Sym>>> {
        let mut pre_tokens: Vec<Vec<Sym>> = Vec::new();
        if text.is_empty() {
            return Ok(pre_tokens);
        }
        let fallback = |ch: char, out: &mut Vec<Sym>| -> Result<()> {
            if !self.byte_fallback {
                return Err(Error::Tokenizer(format!(
                    "character {ch:?} not in vocabulary and byte fallback is disabled"
                )));
            }
            let mut buf = [0u8; 4];
            for &b in ch.encode_utf8(&mut buf).as_bytes() {
                out.push(Sym::Byte(b));
            }
            Ok(())
        };
        let mut current = vec![Sym::Piece(MARKER.to_string())];
        for ch in text.chars() {
            if ch == ' ' {
                if !current.is_empty() {
                    pre_tokens.push(std::mem::take(&mut current));
                }
                current = vec![Sym::Piece(MARKER.to_string())];
            } else if ch != MARKER && ch.is_whitespace() {
                // Non-space whitespace is its own single-character pre-token.
                if !current.is_empty() {
                    pre_tokens.push(std::mem::take(&mut current));
                }
                let mut own = Vec::new();
                if self.token_ids.contains_key(ch.to_string().as_str()) {
                    own.push(Sym::Piece(ch.to_string()));
                } else {
                    fallback(ch, &mut own)?;
                }
                pre_tokens.push(own);
            } else if ch == MARKER || !self.token_ids.contains_key(ch.to_string().as_str()) {
                // Literal marker characters always go through bytes so the
                // marker stays an unambiguous space stand-in.
                fallback(ch, &mut current)?;
            } else {
                current.push(Sym::Piece(ch.to_string()));
            }
        }
        if !current.is_empty() {
            pre_tokens.push(current);
        }
        Ok(pre_tokens)
    }

    /// Apply merges in rank order within one pre-token.
    fn merge_pre_token(&self, mut syms: Vec<Sym>) -> Vec<Sym> {
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..syms.len().saturating_sub(1) {
                if let (Sym::Piece(a), Sym::Piece(b)) = (&syms[i], &syms[i + 1]) {
                    if let Some(&rank) = self.merge_ranks.get(&(a.clone(), b.clone())) {
                        if best.is_none_or(|(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let joined = format!("{l}{r}");
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                let matches = i + 1 < syms.len()
                    && matches!((&syms[i], &syms[i + 1]),
                        (Sym::Piece(a), Sym::Piece(b)) if a == l && b == r);
                if matches {
                    out.push(Sym::Piece(joined.clone()));
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for pre in self.symbolize(text)? {
            for sym in self.merge_pre_token(pre) {
                ids.push(self.sym_id(&sym));
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let base = self.text_base();
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(Error::TokenOutOfRange(id as usize, self.vocab_size()));
            }
            if id == self.bos_id || id == self.eos_id || id == self.pad_id {
                continue;
            }
            if self.byte_fallback && id < base {
                bytes.push((id as usize - N_SPECIALS) as u8);
            } else {
                let piece = &self.vocab[(id - base) as usize];
                for ch in piece.chars() {
                    if ch == MARKER {
                        bytes.push(b' ');
                    } else {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        let mut text = String::from_utf8(bytes)
            .map_err(|e| Error::Tokenizer(format!("decoded bytes are not UTF-8: {e}")))?;
        // Remove the dummy prefix space added during encoding.
        if text.starts_with(' ') {
            text.remove(0);
        }
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut model: TokenizerModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.rebuild()?;
        Ok(model)
    }
}

/// Count whitespace-split words: maximal runs of non-whitespace codepoints.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Tokens per whitespace-split word.
pub fn fertility(model: &TokenizerModel, text: &str) -> Result<f64> {
    let words = word_count(text);
    if words == 0 {
        return Err(Error::Tokenizer("fertility of a text with no words".into()));
    }
    Ok(model.encode(text)?.len() as f64 / words as f64)
}

/// Train a BPE tokenizer: coverage-filtered alphabet, then greedy
/// highest-frequency pair merging (ties broken by lexicographic pair order)
/// until the vocabulary budget is exhausted.
pub fn train_bpe(corpus: &[String], cfg: &TrainerConfig) -> Result<TokenizerModel> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }
    if !(cfg.character_coverage > 0.0 && cfg.character_coverage <= 1.0) {
        return Err(Error::Tokenizer(format!(
            "character_coverage must lie in (0, 1], got {}",
            cfg.character_coverage
        )));
    }

    // Character frequencies over the corpus; the marker and literal marker
    // characters are handled structurally, not through coverage.
    let mut char_freq: HashMap<char, u64> = HashMap::new();
    for line in corpus {
        for ch in line.chars() {
            if ch != ' ' && ch != MARKER {
                *char_freq.entry(ch).or_insert(0) += 1;
            }
        }
    }
    let total: u64 = char_freq.values().sum();
    let mut by_freq: Vec<(char, u64)> = char_freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut alphabet: Vec<char> = Vec::new();
    let mut acc = 0u64;
    let need = (cfg.character_coverage * total as f64).ceil() as u64;
    for (ch, f) in by_freq {
        if acc >= need {
            break;
        }
        alphabet.push(ch);
        acc += f;
    }
    alphabet.sort_unstable();

    let mut vocab: Vec<String> = vec![MARKER.to_string()];
    vocab.extend(alphabet.iter().map(|c| c.to_string()));
    let base = N_SPECIALS + if cfg.byte_fallback { N_BYTES } else { 0 };
    if cfg.vocab_size < base + vocab.len() {
        return Err(Error::Tokenizer(format!(
            "vocab_size {} cannot hold {} specials/bytes plus an alphabet of {}",
            cfg.vocab_size,
            base,
            vocab.len()
        )));
    }

    let mut model = TokenizerModel::from_parts(vocab, Vec::new())?;
    model.byte_fallback = cfg.byte_fallback;

    // Pre-token (word) counts in symbol form.
    let mut words: HashMap<Vec<Sym>, u64> = HashMap::new();
    for line in corpus {
        for pre in model.symbolize(line)? {
            *words.entry(pre).or_insert(0) += 1;
        }
    }

    while model.vocab_size() < cfg.vocab_size {
        let mut pair_freq: HashMap<(String, String), u64> = HashMap::new();
        for (syms, &count) in &words {
            for w in syms.windows(2) {
                if let (Sym::Piece(a), Sym::Piece(b)) = (&w[0], &w[1]) {
                    *pair_freq.entry((a.clone(), b.clone())).or_insert(0) += count;
                }
            }
        }
        let Some((pair, _)) = pair_freq
            .into_iter()
            .max_by(|(pa, fa), (pb, fb)| fa.cmp(fb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let joined = format!("{}{}", pair.0, pair.1);
        if model.token_ids.get(&joined).is_none() {
            model.vocab.push(joined.clone());
            model
                .token_ids
                .insert(joined.clone(), (model.vocab_size() - 1) as u32);
        }
        let rank = model.merges.len();
        model.merges.push(pair.clone());
        model.merge_ranks.entry(pair.clone()).or_insert(rank);

        let mut next: HashMap<Vec<Sym>, u64> = HashMap::with_capacity(words.len());
        for (syms, count) in words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                let matches = i + 1 < syms.len()
                    && matches!((&syms[i], &syms[i + 1]),
                        (Sym::Piece(a), Sym::Piece(b)) if *a == pair.0 && *b == pair.1);
                if matches {
                    out.push(Sym::Piece(joined.clone()));
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *next.entry(out).or_insert(0) += count;
        }
        words = next;
    }
    Ok(model)
}
