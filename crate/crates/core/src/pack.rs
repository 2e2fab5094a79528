//! Document packing into fixed-size blocks and the causal /
//! cross-document-masked attention patterns over those blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PackingMode {
    /// Concatenate documents separated by EOS; one contiguous span per block.
    EosConcat,
    /// Prepend BOS to each document and keep true span boundaries so the
    /// attention mask can forbid cross-document attention.
    BosMasked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

/// A fixed-length training block. `document_spans` are disjoint, ordered
/// half-open `(start, end)` ranges covering the non-pad prefix; everything
/// from the last span's end onward is padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBlock {
    pub token_ids: Vec<u32>,
    pub document_spans: Vec<(usize, usize)>,
    pub packing_mode: PackingMode,
    pub pad_id: u32,
}

impl PackedBlock {
    /// Number of real (non-pad) tokens.
    pub fn used(&self) -> usize {
        self.document_spans.last().map_or(0, |s| s.1)
    }

    /// Index of the span containing `pos`, if any.
    pub fn span_of(&self, pos: usize) -> Option<usize> {
        self.document_spans
            .iter()
            .position(|&(s, e)| pos >= s && pos < e)
    }

    /// Positions with a next-token target inside the same document span.
    pub fn valid_targets(&self) -> Vec<(usize, u32)> {
        let mut out = Vec::new();
        for i in 0..self.token_ids.len().saturating_sub(1) {
            let same_span = match self.packing_mode {
                PackingMode::EosConcat => i + 1 < self.used(),
                PackingMode::BosMasked => {
                    matches!((self.span_of(i), self.span_of(i + 1)), (Some(a), Some(b)) if a == b)
                }
            };
            if same_span {
                out.push((i, self.token_ids[i + 1]));
            }
        }
        out
    }
}

/// Greedily pack documents into `context_length`-sized blocks.
pub fn pack_documents(
    docs: &[Vec<u32>],
    mode: PackingMode,
    context_length: usize,
    specials: SpecialTokens,
) -> Result<Vec<PackedBlock>> {
    if context_length < 2 {
        return Err(Error::InvalidConfig(format!(
            "context_length must be at least 2, got {context_length}"
        )));
    }
    if docs.iter().any(Vec::is_empty) {
        return Err(Error::InvalidConfig("empty document".into()));
    }
    // One flat stream of (token, document index); EosConcat treats the whole
    // stream as a single document.
    let mut stream: Vec<(u32, usize)> = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        match mode {
            PackingMode::EosConcat => {
                stream.extend(doc.iter().map(|&t| (t, 0)));
                stream.push((specials.eos, 0));
            }
            PackingMode::BosMasked => {
                stream.push((specials.bos, d));
                stream.extend(doc.iter().map(|&t| (t, d)));
            }
        }
    }

    let mut blocks = Vec::new();
    for chunk in stream.chunks(context_length) {
        let mut token_ids: Vec<u32> = chunk.iter().map(|&(t, _)| t).collect();
        let mut spans = Vec::new();
        let mut start = 0;
        for i in 1..chunk.len() {
            if chunk[i].1 != chunk[i - 1].1 {
                spans.push((start, i));
                start = i;
            }
        }
        spans.push((start, chunk.len()));
        token_ids.resize(context_length, specials.pad);
        blocks.push(PackedBlock {
            token_ids,
            document_spans: spans,
            packing_mode: mode,
            pad_id: specials.pad,
        });
    }
    Ok(blocks)
}

/// Row-major `T x T` boolean mask; entry `(i, j)` is true when position `i`
/// may attend to position `j`. Padding positions are never valid keys.
pub fn build_attention_mask(block: &PackedBlock) -> Vec<bool> {
    let t = block.token_ids.len();
    let used = block.used();
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            if j >= used {
                continue;
            }
            let allowed = match block.packing_mode {
                PackingMode::EosConcat => true,
                PackingMode::BosMasked => {
                    matches!((block.span_of(i), block.span_of(j)), (Some(a), Some(b)) if a == b)
                }
            };
            mask[i * t + j] = allowed;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    const SP: SpecialTokens = SpecialTokens {
        bos: 1,
        eos: 2,
        pad: 0,
    };

    #[test]
    fn eos_concat_spills_into_two_blocks() {
        let docs = vec![vec![10; 5], vec![11; 3]];
        let blocks = pack_documents(&docs, PackingMode::EosConcat, 8, SP).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].token_ids, vec![10, 10, 10, 10, 10, 2, 11, 11]);
        assert_eq!(blocks[1].token_ids, vec![11, 2, 0, 0, 0, 0, 0, 0]);
        assert_eq!(blocks[0].document_spans, vec![(0, 8)]);
        assert_eq!(blocks[1].document_spans, vec![(0, 2)]);
        assert_eq!(blocks[1].used(), 2);
    }

    #[test]
    fn bos_forces_exact_length_doc_into_two_blocks() {
        let docs = vec![vec![7; 8]];
        let blocks = pack_documents(&docs, PackingMode::BosMasked, 8, SP).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].token_ids[0], SP.bos);
        assert_eq!(blocks[1].used(), 1);
    }

    #[test]
    fn empty_doc_list_gives_no_blocks() {
        let blocks = pack_documents(&[], PackingMode::EosConcat, 8, SP).unwrap();
        assert!(blocks.is_empty());
    }

    #[test]
    fn rejects_tiny_context_and_empty_docs() {
        assert!(pack_documents(&[vec![1]], PackingMode::EosConcat, 1, SP).is_err());
        assert!(pack_documents(&[vec![]], PackingMode::EosConcat, 8, SP).is_err());
    }

    #[test]
    fn spans_are_disjoint_ordered_and_cover_used_prefix() {
        let docs = vec![vec![5; 3], vec![6; 4], vec![7; 9]];
        for mode in [PackingMode::EosConcat, PackingMode::BosMasked] {
            for block in pack_documents(&docs, mode, 8, SP).unwrap() {
                let mut cursor = 0;
                for &(s, e) in &block.document_spans {
                    assert_eq!(s, cursor);
                    assert!(e > s);
                    cursor = e;
                }
                assert_eq!(cursor, block.used());
                assert!(cursor <= block.token_ids.len());
                for p in cursor..block.token_ids.len() {
                    assert_eq!(block.token_ids[p], SP.pad);
                }
            }
        }
    }

    #[test]
    fn eos_concat_mask_is_lower_triangular() {
        let block = PackedBlock {
            token_ids: vec![3, 4, 5, 6],
            document_spans: vec![(0, 4)],
            packing_mode: PackingMode::EosConcat,
            pad_id: 0,
        };
        let mask = build_attention_mask(&block);
        for i in 0..4 {
            let allowed: usize = (0..4).filter(|&j| mask[i * 4 + j]).count();
            assert_eq!(allowed, i + 1);
            for j in 0..4 {
                assert_eq!(mask[i * 4 + j], j <= i);
            }
        }
    }

    #[test]
    fn bos_masked_blocks_cross_document_attention() {
        let block = PackedBlock {
            token_ids: vec![1, 5, 1, 6],
            document_spans: vec![(0, 2), (2, 4)],
            packing_mode: PackingMode::BosMasked,
            pad_id: 0,
        };
        let mask = build_attention_mask(&block);
        assert!(!mask[3 * 4 + 1]);
        assert!(mask[3 * 4 + 2]);
        assert!(mask[0]);
        assert!(!mask[1 * 4 + 2]);
    }

    #[test]
    fn pads_are_never_attention_keys_or_targets() {
        let docs = vec![vec![9; 3]];
        let blocks = pack_documents(&docs, PackingMode::EosConcat, 6, SP).unwrap();
        let block = &blocks[0];
        assert_eq!(block.used(), 4);
        let mask = build_attention_mask(block);
        for i in 0..6 {
            for j in 4..6 {
                assert!(!mask[i * 6 + j]);
            }
        }
        let targets = block.valid_targets();
        assert_eq!(targets.len(), 3);
        assert!(targets.iter().all(|&(i, _)| i + 1 < 4));
    }
}
