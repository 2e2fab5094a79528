//! Tokenizer-independent evaluation (word-normalized NLL) and weight
//! analysis reports (magnitude histograms and parameter-change summaries
//! split into RMSNorm vs other parameters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_loss, LayerKind, Model};
use crate::pack::{PackedBlock, PackingMode};
use crate::precision::PrecisionPolicy;
use crate::tokenizer::{word_count, TokenizerModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll_sum: f64,
    pub token_count: usize,
    pub word_count: usize,
    pub nll_per_token: f64,
    pub nll_per_word: f64,
    pub chunk_ids: Vec<usize>,
}

/// Sum per-token NLL over every chunk and normalize by the whitespace-split
/// word count of the raw text. Each chunk is evaluated BOS-first with a
/// one-token overlap between windows, so every encoded token is predicted
/// exactly once and `token_count` equals the encoded length.
pub fn word_normalized_nll(
    model: &Model,
    tokenizer: &TokenizerModel,
    chunks: &[String],
    policy: &PrecisionPolicy,
) -> Result<EvalReport> {
    if model.cfg.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Evaluation(format!(
            "model vocab {} does not match tokenizer vocab {}",
            model.cfg.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let ctx = model.cfg.context_length;
    let mut nll_sum = 0.0;
    let mut token_count = 0usize;
    let mut words = 0usize;
    let mut chunk_ids = Vec::with_capacity(chunks.len());
    for (id, chunk) in chunks.iter().enumerate() {
        let chunk_words = word_count(chunk);
        if chunk_words == 0 {
            return Err(Error::Evaluation(format!("chunk {id} contains no words")));
        }
        let mut seq = vec![tokenizer.bos_id];
        seq.extend(tokenizer.encode(chunk)?);
        let mut start = 0;
        while start + 1 < seq.len() {
            let end = (start + ctx).min(seq.len());
            let block = PackedBlock {
                token_ids: seq[start..end].to_vec(),
                document_spans: vec![(0, end - start)],
                packing_mode: PackingMode::EosConcat,
                pad_id: tokenizer.pad_id,
            };
            let (nll, count, _) = forward_loss(model, &block, policy)?;
            nll_sum += nll;
            token_count += count;
            // Overlap by one token so the next window's first target has
            // context.
            start = end - 1;
        }
        words += chunk_words;
        chunk_ids.push(id);
    }
    if token_count == 0 {
        return Err(Error::Evaluation("no tokens to evaluate".into()));
    }
    Ok(EvalReport {
        nll_sum,
        token_count,
        word_count: words,
        nll_per_token: nll_sum / token_count as f64,
        nll_per_word: nll_sum / words as f64,
        chunk_ids,
    })
}

pub const DEFAULT_BINS: usize = 64;
pub const HIST_LO: f64 = 1e-6;
pub const HIST_HI: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub count: usize,
    pub mean_abs: f64,
    pub mean_abs_change: Option<f64>,
    /// Log-spaced bin edges over [HIST_LO, HIST_HI]; `histogram` has two
    /// extra buckets for |w| below the first and at/above the last edge.
    pub bin_edges: Vec<f64>,
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightReport {
    pub groups: Vec<GroupReport>,
}

impl WeightReport {
    /// One CSV row per bin per group: group, bin_lo, bin_hi, count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,bin_lo,bin_hi,count\n");
        for g in &self.groups {
            let mut edges = vec![0.0];
            edges.extend(&g.bin_edges);
            edges.push(f64::INFINITY);
            for (i, &c) in g.histogram.iter().enumerate() {
                out.push_str(&format!("{},{:e},{:e},{}\n", g.group, edges[i], edges[i + 1], c));
            }
        }
        out
    }
}

fn bin_edges(bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| HIST_LO * (HIST_HI / HIST_LO).powf(i as f64 / bins as f64))
        .collect()
}

fn group_name(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::RmsNorm => "rmsnorm",
        _ => "other",
    }
}

fn build_report(model: &Model, bins: usize, with_change: bool) -> Result<WeightReport> {
    let edges = bin_edges(bins);
    let mut groups: Vec<GroupReport> = ["rmsnorm", "other"]
        .iter()
        .map(|&g| GroupReport {
            group: g.to_string(),
            count: 0,
            mean_abs: 0.0,
            mean_abs_change: with_change.then_some(0.0),
            bin_edges: edges.clone(),
            histogram: vec![0; bins + 2],
        })
        .collect();
    for p in &model.params {
        let gi = if group_name(p.layer_kind) == "rmsnorm" { 0 } else { 1 };
        let g = &mut groups[gi];
        let snapshot = if with_change {
            Some(p.init_snapshot.as_ref().ok_or_else(|| {
                Error::Evaluation(format!("parameter {} has no init snapshot", p.name))
            })?)
        } else {
            None
        };
        for (k, &w) in p.values.data.iter().enumerate() {
            let a = w.abs();
            g.count += 1;
            g.mean_abs += a;
            if let (Some(change), Some(snap)) = (g.mean_abs_change.as_mut(), snapshot) {
                *change += (w - snap.data[k]).abs();
            }
            let bucket = if a < edges[0] {
                0
            } else if a >= edges[bins] {
                bins + 1
            } else {
                1 + edges[1..=bins].partition_point(|&e| e <= a)
            };
            g.histogram[bucket] += 1;
        }
    }
    for g in &mut groups {
        if g.count > 0 {
            g.mean_abs /= g.count as f64;
            if let Some(c) = g.mean_abs_change.as_mut() {
                *c /= g.count as f64;
            }
        }
    }
    Ok(WeightReport { groups })
}

/// Magnitude histogram of |w| per group (RMSNorm vs other).
pub fn weight_histogram(model: &Model, bins: usize) -> Result<WeightReport> {
    build_report(model, bins, false)
}

/// Mean |w_final - w_init| per group; every parameter needs an init
/// snapshot.
pub fn param_change(model: &Model, bins: usize) -> Result<WeightReport> {
    build_report(model, bins, true)
}
