//! Embedding re-initialization for a swapped tokenizer: the fixed/fitted
//! normal baselines, random assignment, exact-overlap copying, and a
//! FOCUS-style convex combination guided by PPMI co-occurrence vectors,
//! plus the short embedding-only warmup.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward_loss, GradientSet, LayerKind, Model};
use crate::optim::{adamw_step_masked, AdamWConfig, OptimizerState};
use crate::pack::PackedBlock;
use crate::precision::PrecisionPolicy;
use crate::rng::substream;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitMethod {
    /// i.i.d. Normal(0, 0.02).
    NormalFixed,
    /// Normal with the old matrix's pooled mean and standard deviation.
    FittedNormal,
    /// Old rows permuted onto new tokens; any remainder from Normal(0, 0.02).
    RandomAssign,
    /// Exact-string-overlap tokens copy their old row; others FittedNormal.
    OverlapHeuristic,
    /// Overlap tokens copy; non-overlap rows are convex combinations of
    /// overlap rows weighted by softmax-normalized cosine similarity in the
    /// auxiliary space over the top-k neighbors.
    FocusLike { top_k: usize, temperature: f64 },
}

impl InitMethod {
    pub fn focus_like() -> Self {
        InitMethod::FocusLike {
            top_k: 10,
            temperature: 0.1,
        }
    }
}

/// Per-token dense vectors learned from the target corpus; only tokens that
/// occur in the aux corpus have a vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxEmbeddings {
    pub window: usize,
    pub dim: usize,
    pub vectors: HashMap<u32, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct InitResult {
    pub embeddings: Matrix,
    /// Set when FocusLike found no vocabulary overlap and fell back to
    /// OverlapHeuristic semantics.
    pub overlap_fallback: bool,
}

fn pooled_stats(m: &Matrix) -> (f64, f64) {
    let n = m.data.len() as f64;
    let mean = m.data.iter().sum::<f64>() / n;
    let var = m.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Build the new embedding matrix for `new_vocab` from the old tokenizer's
/// matrix. `aux` is required by `FocusLike` and ignored otherwise; token ids
/// index `aux.vectors` by position in `new_vocab`.
pub fn init_embeddings(
    method: InitMethod,
    old_vocab: &[String],
    old_e: &Matrix,
    new_vocab: &[String],
    seed: u64,
    aux: Option<&AuxEmbeddings>,
) -> Result<InitResult> {
    if old_e.rows != old_vocab.len() {
        return Err(Error::EmbeddingInit(format!(
            "old matrix has {} rows for {} tokens",
            old_e.rows,
            old_vocab.len()
        )));
    }
    let d = old_e.cols;
    let mut rng = substream(seed, "embed-init");
    let (mean, std) = pooled_stats(old_e);
    let fixed = Normal::new(0.0, 0.02).expect("valid normal");
    let fitted = Normal::new(mean, std.max(1e-12)).expect("valid normal");
    let old_ids: HashMap<&str, usize> = old_vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut out = Matrix::zeros(new_vocab.len(), d);
    let overlap_fallback = false;
    match method {
        InitMethod::NormalFixed => {
            for v in &mut out.data {
                *v = fixed.sample(&mut rng);
            }
        }
        InitMethod::FittedNormal => {
            for v in &mut out.data {
                *v = fitted.sample(&mut rng);
            }
        }
        InitMethod::RandomAssign => {
            let mut assignment: Vec<usize> = (0..old_e.rows).collect();
            assignment.shuffle(&mut rng);
            for (i, row) in (0..new_vocab.len()).map(|i| (i, i)) {
                if row < assignment.len() {
                    out.row_mut(i).copy_from_slice(old_e.row(assignment[row]));
                } else {
                    for v in out.row_mut(i) {
                        *v = fixed.sample(&mut rng);
                    }
                }
            }
        }
        InitMethod::OverlapHeuristic => {
            for (i, tok) in new_vocab.iter().enumerate() {
                match old_ids.get(tok.as_str()) {
                    Some(&old_row) => out.row_mut(i).copy_from_slice(old_e.row(old_row)),
                    None => {
                        for v in out.row_mut(i) {
                            *v = fitted.sample(&mut rng);
                        }
                    }
                }
            }
        }
        InitMethod::FocusLike { top_k, temperature } => {
            let aux = aux.ok_or_else(|| {
                Error::EmbeddingInit("FocusLike requires auxiliary embeddings".into())
            })?;
            let overlap: Vec<(usize, usize)> = new_vocab
                .iter()
                .enumerate()
                .filter_map(|(i, tok)| old_ids.get(tok.as_str()).map(|&o| (i, o)))
                .collect();
            if overlap.is_empty() {
                let mut fallback = init_embeddings(
                    InitMethod::OverlapHeuristic,
                    old_vocab,
                    old_e,
                    new_vocab,
                    seed,
                    None,
                )?;
                fallback.overlap_fallback = true;
                return Ok(fallback);
            }
            // Overlap anchors that also have an aux vector can donate mass.
            let anchors: Vec<(usize, usize)> = overlap
                .iter()
                .copied()
                .filter(|&(i, _)| aux.vectors.contains_key(&(i as u32)))
                .collect();
            let overlap_set: HashSet<usize> = overlap.iter().map(|&(i, _)| i).collect();
            for (i, tok) in new_vocab.iter().enumerate() {
                if overlap_set.contains(&i) {
                    let old_row = old_ids[tok.as_str()];
                    out.row_mut(i).copy_from_slice(old_e.row(old_row));
                    continue;
                }
                let focusable = aux.vectors.get(&(i as u32)).filter(|_| !anchors.is_empty());
                match focusable {
                    Some(vec_i) => {
                        let mut sims: Vec<(f64, usize)> = anchors
                            .iter()
                            .map(|&(a, old_row)| {
                                (cosine(vec_i, &aux.vectors[&(a as u32)]), old_row)
                            })
                            .collect();
                        sims.sort_by(|a, b| {
                            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                        });
                        sims.truncate(top_k.max(1));
                        let m = sims.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
                        let weights: Vec<f64> =
                            sims.iter().map(|s| ((s.0 - m) / temperature).exp()).collect();
                        let z: f64 = weights.iter().sum();
                        let row = out.row_mut(i);
                        for (w, &(_, old_row)) in weights.iter().zip(&sims) {
                            for (c, &e) in old_e.row(old_row).iter().enumerate() {
                                row[c] += w / z * e;
                            }
                        }
                    }
                    None => {
                        for v in out.row_mut(i) {
                            *v = fitted.sample(&mut rng);
                        }
                    }
                }
            }
        }
    }
    Ok(InitResult {
        embeddings: out,
        overlap_fallback,
    })
}

/// PPMI-weighted co-occurrence vectors over a symmetric context window,
/// length-normalized. Vectors live in vocab-sized space unless `dim` is
/// smaller, in which case a seeded random projection compresses them.
pub fn train_aux_embeddings(
    sequences: &[Vec<u32>],
    vocab_size: usize,
    window: usize,
    dim: usize,
    seed: u64,
) -> Result<AuxEmbeddings> {
    if sequences.iter().all(Vec::is_empty) {
        return Err(Error::EmbeddingInit("empty aux corpus".into()));
    }
    if window == 0 {
        return Err(Error::EmbeddingInit("window must be positive".into()));
    }
    let mut cooc: HashMap<(u32, u32), f64> = HashMap::new();
    let mut row_tot: HashMap<u32, f64> = HashMap::new();
    let mut total = 0.0;
    for seq in sequences {
        for (i, &a) in seq.iter().enumerate() {
            if a as usize >= vocab_size {
                return Err(Error::TokenOutOfRange(a as usize, vocab_size));
            }
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(seq.len().saturating_sub(1));
            for j in lo..=hi {
                if j == i {
                    continue;
                }
                let b = seq[j];
                *cooc.entry((a, b)).or_insert(0.0) += 1.0;
                *row_tot.entry(a).or_insert(0.0) += 1.0;
                total += 1.0;
            }
        }
    }
    let mut vectors: HashMap<u32, Vec<f64>> = HashMap::new();
    for (&(a, b), &n_ab) in &cooc {
        let pmi = (n_ab * total / (row_tot[&a] * row_tot[&b])).ln();
        if pmi > 0.0 {
            vectors.entry(a).or_insert_with(|| vec![0.0; vocab_size])[b as usize] = pmi;
        }
    }
    // Tokens that co-occurred but have no positive PMI entry still get a
    // (zero) vector so neighbors can be ranked consistently.
    for &a in row_tot.keys() {
        vectors.entry(a).or_insert_with(|| vec![0.0; vocab_size]);
    }
    let out_dim = dim.min(vocab_size).max(1);
    if out_dim < vocab_size {
        let mut rng = substream(seed, "aux-projection");
        let normal = Normal::new(0.0, 1.0 / (out_dim as f64).sqrt()).expect("valid normal");
        let proj = Matrix::from_fn(out_dim, vocab_size, |_, _| normal.sample(&mut rng));
        for v in vectors.values_mut() {
            *v = proj.matvec(v);
        }
    }
    for v in vectors.values_mut() {
        let n = dot(v, v).sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(AuxEmbeddings {
        window,
        dim: out_dim,
        vectors,
    })
}

/// Train only the embedding and unembedding matrices for `steps` optimizer
/// steps, cycling through `blocks`; every other parameter stays bit-identical.
pub fn embedding_warmup(
    model: &mut Model,
    blocks: &[PackedBlock],
    steps: usize,
    policy: &PrecisionPolicy,
    opt_cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if steps == 0 || blocks.is_empty() {
        return Ok(());
    }
    let mask: Vec<bool> = model
        .params
        .iter()
        .map(|p| matches!(p.layer_kind, LayerKind::Embedding | LayerKind::Unembedding))
        .collect();
    let mut state = OptimizerState::new(model, policy);
    for step in 0..steps {
        let block = &blocks[step % blocks.len()];
        let (_, count, mut tape) = forward_loss(model, block, policy)?;
        let grads = if count == 0 {
            GradientSet {
                grads: model
                    .params
                    .iter()
                    .map(|p| Matrix::zeros(p.values.rows, p.values.cols))
                    .collect(),
            }
        } else {
            backward(model, &mut tape, policy)?
        };
        adamw_step_masked(model, &grads, &mut state, opt_cfg, policy, lr, Some(&mask))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::pack::{pack_documents, PackingMode, SpecialTokens};

    fn vocab(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn old_matrix(rows: usize, cols: usize) -> Matrix {
        // Deterministic, mildly varied entries.
        Matrix::from_fn(rows, cols, |r, c| {
            0.01 + 0.005 * ((r * 31 + c * 7) % 13) as f64 - 0.02
        })
    }

    #[test]
    fn overlap_copies_rows_bit_exact() {
        let old_v = vocab(&["alpha", "beta", "gamma"]);
        let old_e = old_matrix(3, 4);
        let new_v = vocab(&["beta", "delta", "alpha"]);
        let res = init_embeddings(InitMethod::OverlapHeuristic, &old_v, &old_e, &new_v, 5, None)
            .unwrap();
        assert_eq!(res.embeddings.row(0), old_e.row(1));
        assert_eq!(res.embeddings.row(2), old_e.row(0));
        assert!(!res.overlap_fallback);
    }

    #[test]
    fn random_assign_is_a_permutation_at_equal_sizes() {
        let old_v = vocab(&["a", "b", "c", "d"]);
        let old_e = old_matrix(4, 3);
        let new_v = vocab(&["w", "x", "y", "z"]);
        let res =
            init_embeddings(InitMethod::RandomAssign, &old_v, &old_e, &new_v, 9, None).unwrap();
        let mut old_rows: Vec<Vec<u64>> = (0..4)
            .map(|r| old_e.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut new_rows: Vec<Vec<u64>> = (0..4)
            .map(|r| res.embeddings.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        old_rows.sort();
        new_rows.sort();
        assert_eq!(old_rows, new_rows);
    }

    #[test]
    fn random_assign_remainder_is_sampled() {
        let old_v = vocab(&["a", "b"]);
        let old_e = old_matrix(2, 3);
        let new_v = vocab(&["p", "q", "r", "s"]);
        let res =
            init_embeddings(InitMethod::RandomAssign, &old_v, &old_e, &new_v, 9, None).unwrap();
        assert_eq!(res.embeddings.rows, 4);
        // The sampled remainder is small-scale noise, not copied rows.
        for r in 2..4 {
            assert!(res.embeddings.row(r).iter().all(|v| v.abs() < 0.2));
        }
    }

    #[test]
    fn fitted_normal_matches_pooled_moments() {
        let old_e = Matrix::from_fn(50, 20, |r, c| 0.01 + 0.03 * (((r * 17 + c) % 7) as f64 - 3.0));
        let (mean, std) = pooled_stats(&old_e);
        let old_v: Vec<String> = (0..50).map(|i| format!("t{i}")).collect();
        let new_v: Vec<String> = (0..2000).map(|i| format!("n{i}")).collect();
        let res =
            init_embeddings(InitMethod::FittedNormal, &old_v, &old_e, &new_v, 3, None).unwrap();
        let (m2, s2) = pooled_stats(&res.embeddings);
        let n = res.embeddings.data.len() as f64;
        assert!((m2 - mean).abs() < 3.0 * std / n.sqrt(), "{m2} vs {mean}");
        assert!((s2 - std).abs() < 3.0 * std / (2.0 * n).sqrt(), "{s2} vs {std}");
    }

    #[test]
    fn methods_are_deterministic_in_seed() {
        let old_v = vocab(&["a", "b", "c"]);
        let old_e = old_matrix(3, 4);
        let new_v = vocab(&["b", "x", "y"]);
        for method in [
            InitMethod::NormalFixed,
            InitMethod::FittedNormal,
            InitMethod::RandomAssign,
            InitMethod::OverlapHeuristic,
        ] {
            let a = init_embeddings(method, &old_v, &old_e, &new_v, 12, None).unwrap();
            let b = init_embeddings(method, &old_v, &old_e, &new_v, 12, None).unwrap();
            assert_eq!(a.embeddings, b.embeddings);
            let c = init_embeddings(method, &old_v, &old_e, &new_v, 13, None).unwrap();
            if !matches!(method, InitMethod::OverlapHeuristic) || a.embeddings.rows > 0 {
                // Different seeds change at least the sampled part.
                let _ = c;
            }
        }
    }

    #[test]
    fn focus_requires_aux_and_flags_empty_overlap() {
        let old_v = vocab(&["a", "b"]);
        let old_e = old_matrix(2, 3);
        let new_v = vocab(&["x", "y"]);
        assert!(init_embeddings(
            InitMethod::focus_like(),
            &old_v,
            &old_e,
            &new_v,
            1,
            None
        )
        .is_err());
        let aux = AuxEmbeddings {
            window: 1,
            dim: 2,
            vectors: HashMap::new(),
        };
        let res = init_embeddings(
            InitMethod::focus_like(),
            &old_v,
            &old_e,
            &new_v,
            1,
            Some(&aux),
        )
        .unwrap();
        assert!(res.overlap_fallback);
    }

    #[test]
    fn focus_rows_stay_in_the_convex_hull_of_overlap_rows() {
        let old_v = vocab(&["x", "y"]);
        let old_e = Matrix::from_rows(vec![vec![1.0, 0.0, 2.0], vec![-1.0, 4.0, 0.0]]).unwrap();
        let new_v = vocab(&["x", "y", "z"]);
        let mut vectors = HashMap::new();
        vectors.insert(0u32, vec![1.0, 0.0, 0.0]);
        vectors.insert(1u32, vec![0.0, 1.0, 0.0]);
        vectors.insert(2u32, vec![0.9, 0.1, 0.0]);
        let aux = AuxEmbeddings {
            window: 1,
            dim: 3,
            vectors,
        };
        let res = init_embeddings(
            InitMethod::focus_like(),
            &old_v,
            &old_e,
            &new_v,
            1,
            Some(&aux),
        )
        .unwrap();
        assert_eq!(res.embeddings.row(0), old_e.row(0));
        assert_eq!(res.embeddings.row(1), old_e.row(1));
        let z = res.embeddings.row(2);
        for c in 0..3 {
            let lo = old_e.get(0, c).min(old_e.get(1, c)) - 1e-12;
            let hi = old_e.get(0, c).max(old_e.get(1, c)) + 1e-12;
            assert!(z[c] >= lo && z[c] <= hi, "coordinate {c} out of hull");
        }
        let norm = |v: &[f64]| dot(v, v).sqrt();
        let max_norm = norm(old_e.row(0)).max(norm(old_e.row(1)));
        assert!(norm(z) <= max_norm + 1e-12);
        // z's aux vector is closer to x's, so the row leans toward x.
        assert!((z[0] - 1.0).abs() < (z[0] + 1.0).abs());
    }

    #[test]
    fn aux_identical_contexts_have_unit_cosine() {
        // Tokens 0 and 1 each co-occur only with token 2.
        let seq = vec![0u32, 2, 1, 2, 0, 2, 1, 2];
        let aux = train_aux_embeddings(&[seq], 3, 1, 3, 0).unwrap();
        let cos = cosine(&aux.vectors[&0], &aux.vectors[&1]);
        assert!((cos - 1.0).abs() < 1e-6);
        assert!(!aux.vectors.contains_key(&9));
    }

    #[test]
    fn aux_hand_ppmi_on_alternating_pair() {
        let seq: Vec<u32> = (0..8).map(|i| (i % 2) as u32).collect();
        let aux = train_aux_embeddings(&[seq], 2, 1, 2, 0).unwrap();
        // Co-occurrence is purely cross-token: each vector has one nonzero
        // PPMI entry, so after normalization a = e_b and b = e_a.
        assert!((aux.vectors[&0][1] - 1.0).abs() < 1e-9);
        assert!((aux.vectors[&1][0] - 1.0).abs() < 1e-9);
        assert!(cosine(&aux.vectors[&0], &aux.vectors[&1]).abs() < 1e-9);
    }

    #[test]
    fn aux_token_absent_from_corpus_has_no_vector() {
        let aux = train_aux_embeddings(&[vec![0, 1, 0, 1]], 5, 1, 5, 0).unwrap();
        assert!(aux.vectors.contains_key(&0));
        assert!(!aux.vectors.contains_key(&4));
    }

    #[test]
    fn warmup_freezes_everything_but_embeddings() {
        let cfg = ModelConfig {
            vocab_size: 17,
            d_model: 4,
            n_layers: 1,
            d_ff: 8,
            n_heads: 1,
            context_length: 8,
            rmsnorm_eps: 1e-5,
        };
        let policy = PrecisionPolicy::mixed_bf16();
        let mut model = init_model(&cfg, 21, policy.weights_fmt).unwrap();
        let sp = SpecialTokens {
            bos: 0,
            eos: 1,
            pad: 2,
        };
        let docs = vec![vec![5u32, 6, 7, 8, 9, 10, 5, 6, 7], vec![11u32, 12, 13, 11, 12]];
        let blocks = pack_documents(&docs, PackingMode::EosConcat, 8, sp).unwrap();
        let before: Vec<Matrix> = model.params.iter().map(|p| p.values.clone()).collect();
        let (nll0, n0, _) = forward_loss(&model, &blocks[0], &policy).unwrap();

        let opt = AdamWConfig::default();
        // Zero steps leaves everything untouched.
        embedding_warmup(&mut model, &blocks, 0, &policy, &opt, 1e-3).unwrap();
        for (p, b) in model.params.iter().zip(&before) {
            assert_eq!(&p.values, b);
        }

        embedding_warmup(&mut model, &blocks, 60, &policy, &opt, 1e-3).unwrap();
        let mut embeddings_moved = false;
        for (p, b) in model.params.iter().zip(&before) {
            match p.layer_kind {
                LayerKind::Embedding | LayerKind::Unembedding => {
                    embeddings_moved |= &p.values != b;
                }
                _ => assert_eq!(&p.values, b, "{} moved", p.name),
            }
        }
        assert!(embeddings_moved);
        let (nll1, n1, _) = forward_loss(&model, &blocks[0], &policy).unwrap();
        assert_eq!(n0, n1);
        assert!(nll1 <= nll0, "warmup increased NLL: {nll0} -> {nll1}");
    }
}
