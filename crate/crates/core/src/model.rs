//! A tiny decoder language model — embedding, N blocks of
//! RMSNorm / single-head causal attention / RMSNorm / SiLU MLP with residuals,
//! a final RMSNorm, and an untied unembedding — executed under a
//! `PrecisionPolicy` with hand-derived reverse-mode gradients.
//!
//! Quantization happens after every primitive op (matmul, add, activation);
//! dot products accumulate wide. RMSNorm variance and the final softmax run
//! unquantized when the policy's islands are on.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{quantize, FloatFormat, RoundingMode};
use crate::pack::{build_attention_mask, PackedBlock};
use crate::precision::PrecisionPolicy;
use crate::rng::substream;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub rmsnorm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.d_ff == 0
            || self.context_length < 2
        {
            return Err(Error::InvalidConfig("all model dimensions must be positive".into()));
        }
        if self.n_heads != 1 {
            return Err(Error::InvalidConfig("only single-head attention is supported".into()));
        }
        if self.d_ff < self.d_model {
            return Err(Error::InvalidConfig("d_ff must be at least d_model".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    RmsNorm,
    Embedding,
    Linear,
    Unembedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub layer_kind: LayerKind,
    pub values: Matrix,
    pub init_snapshot: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Parameter>,
}

/// Per-layer parameter offsets inside `Model::params`: embedding first, then
/// eight parameters per block, then the final norm and the unembedding.
const PER_LAYER: usize = 8;

impl Model {
    pub fn embedding_index(&self) -> usize {
        0
    }

    pub fn unembedding_index(&self) -> usize {
        self.params.len() - 1
    }

    pub fn final_norm_index(&self) -> usize {
        self.params.len() - 2
    }

    fn layer_base(&self, layer: usize) -> usize {
        1 + layer * PER_LAYER
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Record the current weights as the baseline for change reports.
    pub fn snapshot_init(&mut self) {
        for p in &mut self.params {
            p.init_snapshot = Some(p.values.clone());
        }
    }
}

/// Build and initialize the full parameter set: Normal(0, 0.02) quantized to
/// `weights_fmt` for everything except RMSNorm gains, which start at exactly
/// 1.0.
pub fn init_model(cfg: &ModelConfig, seed: u64, weights_fmt: FloatFormat) -> Result<Model> {
    cfg.validate()?;
    weights_fmt.validate()?;
    let mut rng = substream(seed, "model-init");
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let mut sampled = |name: &str, kind: LayerKind, rows: usize, cols: usize| {
        let mut values = Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
        values.quantize_in_place(weights_fmt, RoundingMode::NearestEven);
        Parameter {
            name: name.to_string(),
            layer_kind: kind,
            values,
            init_snapshot: None,
        }
    };
    let gain = |name: &str, d: usize| Parameter {
        name: name.to_string(),
        layer_kind: LayerKind::RmsNorm,
        values: Matrix::from_fn(1, d, |_, _| 1.0),
        init_snapshot: None,
    };

    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut params = vec![sampled("embedding", LayerKind::Embedding, v, d)];
    for l in 0..cfg.n_layers {
        params.push(gain(&format!("layers.{l}.attn_norm.gain"), d));
        params.push(sampled(&format!("layers.{l}.attn.wq"), LayerKind::Linear, d, d));
        params.push(sampled(&format!("layers.{l}.attn.wk"), LayerKind::Linear, d, d));
        params.push(sampled(&format!("layers.{l}.attn.wv"), LayerKind::Linear, d, d));
        params.push(sampled(&format!("layers.{l}.attn.wo"), LayerKind::Linear, d, d));
        params.push(gain(&format!("layers.{l}.mlp_norm.gain"), d));
        params.push(sampled(&format!("layers.{l}.mlp.w1"), LayerKind::Linear, f, d));
        params.push(sampled(&format!("layers.{l}.mlp.w2"), LayerKind::Linear, d, f));
    }
    params.push(gain("final_norm.gain", d));
    params.push(sampled("unembedding", LayerKind::Unembedding, v, d));
    Ok(Model { cfg: *cfg, params })
}

/// `y_i = gain_i * x_i / sqrt(mean(x^2) + eps)`. The variance and square root
/// run unquantized when the policy's islands are on.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64, policy: &PrecisionPolicy) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidConfig("rmsnorm of a zero-length vector".into()));
    }
    if x.len() != gain.len() {
        return Err(Error::ShapeMismatch("rmsnorm gain length".into()));
    }
    let qf = |v: f64| quantize(v, policy.forward_fmt, RoundingMode::NearestEven);
    let r = rms(x, eps, policy);
    Ok(x.iter()
        .zip(gain)
        .map(|(&xi, &gi)| qf(gi * qf(xi / r)))
        .collect())
}

fn rms(x: &[f64], eps: f64, policy: &PrecisionPolicy) -> f64 {
    let mean_sq = dot(x, x) / x.len() as f64;
    if policy.high_precision_islands {
        (mean_sq + eps).sqrt()
    } else {
        let qf = |v: f64| quantize(v, policy.forward_fmt, RoundingMode::NearestEven);
        qf(qf(qf(mean_sq) + eps).sqrt())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientSet {
    pub grads: Vec<Matrix>,
}

/// Everything the backward pass needs, captured during a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    consumed: bool,
    block: PackedBlock,
    mask: Vec<bool>,
    layers: Vec<LayerTape>,
    /// Input to the final RMSNorm (the last block's output).
    x_last: Matrix,
    rf: Vec<f64>,
    tf: Matrix,
    xf: Matrix,
    /// Softmax rows for valid-target positions; other rows zero.
    probs: Matrix,
    valid: Vec<(usize, u32)>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    x_in: Matrix,
    r1: Vec<f64>,
    t1: Matrix,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    att: Matrix,
    ctx: Matrix,
    x_mid: Matrix,
    r2: Vec<f64>,
    t2: Matrix,
    h2: Matrix,
    u: Matrix,
    a: Matrix,
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Causal-LM cross-entropy over the block's valid targets, returning the
/// summed NLL, the number of contributing positions, and the backward tape.
pub fn forward_loss(
    model: &Model,
    block: &PackedBlock,
    policy: &PrecisionPolicy,
) -> Result<(f64, usize, Tape)> {
    policy.validate()?;
    let cfg = &model.cfg;
    if let Some(&bad) = block.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange(bad as usize, cfg.vocab_size));
    }
    let t_len = block.token_ids.len();
    let d = cfg.d_model;
    let qf = |v: f64| quantize(v, policy.forward_fmt, RoundingMode::NearestEven);
    let qvec = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(qf).collect() };
    let mask = build_attention_mask(block);

    let embedding = &model.params[model.embedding_index()].values;
    let mut x0 = Matrix::zeros(t_len, d);
    for (i, &tok) in block.token_ids.iter().enumerate() {
        for (c, &e) in embedding.row(tok as usize).iter().enumerate() {
            x0.set(i, c, qf(e));
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let base = model.layer_base(l);
        let gain1 = model.params[base].values.row(0);
        let wq = &model.params[base + 1].values;
        let wk = &model.params[base + 2].values;
        let wv = &model.params[base + 3].values;
        let wo = &model.params[base + 4].values;
        let gain2 = model.params[base + 5].values.row(0);
        let w1 = &model.params[base + 6].values;
        let w2 = &model.params[base + 7].values;

        let x_in = x.clone();
        let mut r1 = Vec::with_capacity(t_len);
        let mut t1 = Matrix::zeros(t_len, d);
        let mut h1 = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            let r = rms(x_in.row(i), cfg.rmsnorm_eps, policy);
            r1.push(r);
            for c in 0..d {
                let t = qf(x_in.get(i, c) / r);
                t1.set(i, c, t);
                h1.set(i, c, qf(gain1[c] * t));
            }
        }

        let mut q = Matrix::zeros(t_len, d);
        let mut k = Matrix::zeros(t_len, d);
        let mut v = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            q.row_mut(i).copy_from_slice(&qvec(wq.matvec(h1.row(i))));
            k.row_mut(i).copy_from_slice(&qvec(wk.matvec(h1.row(i))));
            v.row_mut(i).copy_from_slice(&qvec(wv.matvec(h1.row(i))));
        }

        // Scaled dot-product attention with the block's mask; rows with no
        // allowed key (pure padding) produce a zero context vector.
        let mut att = Matrix::zeros(t_len, t_len);
        let mut ctx = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            let allowed: Vec<usize> = (0..t_len).filter(|&j| mask[i * t_len + j]).collect();
            if allowed.is_empty() {
                continue;
            }
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| qf(qf(dot(q.row(i), k.row(j))) * scale))
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| qf((s - max).exp())).collect();
            let z = qf(exps.iter().sum());
            for (&j, &e) in allowed.iter().zip(&exps) {
                att.set(i, j, qf(e / z));
            }
            for c in 0..d {
                let s: f64 = allowed.iter().map(|&j| att.get(i, j) * v.get(j, c)).sum();
                ctx.set(i, c, qf(s));
            }
        }

        let mut x_mid = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            let o = qvec(wo.matvec(ctx.row(i)));
            for c in 0..d {
                x_mid.set(i, c, qf(x_in.get(i, c) + o[c]));
            }
        }

        let mut r2 = Vec::with_capacity(t_len);
        let mut t2 = Matrix::zeros(t_len, d);
        let mut h2 = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            let r = rms(x_mid.row(i), cfg.rmsnorm_eps, policy);
            r2.push(r);
            for c in 0..d {
                let t = qf(x_mid.get(i, c) / r);
                t2.set(i, c, t);
                h2.set(i, c, qf(gain2[c] * t));
            }
        }

        let mut u = Matrix::zeros(t_len, cfg.d_ff);
        let mut a = Matrix::zeros(t_len, cfg.d_ff);
        let mut x_out = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            let ui = qvec(w1.matvec(h2.row(i)));
            for (c, &uc) in ui.iter().enumerate() {
                a.set(i, c, qf(uc * sigmoid(uc)));
            }
            u.row_mut(i).copy_from_slice(&ui);
            let m = qvec(w2.matvec(a.row(i)));
            for c in 0..d {
                x_out.set(i, c, qf(x_mid.get(i, c) + m[c]));
            }
        }

        layers.push(LayerTape {
            x_in,
            r1,
            t1,
            h1,
            q,
            k,
            v,
            att,
            ctx,
            x_mid,
            r2,
            t2,
            h2,
            u,
            a,
        });
        x = x_out;
    }

    let final_gain = model.params[model.final_norm_index()].values.row(0).to_vec();
    let mut rf = Vec::with_capacity(t_len);
    let mut tf = Matrix::zeros(t_len, d);
    let mut xf = Matrix::zeros(t_len, d);
    for i in 0..t_len {
        let r = rms(x.row(i), cfg.rmsnorm_eps, policy);
        rf.push(r);
        for c in 0..d {
            let t = qf(x.get(i, c) / r);
            tf.set(i, c, t);
            xf.set(i, c, qf(final_gain[c] * t));
        }
    }

    let unembedding = &model.params[model.unembedding_index()].values;
    let valid = block.valid_targets();
    let mut probs = Matrix::zeros(t_len, cfg.vocab_size);
    let mut nll_sum = 0.0;
    for &(i, target) in &valid {
        let logits = qvec(unembedding.matvec(xf.row(i)));
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if policy.high_precision_islands {
            let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            for (c, &z) in logits.iter().enumerate() {
                probs.set(i, c, (z - lse).exp());
            }
            nll_sum += lse - logits[target as usize];
        } else {
            let exps: Vec<f64> = logits.iter().map(|&z| qf((z - max).exp())).collect();
            let z_sum = qf(exps.iter().sum());
            for (c, &e) in exps.iter().enumerate() {
                probs.set(i, c, qf(e / z_sum));
            }
            nll_sum += qf(-probs.get(i, target as usize).ln());
        }
    }

    let token_count = valid.len();
    let tape = Tape {
        consumed: false,
        block: block.clone(),
        mask,
        layers,
        x_last: x,
        rf,
        tf,
        xf,
        probs,
        valid,
    };
    Ok((nll_sum, token_count, tape))
}

/// Reverse-mode gradients for every parameter, computed wide and quantized to
/// `grads_fmt`. Consumes the tape; a second call on the same tape errors.
pub fn backward(model: &Model, tape: &mut Tape, policy: &PrecisionPolicy) -> Result<GradientSet> {
    if tape.consumed {
        return Err(Error::StaleTape);
    }
    tape.consumed = true;
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let t_len = tape.block.token_ids.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut grads: Vec<Matrix> = model
        .params
        .iter()
        .map(|p| Matrix::zeros(p.values.rows, p.values.cols))
        .collect();

    // Output head: d_logits = softmax - onehot at valid positions.
    let unembedding = &model.params[model.unembedding_index()].values;
    let mut d_xf = Matrix::zeros(t_len, d);
    {
        let gu = &mut grads[model.unembedding_index()];
        for &(i, target) in &tape.valid {
            let mut dz = tape.probs.row(i).to_vec();
            dz[target as usize] -= 1.0;
            gu.add_outer(&dz, tape.xf.row(i));
            let dx = unembedding.matvec_t(&dz);
            for c in 0..d {
                d_xf.set(i, c, d_xf.get(i, c) + dx[c]);
            }
        }
    }

    // Final RMSNorm.
    let final_gain = model.params[model.final_norm_index()].values.row(0).to_vec();
    let x_last = &tape.x_last;
    let mut dx = Matrix::zeros(t_len, d);
    for i in 0..t_len {
        let (dxi, dg) = rmsnorm_backward(
            x_last.row(i),
            &final_gain,
            tape.rf[i],
            tape.tf.row(i),
            d_xf.row(i),
        );
        dx.row_mut(i).copy_from_slice(&dxi);
        let gg = grads[model.final_norm_index()].row_mut(0);
        for c in 0..d {
            gg[c] += dg[c];
        }
    }

    for l in (0..cfg.n_layers).rev() {
        let base = model.layer_base(l);
        let lt = &tape.layers[l];
        let gain1 = model.params[base].values.row(0).to_vec();
        let wq = &model.params[base + 1].values;
        let wk = &model.params[base + 2].values;
        let wv = &model.params[base + 3].values;
        let wo = &model.params[base + 4].values;
        let gain2 = model.params[base + 5].values.row(0).to_vec();
        let w1 = &model.params[base + 6].values;
        let w2 = &model.params[base + 7].values;

        // MLP: x_out = x_mid + W2 silu(W1 h2).
        let mut d_xmid = dx.clone();
        let mut dh2 = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            let dm = dx.row(i);
            grads[base + 7].add_outer(dm, lt.a.row(i));
            let da = w2.matvec_t(dm);
            let mut du = vec![0.0; cfg.d_ff];
            for c in 0..cfg.d_ff {
                let u = lt.u.get(i, c);
                let s = sigmoid(u);
                du[c] = da[c] * s * (1.0 + u * (1.0 - s));
            }
            grads[base + 6].add_outer(&du, lt.h2.row(i));
            dh2.row_mut(i).copy_from_slice(&w1.matvec_t(&du));
        }

        // Second RMSNorm.
        for i in 0..t_len {
            let (dxi, dg) =
                rmsnorm_backward(lt.x_mid.row(i), &gain2, lt.r2[i], lt.t2.row(i), dh2.row(i));
            let row = d_xmid.row_mut(i);
            for c in 0..d {
                row[c] += dxi[c];
            }
            let gg = grads[base + 5].row_mut(0);
            for c in 0..d {
                gg[c] += dg[c];
            }
        }

        // Attention: x_mid = x_in + Wo ctx.
        let mut d_xin = d_xmid.clone();
        let mut dq = Matrix::zeros(t_len, d);
        let mut dk = Matrix::zeros(t_len, d);
        let mut dv = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            let do_ = d_xmid.row(i);
            grads[base + 4].add_outer(do_, lt.ctx.row(i));
            let dctx = wo.matvec_t(do_);
            let allowed: Vec<usize> = (0..t_len).filter(|&j| tape.mask[i * t_len + j]).collect();
            if allowed.is_empty() {
                continue;
            }
            let dp: Vec<f64> = allowed.iter().map(|&j| dot(&dctx, lt.v.row(j))).collect();
            let inner: f64 = allowed
                .iter()
                .zip(&dp)
                .map(|(&j, &dpj)| lt.att.get(i, j) * dpj)
                .sum();
            for (&j, &dpj) in allowed.iter().zip(&dp) {
                let p = lt.att.get(i, j);
                let ds = p * (dpj - inner);
                for c in 0..d {
                    dq.set(i, c, dq.get(i, c) + ds * lt.k.get(j, c) * scale);
                    dk.set(j, c, dk.get(j, c) + ds * lt.q.get(i, c) * scale);
                    dv.set(j, c, dv.get(j, c) + p * dctx[c]);
                }
            }
        }

        let mut dh1 = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            grads[base + 1].add_outer(dq.row(i), lt.h1.row(i));
            grads[base + 2].add_outer(dk.row(i), lt.h1.row(i));
            grads[base + 3].add_outer(dv.row(i), lt.h1.row(i));
            let mut acc = wq.matvec_t(dq.row(i));
            for (a, b) in acc.iter_mut().zip(wk.matvec_t(dk.row(i))) {
                *a += b;
            }
            for (a, b) in acc.iter_mut().zip(wv.matvec_t(dv.row(i))) {
                *a += b;
            }
            dh1.row_mut(i).copy_from_slice(&acc);
        }

        // First RMSNorm.
        for i in 0..t_len {
            let (dxi, dg) =
                rmsnorm_backward(lt.x_in.row(i), &gain1, lt.r1[i], lt.t1.row(i), dh1.row(i));
            let row = d_xin.row_mut(i);
            for c in 0..d {
                row[c] += dxi[c];
            }
            let gg = grads[base].row_mut(0);
            for c in 0..d {
                gg[c] += dg[c];
            }
        }
        dx = d_xin;
    }

    // Embedding rows accumulate token by token.
    {
        let ge = &mut grads[model.embedding_index()];
        for (i, &tok) in tape.block.token_ids.iter().enumerate() {
            let row = ge.row_mut(tok as usize);
            for c in 0..d {
                row[c] += dx.get(i, c);
            }
        }
    }

    for g in &mut grads {
        g.quantize_in_place(policy.grads_fmt, RoundingMode::NearestEven);
    }
    Ok(GradientSet { grads })
}

/// Gradient of y = gain ⊙ x / r with r = sqrt(mean(x²) + eps), given the
/// cached t = x / r. Returns (dx, dgain).
fn rmsnorm_backward(
    x: &[f64],
    gain: &[f64],
    r: f64,
    t: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let inner: f64 = x
        .iter()
        .zip(gain)
        .zip(dy)
        .map(|((&xi, &gi), &dyi)| gi * dyi * xi)
        .sum();
    let dx = x
        .iter()
        .zip(gain)
        .zip(dy)
        .map(|((&xi, &gi), &dyi)| gi * dyi / r - xi * inner / (n * r * r * r))
        .collect();
    let dgain = t.iter().zip(dy).map(|(&ti, &dyi)| dyi * ti).collect();
    (dx, dgain)
}
