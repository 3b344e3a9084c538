//! Model parameters, forward pass, loss, and backpropagation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::LmError;
use crate::exec;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.vocab_size == 0 || self.dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(LmError::InvalidConfig("all sizes must be >= 1".into()));
        }
        if self.dim % self.num_heads != 0 {
            return Err(LmError::InvalidConfig(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(LmError::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.dim
    }
}

// Tensor layout: tok_emb, pos_emb, then 12 tensors per block, then the final
// norm pair and the output projection.
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const PER_LAYER: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

fn layer_base(layer: usize) -> usize {
    2 + layer * PER_LAYER
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    /// Stable tensor names in layout order; the checkpoint manifest uses
    /// these.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..config.num_layers {
            for part in
                ["ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"]
            {
                names.push(format!("layer{l}.{part}"));
            }
        }
        names.push("final.g".into());
        names.push("final.b".into());
        names.push("out_proj".into());
        names
    }

    pub fn tok_emb(&self) -> &Tensor {
        &self.tensors[TOK_EMB]
    }

    fn p(&self, layer: usize, which: usize) -> &Tensor {
        &self.tensors[layer_base(layer) + which]
    }

    fn final_base(&self) -> usize {
        layer_base(self.config.num_layers)
    }

    fn out_proj(&self) -> &Tensor {
        &self.tensors[self.final_base() + 2]
    }
}

/// Seeded, deterministic initialization.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams, LmError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let mut tensors = Vec::new();
    tensors.push(Tensor::randn(config.vocab_size, d, INIT_STD, &mut rng));
    tensors.push(Tensor::randn(config.max_seq_len, d, INIT_STD, &mut rng));
    for _ in 0..config.num_layers {
        tensors.push(Tensor::filled(1, d, 1.0)); // ln1.g
        tensors.push(Tensor::zeros(1, d)); // ln1.b
        tensors.push(Tensor::randn(d, d, INIT_STD, &mut rng)); // wq
        tensors.push(Tensor::randn(d, d, INIT_STD, &mut rng)); // wk
        tensors.push(Tensor::randn(d, d, INIT_STD, &mut rng)); // wv
        tensors.push(Tensor::randn(d, d, INIT_STD, &mut rng)); // wo
        tensors.push(Tensor::filled(1, d, 1.0)); // ln2.g
        tensors.push(Tensor::zeros(1, d)); // ln2.b
        tensors.push(Tensor::randn(d, config.mlp_dim(), INIT_STD, &mut rng)); // w1
        tensors.push(Tensor::zeros(1, config.mlp_dim())); // b1
        tensors.push(Tensor::randn(config.mlp_dim(), d, INIT_STD, &mut rng)); // w2
        tensors.push(Tensor::zeros(1, d)); // b2
    }
    tensors.push(Tensor::filled(1, d, 1.0)); // final.g
    tensors.push(Tensor::zeros(1, d)); // final.b
    tensors.push(Tensor::randn(d, config.vocab_size, INIT_STD, &mut rng)); // out_proj
    Ok(ModelParams { config: config.clone(), tensors })
}

/// Grow the embedding matrix and output projection to `new_vocab` ids. Rows
/// and columns for ids below the old size are copied bit for bit; the new
/// parameters are seeded random.
pub fn expand_vocab(params: &ModelParams, new_vocab: usize, seed: u64) -> Result<ModelParams, LmError> {
    let old = params.config.vocab_size;
    if new_vocab < old {
        return Err(LmError::ShrinkNotAllowed { old, new: new_vocab });
    }
    let mut out = params.clone();
    out.config.vocab_size = new_vocab;
    if new_vocab == old {
        return Ok(out);
    }
    let d = params.config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let emb = &mut out.tensors[TOK_EMB];
    emb.rows = new_vocab;
    let fresh = Tensor::randn(new_vocab - old, d, INIT_STD, &mut rng);
    emb.data.extend_from_slice(&fresh.data);

    let proj_idx = params.final_base() + 2;
    let old_proj = &params.tensors[proj_idx];
    let mut proj = Tensor::zeros(d, new_vocab);
    for r in 0..d {
        proj.row_mut(r)[..old].copy_from_slice(old_proj.row(r));
        for c in old..new_vocab {
            proj.set(r, c, super::tensor::normal(&mut rng) * INIT_STD);
        }
    }
    out.tensors[proj_idx] = proj;
    Ok(out)
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = x.cols;
    let mut out = Tensor::zeros(x.rows, d);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let orow = out.row_mut(t);
        for j in 0..d {
            orow[j] = (row[j] - mean) * rstd * g.data[j] + b.data[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

fn gelu(x: f64) -> f64 {
    const C1: f64 = 0.7978845608028654; // sqrt(2/pi)
    const C2: f64 = 0.044715;
    0.5 * x * (1.0 + (C1 * (x + C2 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C1: f64 = 0.7978845608028654;
    const C2: f64 = 0.044715;
    let t = (C1 * (x + C2 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C1 * (1.0 + 3.0 * C2 * x * x)
}

pub(crate) struct LayerCache {
    x_in: Tensor,
    ln1_out: Tensor,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head causal attention weights, `T x T` each.
    att: Vec<Tensor>,
    ctx: Tensor,
    x_mid: Tensor,
    ln2_out: Tensor,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h_pre: Tensor,
    h_act: Tensor,
}

pub(crate) struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Tensor,
    lnf_out: Tensor,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    pub(crate) logits: Tensor,
}

/// Forward pass returning `T x V` logits.
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<Tensor, LmError> {
    Ok(forward_cached(params, tokens)?.logits)
}

pub(crate) fn forward_cached(params: &ModelParams, tokens: &[u32]) -> Result<ForwardCache, LmError> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(LmError::EmptyPrompt);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(LmError::SequenceTooLong { len: tokens.len(), max: cfg.max_seq_len });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(LmError::TokenOutOfRange(t));
        }
    }
    let t_len = tokens.len();
    let d = cfg.dim;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Tensor::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let emb = params.tok_emb().row(tok as usize);
        let pos = params.tensors[POS_EMB].row(t);
        let row = x.row_mut(t);
        for j in 0..d {
            row[j] = emb[j] + pos[j];
        }
    }
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let x_in = x.clone();
        let (ln1_out, ln1_mean, ln1_rstd) = layer_norm(&x_in, params.p(l, LN1_G), params.p(l, LN1_B));
        let q = matmul(&ln1_out, params.p(l, WQ));
        let k = matmul(&ln1_out, params.p(l, WK));
        let v = matmul(&ln1_out, params.p(l, WV));

        let mut att = Vec::with_capacity(heads);
        let mut ctx = Tensor::zeros(t_len, d);
        for h in 0..heads {
            let off = h * hd;
            let mut a = Tensor::zeros(t_len, t_len);
            for i in 0..t_len {
                // Causal: scores over j <= i only, with a stable softmax.
                let qi = &q.row(i)[off..off + hd];
                let mut max_s = f64::NEG_INFINITY;
                let mut scores = vec![0.0f64; i + 1];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + hd];
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += qi[c] * kj[c];
                    }
                    *s = dot * scale;
                    if *s > max_s {
                        max_s = *s;
                    }
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max_s).exp();
                    denom += *s;
                }
                let arow = a.row_mut(i);
                for (j, &s) in scores.iter().enumerate() {
                    arow[j] = s / denom;
                }
                let crow = ctx.row_mut(i);
                for (j, &w) in arow.iter().enumerate().take(i + 1) {
                    let vj = &v.row(j)[off..off + hd];
                    for c in 0..hd {
                        crow[off + c] += w * vj[c];
                    }
                }
            }
            att.push(a);
        }

        let attn_out = matmul(&ctx, params.p(l, WO));
        let mut x_mid = x_in.clone();
        for (o, &a) in x_mid.data.iter_mut().zip(&attn_out.data) {
            *o += a;
        }

        let (ln2_out, ln2_mean, ln2_rstd) = layer_norm(&x_mid, params.p(l, LN2_G), params.p(l, LN2_B));
        let mut h_pre = matmul(&ln2_out, params.p(l, W1));
        for t in 0..t_len {
            let row = h_pre.row_mut(t);
            for (hv, bv) in row.iter_mut().zip(&params.p(l, B1).data) {
                *hv += bv;
            }
        }
        let mut h_act = h_pre.clone();
        for v in h_act.data.iter_mut() {
            *v = gelu(*v);
        }
        let mut mlp_out = matmul(&h_act, params.p(l, W2));
        for t in 0..t_len {
            let row = mlp_out.row_mut(t);
            for (mv, bv) in row.iter_mut().zip(&params.p(l, B2).data) {
                *mv += bv;
            }
        }
        let mut x_next = x_mid.clone();
        for (o, &m) in x_next.data.iter_mut().zip(&mlp_out.data) {
            *o += m;
        }

        layers.push(LayerCache {
            x_in,
            ln1_out,
            ln1_mean,
            ln1_rstd,
            q,
            k,
            v,
            att,
            ctx,
            x_mid,
            ln2_out,
            ln2_mean,
            ln2_rstd,
            h_pre,
            h_act,
        });
        x = x_next;
    }

    let x_final = x;
    let fb = params.final_base();
    let (lnf_out, lnf_mean, lnf_rstd) =
        layer_norm(&x_final, &params.tensors[fb], &params.tensors[fb + 1]);
    let logits = matmul(&lnf_out, params.out_proj());

    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        x_final,
        lnf_out,
        lnf_mean,
        lnf_rstd,
        logits,
    })
}

/// Mean negative log-likelihood over mask-true positions.
pub fn nll_loss(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<f64, LmError> {
    if targets.len() != logits.rows || mask.len() != targets.len() {
        return Err(LmError::InvalidConfig("loss inputs must have equal lengths".into()));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if target as usize >= logits.cols {
            return Err(LmError::TokenOutOfRange(target));
        }
        sum += position_nll(logits.row(t), target);
        count += 1;
    }
    if count == 0 {
        return Err(LmError::EmptyMask);
    }
    let loss = sum / count as f64;
    if !loss.is_finite() {
        return Err(LmError::NonFiniteLoss);
    }
    Ok(loss)
}

fn position_nll(row: &[f64], target: u32) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target as usize]
}

fn layer_norm_backward(
    dy: &Tensor,
    x: &Tensor,
    mean: &[f64],
    rstd: &[f64],
    g: &Tensor,
    dg: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let d = x.cols;
    let mut dx = Tensor::zeros(x.rows, d);
    for t in 0..x.rows {
        let xrow = x.row(t);
        let dyrow = dy.row(t);
        let m = mean[t];
        let r = rstd[t];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        let mut xhat = vec![0.0f64; d];
        let mut dxhat = vec![0.0f64; d];
        for j in 0..d {
            xhat[j] = (xrow[j] - m) * r;
            dxhat[j] = dyrow[j] * g.data[j];
            dg.data[j] += dyrow[j] * xhat[j];
            db.data[j] += dyrow[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        let inv_d = 1.0 / d as f64;
        let dxrow = dx.row_mut(t);
        for j in 0..d {
            dxrow[j] = r * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
        }
    }
    dx
}

/// Backprop of the summed (not averaged) NLL over mask-true positions.
/// Returns `(nll_sum, masked_count, d(nll_sum)/dtheta)`.
pub(crate) fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, usize, Vec<Tensor>), LmError> {
    let cfg = params.config();
    let t_len = cache.logits.rows;
    if targets.len() != t_len || mask.len() != t_len {
        return Err(LmError::InvalidConfig("target length mismatch".into()));
    }
    let d = cfg.dim;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut grads = params.zero_grads();

    // d(sum nll)/dlogits = softmax - onehot at masked positions.
    let mut nll_sum = 0.0f64;
    let mut count = 0usize;
    let mut dlogits = Tensor::zeros(t_len, cfg.vocab_size);
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        let target = targets[t];
        if target as usize >= cfg.vocab_size {
            return Err(LmError::TokenOutOfRange(target));
        }
        let row = cache.logits.row(t);
        nll_sum += position_nll(row, target);
        count += 1;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let drow = dlogits.row_mut(t);
        for (j, &v) in row.iter().enumerate() {
            drow[j] = (v - max).exp() / denom;
        }
        drow[target as usize] -= 1.0;
    }

    let fb = params.final_base();
    // out_proj and final norm.
    grads[fb + 2] = matmul_tn(&cache.lnf_out, &dlogits);
    let d_lnf_out = matmul_nt(&dlogits, params.out_proj());
    let (mut dg_f, mut db_f) = (Tensor::zeros(1, d), Tensor::zeros(1, d));
    let mut dx = layer_norm_backward(
        &d_lnf_out,
        &cache.x_final,
        &cache.lnf_mean,
        &cache.lnf_rstd,
        &params.tensors[fb],
        &mut dg_f,
        &mut db_f,
    );
    grads[fb] = dg_f;
    grads[fb + 1] = db_f;

    for l in (0..cfg.num_layers).rev() {
        let lc = &cache.layers[l];
        let base = layer_base(l);

        // MLP path: x = x_mid + (gelu(ln2 @ w1 + b1) @ w2 + b2).
        let d_mlp_out = &dx;
        grads[base + W2] = matmul_tn(&lc.h_act, d_mlp_out);
        for t in 0..t_len {
            for (bg, &g) in grads[base + B2].data.iter_mut().zip(d_mlp_out.row(t)) {
                *bg += g;
            }
        }
        let mut d_h = matmul_nt(d_mlp_out, params.p(l, W2));
        for (dh, &pre) in d_h.data.iter_mut().zip(&lc.h_pre.data) {
            *dh *= gelu_grad(pre);
        }
        grads[base + W1] = matmul_tn(&lc.ln2_out, &d_h);
        for t in 0..t_len {
            for (bg, &g) in grads[base + B1].data.iter_mut().zip(d_h.row(t)) {
                *bg += g;
            }
        }
        let d_ln2_out = matmul_nt(&d_h, params.p(l, W1));
        let (mut dg2, mut db2) = (Tensor::zeros(1, d), Tensor::zeros(1, d));
        let d_x_mid_from_ln = layer_norm_backward(
            &d_ln2_out,
            &lc.x_mid,
            &lc.ln2_mean,
            &lc.ln2_rstd,
            params.p(l, LN2_G),
            &mut dg2,
            &mut db2,
        );
        grads[base + LN2_G] = dg2;
        grads[base + LN2_B] = db2;

        // Residual: dx flows through both the MLP branch and the skip.
        let mut d_x_mid = dx;
        for (o, &v) in d_x_mid.data.iter_mut().zip(&d_x_mid_from_ln.data) {
            *o += v;
        }

        // Attention path: x_mid = x_in + ctx @ wo.
        let d_attn_out = &d_x_mid;
        grads[base + WO] = matmul_tn(&lc.ctx, d_attn_out);
        let d_ctx = matmul_nt(d_attn_out, params.p(l, WO));

        let mut dq = Tensor::zeros(t_len, d);
        let mut dk = Tensor::zeros(t_len, d);
        let mut dv = Tensor::zeros(t_len, d);
        for h in 0..heads {
            let off = h * hd;
            let a = &lc.att[h];
            for i in 0..t_len {
                let d_ctx_i = &d_ctx.row(i)[off..off + hd];
                // dA over j <= i, then the softmax Jacobian.
                let mut da = vec![0.0f64; i + 1];
                for (j, daj) in da.iter_mut().enumerate() {
                    let vj = &lc.v.row(j)[off..off + hd];
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += d_ctx_i[c] * vj[c];
                    }
                    *daj = acc;
                }
                let arow = a.row(i);
                let mut dot = 0.0;
                for (j, &daj) in da.iter().enumerate() {
                    dot += daj * arow[j];
                }
                for (j, &daj) in da.iter().enumerate() {
                    let ds = arow[j] * (daj - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let qi = &lc.q.row(i)[off..off + hd];
                    let kj = &lc.k.row(j)[off..off + hd];
                    let dqrow = dq.row_mut(i);
                    for c in 0..hd {
                        dqrow[off + c] += ds * kj[c];
                    }
                    let dkrow = dk.row_mut(j);
                    for c in 0..hd {
                        dkrow[off + c] += ds * qi[c];
                    }
                }
                for (j, _) in da.iter().enumerate() {
                    let w = arow[j];
                    if w == 0.0 {
                        continue;
                    }
                    let dvrow = dv.row_mut(j);
                    for c in 0..hd {
                        dvrow[off + c] += w * d_ctx_i[c];
                    }
                }
            }
        }

        grads[base + WQ] = matmul_tn(&lc.ln1_out, &dq);
        grads[base + WK] = matmul_tn(&lc.ln1_out, &dk);
        grads[base + WV] = matmul_tn(&lc.ln1_out, &dv);
        let mut d_ln1_out = matmul_nt(&dq, params.p(l, WQ));
        let d_from_k = matmul_nt(&dk, params.p(l, WK));
        let d_from_v = matmul_nt(&dv, params.p(l, WV));
        for ((o, &a), &b) in d_ln1_out.data.iter_mut().zip(&d_from_k.data).zip(&d_from_v.data) {
            *o += a + b;
        }
        let (mut dg1, mut db1) = (Tensor::zeros(1, d), Tensor::zeros(1, d));
        let d_x_in_from_ln = layer_norm_backward(
            &d_ln1_out,
            &lc.x_in,
            &lc.ln1_mean,
            &lc.ln1_rstd,
            params.p(l, LN1_G),
            &mut dg1,
            &mut db1,
        );
        grads[base + LN1_G] = dg1;
        grads[base + LN1_B] = db1;

        let mut d_x_in = d_x_mid;
        for (o, &v) in d_x_in.data.iter_mut().zip(&d_x_in_from_ln.data) {
            *o += v;
        }
        dx = d_x_in;
    }

    // Embeddings: x[t] = tok_emb[token] + pos_emb[t].
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let drow = dx.row(t);
        let erow = grads[TOK_EMB].row_mut(tok as usize);
        for (e, &g) in erow.iter_mut().zip(drow) {
            *e += g;
        }
        let prow = grads[POS_EMB].row_mut(t);
        for (p, &g) in prow.iter_mut().zip(drow) {
            *p += g;
        }
    }

    Ok((nll_sum, count, grads))
}

/// Loss and averaged gradients over a batch of `(tokens, loss_mask)`
/// sequences. Per-sequence work runs in parallel (under the `parallel`
/// feature); the reduction is a fixed-order sequential sum, so results do
/// not depend on thread count.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[(Vec<u32>, Vec<bool>)],
) -> Result<(f64, Vec<Tensor>), LmError> {
    let per_seq = exec::map_range(batch.len(), |i| seq_loss_and_grads(params, &batch[i]));
    reduce_batch(params, per_seq)
}

/// Sequential [`batch_loss_and_grads`]; same output bit for bit.
pub fn batch_loss_and_grads_seq(
    params: &ModelParams,
    batch: &[(Vec<u32>, Vec<bool>)],
) -> Result<(f64, Vec<Tensor>), LmError> {
    let per_seq = exec::map_range_seq(batch.len(), |i| seq_loss_and_grads(params, &batch[i]));
    reduce_batch(params, per_seq)
}

type SeqGrads = Result<Option<(f64, usize, Vec<Tensor>)>, LmError>;

fn seq_loss_and_grads(params: &ModelParams, (tokens, mask): &(Vec<u32>, Vec<bool>)) -> SeqGrads {
    if tokens.len() < 2 {
        return Ok(None);
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let tmask = &mask[1..];
    let cache = forward_cached(params, inputs)?;
    backward(params, &cache, targets, tmask).map(Some)
}

fn reduce_batch(
    params: &ModelParams,
    per_seq: Vec<SeqGrads>,
) -> Result<(f64, Vec<Tensor>), LmError> {
    let mut total = params.zero_grads();
    let mut nll_sum = 0.0f64;
    let mut count = 0usize;
    for item in per_seq {
        let Some((s, c, grads)) = item? else { continue };
        nll_sum += s;
        count += c;
        for (tot, g) in total.iter_mut().zip(&grads) {
            for (a, &b) in tot.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    }
    if count == 0 {
        return Err(LmError::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    for t in total.iter_mut() {
        for v in t.data.iter_mut() {
            *v *= inv;
        }
    }
    let loss = nll_sum * inv;
    if !loss.is_finite() {
        return Err(LmError::NonFiniteLoss);
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig { vocab_size: 10, dim: 8, num_layers: 2, num_heads: 2, max_seq_len: 16, seed: 7 }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
    }

    #[test]
    fn embedding_rows_match_vocab() {
        let cfg = ModelConfig { vocab_size: 22, ..tiny_config() };
        let params = init_model(&cfg).unwrap();
        assert_eq!(params.tok_emb().rows, 22);
        assert_eq!(params.out_proj().cols, 22);
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let params = init_model(&tiny_config()).unwrap();
        let logits = forward(&params, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(logits.rows, 5);
        assert_eq!(logits.cols, 10);
        assert!(logits.is_finite());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = init_model(&tiny_config()).unwrap();
        assert!(matches!(forward(&params, &[]), Err(LmError::EmptyPrompt)));
        assert!(matches!(forward(&params, &[11]), Err(LmError::TokenOutOfRange(11))));
        assert!(matches!(forward(&params, &[0; 17]), Err(LmError::SequenceTooLong { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { dim: 7, ..tiny_config() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { max_seq_len: 1, ..tiny_config() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn expand_keeps_old_parameters() {
        let params = init_model(&tiny_config()).unwrap();
        let expanded = expand_vocab(&params, 14, 99).unwrap();
        assert_eq!(expanded.config().vocab_size, 14);
        assert_eq!(expanded.tok_emb().rows, 14);
        for r in 0..10 {
            assert_eq!(expanded.tok_emb().row(r), params.tok_emb().row(r));
        }
        for r in 0..8 {
            assert_eq!(expanded.out_proj().row(r)[..10], params.out_proj().row(r)[..10]);
        }
        assert!(matches!(
            expand_vocab(&params, 5, 0),
            Err(LmError::ShrinkNotAllowed { old: 10, new: 5 })
        ));
    }

    #[test]
    fn expand_preserves_old_logits_and_shrinks_old_probs() {
        let params = init_model(&tiny_config()).unwrap();
        let expanded = expand_vocab(&params, 14, 99).unwrap();
        let prompt = [1u32, 4, 7];
        let before = forward(&params, &prompt).unwrap();
        let after = forward(&expanded, &prompt).unwrap();
        for t in 0..prompt.len() {
            for j in 0..10 {
                assert_eq!(before.get(t, j), after.get(t, j), "old logit changed at ({t},{j})");
            }
        }
        // Softmax mass on old ids weakly decreases: the denominator grows.
        let t = prompt.len() - 1;
        let p_before = crate::lm::softmax(before.row(t));
        let p_after = crate::lm::softmax(after.row(t));
        for j in 0..10 {
            assert!(p_after[j] <= p_before[j] + 1e-15);
        }
    }

    #[test]
    fn loss_analytic_values() {
        // Probability 1 on targets -> loss 0 (up to fp): huge margin logits.
        let mut logits = Tensor::filled(2, 4, -1000.0);
        logits.set(0, 1, 1000.0);
        logits.set(1, 2, 1000.0);
        let loss = nll_loss(&logits, &[1, 2], &[true, true]).unwrap();
        assert!(loss.abs() < 1e-9);

        // Uniform logits -> ln V.
        let logits = Tensor::zeros(3, 7);
        let loss = nll_loss(&logits, &[0, 3, 6], &[true, true, true]).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_mask_excludes_positions() {
        let params = init_model(&tiny_config()).unwrap();
        let logits = forward(&params, &[1, 2, 3, 4]).unwrap();
        // Masking the pad-like tail gives the same loss as the short batch.
        let full = nll_loss(&logits, &[2, 3, 4, 0], &[true, true, true, false]).unwrap();
        let short_logits = forward(&params, &[1, 2, 3]).unwrap();
        // Causal model: prefix logits are identical, so masked loss matches.
        let short = nll_loss(&short_logits, &[2, 3, 4], &[true, true, true]).unwrap();
        assert!((full - short).abs() < 1e-12);
        assert!(matches!(
            nll_loss(&logits, &[2, 3, 4, 0], &[false; 4]),
            Err(LmError::EmptyMask)
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = init_model(&tiny_config()).unwrap();
        let logits = forward(&params, &[0, 9, 5]).unwrap();
        for t in 0..3 {
            let p = crate::lm::softmax(logits.row(t));
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig {
            vocab_size: 9,
            dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            seed: 13,
        };
        let params = init_model(&cfg).unwrap();
        let tokens = [3u32, 1, 4, 1, 5, 8];
        let inputs = &tokens[..5];
        let targets = &tokens[1..];
        let mask = [true, true, false, true, true];

        let cache = forward_cached(&params, inputs).unwrap();
        let (_, count, grads) = backward(&params, &cache, targets, &mask).unwrap();
        assert_eq!(count, 4);

        let eps = 1e-5;
        let mut checked = 0usize;
        let mut worst: f64 = 0.0;
        for ti in 0..params.tensors().len() {
            for idx in 0..params.tensors()[ti].numel() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data[idx] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data[idx] -= eps;
                let lp = sum_nll(&plus, inputs, targets, &mask);
                let lm = sum_nll(&minus, inputs, targets, &mask);
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads[ti].data[idx];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "tensor {ti} elem {idx}: analytic {analytic}, numeric {numeric}, rel {rel}"
                );
                checked += 1;
            }
        }
        assert!(checked > 1000, "gradient check covered only {checked} parameters");
        assert!(worst < 1e-4);
    }

    fn sum_nll(params: &ModelParams, inputs: &[u32], targets: &[u32], mask: &[bool]) -> f64 {
        let logits = forward(params, inputs).unwrap();
        let mut sum = 0.0;
        for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                sum += position_nll(logits.row(t), target);
            }
        }
        sum
    }

    #[test]
    fn batch_grads_parallel_deterministic() {
        let params = init_model(&tiny_config()).unwrap();
        let batch: Vec<(Vec<u32>, Vec<bool>)> = (0..6)
            .map(|i| {
                let tokens: Vec<u32> = (0..8).map(|t| ((t + i) % 10) as u32).collect();
                let mask = vec![true; 8];
                (tokens, mask)
            })
            .collect();
        let (l1, g1) = batch_loss_and_grads(&params, &batch).unwrap();
        let (l2, g2) = batch_loss_and_grads(&params, &batch).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
