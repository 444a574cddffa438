//! Forward pass with activation cache and the matching hand-written backward.
//! Matrices are row-major `Vec<f64>`; a sequence of `m` tokens gives `m` rows.

use super::{BiasSource, ModelConfig, Parameters, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub m: usize,
    /// `m × vocab` unnormalised scores.
    pub logits: Vec<f64>,
    /// Residual stream after each block, `m × d_model` each.
    pub hidden: Vec<Vec<f64>>,
}

impl ForwardOutput {
    /// Row `t` of hidden layer `layer` (1-based, as in `extraction_layer`).
    pub fn hidden_row(&self, layer: usize, t: usize) -> &[f64] {
        let h = &self.hidden[layer - 1];
        let d = h.len() / self.m;
        &h[t * d..(t + 1) * d]
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
}

pub(super) struct Cache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    h_final: Vec<f64>,
}

fn layer_norm(x: &[f64], m: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; m * d];
    let mut xhat = vec![0.0; m * d];
    let mut rstd = vec![0.0; m];
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let xh = (row[k] - mean) * r;
            xhat[i * d + k] = xh;
            y[i * d + k] = g[k] * xh + b[k];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    m: usize,
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; m * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..m {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
            dxhat[k] = dyr[k] * g[k];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for k in 0..d {
            dx[i * d + k] = cache.rstd[i] * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `y = x·W + b` for `x: m×k`, `W: k×n`.
fn linear(x: &[f64], m: usize, k: usize, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yr = &mut y[i * n..(i + 1) * n];
        yr.copy_from_slice(b);
        for (kk, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, wv) in yr.iter_mut().zip(&w[kk * n..(kk + 1) * n]) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Accumulates `dW`, `db` and returns `dx` for [`linear`].
#[allow(clippy::too_many_arguments)]
fn linear_back(
    dy: &[f64],
    x: &[f64],
    m: usize,
    k: usize,
    w: &[f64],
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; m * k];
    for i in 0..m {
        let dyr = &dy[i * n..(i + 1) * n];
        for (dbv, g) in db.iter_mut().zip(dyr) {
            *dbv += g;
        }
        let xr = &x[i * k..(i + 1) * k];
        for kk in 0..k {
            let wr = &w[kk * n..(kk + 1) * n];
            dx[i * k + kk] = wr.iter().zip(dyr).map(|(a, b)| a * b).sum();
            let xv = xr[kk];
            if xv != 0.0 {
                for (dwv, g) in dw[kk * n..(kk + 1) * n].iter_mut().zip(dyr) {
                    *dwv += xv * g;
                }
            }
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal multi-head attention on a packed `m × 3d` qkv matrix. Returns the
/// concatenated head outputs (`m × d`) and the attention weights
/// (`heads × m × m`, zero above the diagonal).
fn attention(qkv: &[f64], m: usize, cfg: &ModelConfig, rel: Option<&Tensor>) -> (Vec<f64>, Vec<f64>) {
    let (h_n, dh, d) = (cfg.n_heads, cfg.d_head, cfg.d_model());
    let n = cfg.max_seq;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; m * d];
    let mut probs = vec![0.0; h_n * m * m];
    let mut row = vec![0.0; m];
    for h in 0..h_n {
        let q_at = |i: usize| &qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
        let k_at = |j: usize| &qkv[i_k(j, d) + h * dh..i_k(j, d) + (h + 1) * dh];
        let v_at = |j: usize| &qkv[i_v(j, d) + h * dh..i_v(j, d) + (h + 1) * dh];
        for i in 0..m {
            let q = q_at(i);
            let src = match cfg.bias_source {
                BiasSource::Query => q,
                BiasSource::Key => k_at(i),
            };
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let mut s = dot(q, k_at(j));
                if let Some(table) = rel {
                    let r = n - 1 + j - i;
                    s += dot(src, &table.data[r * dh..(r + 1) * dh]);
                }
                row[j] = s * scale;
                max = max.max(row[j]);
            }
            let mut z = 0.0;
            for v in row.iter_mut().take(i + 1) {
                *v = (*v - max).exp();
                z += *v;
            }
            let p = &mut probs[(h * m + i) * m..(h * m + i + 1) * m];
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..=i {
                p[j] = row[j] / z;
                for (ov, vv) in o.iter_mut().zip(v_at(j)) {
                    *ov += p[j] * vv;
                }
            }
        }
    }
    (out, probs)
}

fn i_k(j: usize, d: usize) -> usize {
    j * 3 * d + d
}

fn i_v(j: usize, d: usize) -> usize {
    j * 3 * d + 2 * d
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Backward of [`attention`]: returns `d qkv` and accumulates into `d_rel`.
fn attention_back(
    d_out: &[f64],
    qkv: &[f64],
    probs: &[f64],
    m: usize,
    cfg: &ModelConfig,
    rel: Option<&Tensor>,
    mut d_rel: Option<&mut Tensor>,
) -> Vec<f64> {
    let (h_n, dh, d) = (cfg.n_heads, cfg.d_head, cfg.d_model());
    let n = cfg.max_seq;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; m * 3 * d];
    let mut dp = vec![0.0; m];
    let mut dsrc = vec![0.0; dh];
    for h in 0..h_n {
        for i in 0..m {
            let p = &probs[(h * m + i) * m..(h * m + i + 1) * m];
            let dout = &d_out[i * d + h * dh..i * d + (h + 1) * dh];
            let mut weighted = 0.0;
            for j in 0..=i {
                let vj = i_v(j, d) + h * dh;
                dp[j] = dot(dout, &qkv[vj..vj + dh]);
                weighted += p[j] * dp[j];
                axpy(p[j], dout, &mut dqkv[vj..vj + dh]);
            }
            let qi = i * 3 * d + h * dh;
            let src_at = match cfg.bias_source {
                BiasSource::Query => qi,
                BiasSource::Key => i_k(i, d) + h * dh,
            };
            dsrc.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = i_k(j, d) + h * dh;
                // dq_i += ds·k_j ; dk_j += ds·q_i
                for t in 0..dh {
                    dqkv[qi + t] += ds * qkv[kj + t];
                    dqkv[kj + t] += ds * qkv[qi + t];
                }
                if let (Some(table), Some(dt)) = (rel, d_rel.as_deref_mut()) {
                    let r = n - 1 + j - i;
                    axpy(ds, &table.data[r * dh..(r + 1) * dh], &mut dsrc);
                    axpy(ds, &qkv[src_at..src_at + dh], &mut dt.data[r * dh..(r + 1) * dh]);
                }
            }
            if rel.is_some() {
                axpy(1.0, &dsrc, &mut dqkv[src_at..src_at + dh]);
            }
        }
    }
    dqkv
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::invalid("empty input sequence"));
    }
    if ids.len() > cfg.max_seq {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds max_seq {}",
            ids.len(),
            cfg.max_seq
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::IdOutOfRange {
            id,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

pub(super) fn forward_cached(params: &Parameters, ids: &[u32]) -> Result<(ForwardOutput, Cache)> {
    let cfg = &params.config;
    check_ids(cfg, ids)?;
    let (m, d, f, v) = (ids.len(), cfg.d_model(), cfg.d_ff(), cfg.vocab_size);
    let mut x = vec![0.0; m * d];
    for (i, &id) in ids.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(&params.tok_emb.data[id as usize * d..(id as usize + 1) * d]);
        if let Some(pos) = &params.pos_emb {
            axpy(1.0, &pos.data[i * d..(i + 1) * d], row);
        }
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&x, m, d, &lp.ln1_g.data, &lp.ln1_b.data);
        let qkv = linear(&a, m, d, &lp.w_qkv.data, &lp.b_qkv.data, 3 * d);
        let (attn, probs) = attention(&qkv, m, cfg, lp.rel.as_ref());
        let proj = linear(&attn, m, d, &lp.w_o.data, &lp.b_o.data, d);
        let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let (c, ln2) = layer_norm(&x_mid, m, d, &lp.ln2_g.data, &lp.ln2_b.data);
        let f_pre = linear(&c, m, d, &lp.w_fc.data, &lp.b_fc.data, f);
        let f_act: Vec<f64> = f_pre.iter().map(|&z| gelu(z)).collect();
        let mlp = linear(&f_act, m, f, &lp.w_proj.data, &lp.b_proj.data, d);
        let x_out: Vec<f64> = x_mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        x.clone_from(&x_out);
        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            attn,
            ln2,
            c,
            f_pre,
            f_act,
        });
        hidden.push(x_out);
    }
    let (h_final, lnf) = layer_norm(&x, m, d, &params.lnf_g.data, &params.lnf_b.data);
    let logits = linear(&h_final, m, d, &params.w_out.data, &vec![0.0; v], v);
    Ok((
        ForwardOutput { m, logits, hidden },
        Cache {
            ids: ids.to_vec(),
            layers,
            lnf,
            h_final,
        },
    ))
}

/// Runs the model on `ids` (at most `max_seq` tokens).
pub fn forward(params: &Parameters, ids: &[u32]) -> Result<ForwardOutput> {
    forward_cached(params, ids).map(|(out, _)| out)
}

pub(super) fn backward(params: &Parameters, cache: &Cache, dlogits: &[f64]) -> Parameters {
    let cfg = &params.config;
    let (m, d, f, v) = (cache.ids.len(), cfg.d_model(), cfg.d_ff(), cfg.vocab_size);
    let mut g = params.zeros_like();
    let mut scratch_bias = vec![0.0; v];
    let dh_final = linear_back(
        dlogits,
        &cache.h_final,
        m,
        d,
        &params.w_out.data,
        v,
        &mut g.w_out.data,
        &mut scratch_bias,
    );
    let mut dx = layer_norm_back(
        &dh_final,
        &cache.lnf,
        &params.lnf_g.data,
        m,
        d,
        &mut g.lnf_g.data,
        &mut g.lnf_b.data,
    );
    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let gl = &mut g.layers[li];
        // x_out = x_mid + mlp(ln2(x_mid))
        let d_act = linear_back(
            &dx,
            &lc.f_act,
            m,
            f,
            &lp.w_proj.data,
            d,
            &mut gl.w_proj.data,
            &mut gl.b_proj.data,
        );
        let d_pre: Vec<f64> = d_act.iter().zip(&lc.f_pre).map(|(g, &z)| g * gelu_grad(z)).collect();
        let dc = linear_back(
            &d_pre,
            &lc.c,
            m,
            d,
            &lp.w_fc.data,
            f,
            &mut gl.w_fc.data,
            &mut gl.b_fc.data,
        );
        let d_mid_ln = layer_norm_back(
            &dc,
            &lc.ln2,
            &lp.ln2_g.data,
            m,
            d,
            &mut gl.ln2_g.data,
            &mut gl.ln2_b.data,
        );
        let d_mid: Vec<f64> = dx.iter().zip(&d_mid_ln).map(|(a, b)| a + b).collect();
        // x_mid = x_in + attn(ln1(x_in))
        let d_attn = linear_back(
            &d_mid,
            &lc.attn,
            m,
            d,
            &lp.w_o.data,
            d,
            &mut gl.w_o.data,
            &mut gl.b_o.data,
        );
        let dqkv = attention_back(&d_attn, &lc.qkv, &lc.probs, m, cfg, lp.rel.as_ref(), gl.rel.as_mut());
        let da = linear_back(
            &dqkv,
            &lc.a,
            m,
            d,
            &lp.w_qkv.data,
            3 * d,
            &mut gl.w_qkv.data,
            &mut gl.b_qkv.data,
        );
        let d_in_ln = layer_norm_back(
            &da,
            &lc.ln1,
            &lp.ln1_g.data,
            m,
            d,
            &mut gl.ln1_g.data,
            &mut gl.ln1_b.data,
        );
        dx = d_mid.iter().zip(&d_in_ln).map(|(a, b)| a + b).collect();
    }
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        axpy(1.0, row, &mut g.tok_emb.data[id as usize * d..(id as usize + 1) * d]);
        if let Some(pos) = &mut g.pos_emb {
            axpy(1.0, row, &mut pos.data[i * d..(i + 1) * d]);
        }
    }
    g
}

/// Mean next-token cross-entropy of `logits` (`m × vocab`) against `targets`.
pub fn lm_loss(logits: &[f64], targets: &[u32], vocab: usize) -> Result<f64> {
    lm_loss_grad(logits, targets, vocab).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn lm_loss_grad(logits: &[f64], targets: &[u32], vocab: usize) -> Result<(f64, Vec<f64>)> {
    let m = targets.len();
    if m == 0 || logits.len() != m * vocab {
        return Err(Error::shape(format!(
            "{} logits for {} targets over {} classes",
            logits.len(),
            m,
            vocab
        )));
    }
    let mut grad = vec![0.0; m * vocab];
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::IdOutOfRange { id: t, size: vocab });
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[t as usize];
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        for (gv, &x) in g.iter_mut().zip(row) {
            *gv = (x - log_z).exp() / m as f64;
        }
        g[t as usize] -= 1.0 / m as f64;
    }
    Ok((loss / m as f64, grad))
}

/// Loss and parameter gradients for one sequence: the model reads
/// `seq[..len−1]` and predicts `seq[1..]`.
pub fn loss_and_grad(params: &Parameters, seq: &[u32]) -> Result<(f64, Parameters)> {
    if seq.len() < 2 {
        return Err(Error::invalid("a training sequence needs at least 2 tokens"));
    }
    let (out, cache) = forward_cached(params, &seq[..seq.len() - 1])?;
    let (loss, dlogits) = lm_loss_grad(&out.logits, &seq[1..], params.config.vocab_size)?;
    Ok((loss, backward(params, &cache, &dlogits)))
}
