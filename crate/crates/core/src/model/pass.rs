//! Forward and backward passes.
//!
//! Sequences in a batch are processed one after another and their gradient
//! contributions are accumulated in sequence order, token order within a
//! sequence, and ascending expert order within a token. The result is
//! bitwise reproducible for a given (model, batch).

use serde::{Deserialize, Serialize};

use super::{names, GradientSet, Model, ModelConfig, TensorMap};
use crate::error::{Error, Result};
use crate::numerics::{kernels, rms_of, NumArray};

/// Token sequences; each sequence of length `n+1` yields `n` next-token
/// predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    sequences: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2) {
            return Err(Error::shape(
                "a batch needs at least one sequence of two or more tokens",
            ));
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    /// Number of predicted tokens.
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SublayerKind {
    Attention,
    Moe,
}

/// RMS of a sublayer's residual input (`s_in`) and branch output (`s_out`),
/// averaged over tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SublayerTrace {
    pub layer: usize,
    pub kind: SublayerKind,
    pub s_in: f64,
    pub s_out: f64,
}

/// Activation statistics of one pass.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub sublayers: Vec<SublayerTrace>,
    /// Residual-stream RMS after the embedding and after each layer.
    pub residual: Vec<f64>,
}

impl ForwardTrace {
    fn empty(layers: usize) -> Self {
        let mut sublayers = Vec::with_capacity(2 * layers);
        for layer in 0..layers {
            for kind in [SublayerKind::Attention, SublayerKind::Moe] {
                sublayers.push(SublayerTrace {
                    layer,
                    kind,
                    s_in: 0.0,
                    s_out: 0.0,
                });
            }
        }
        Self {
            sublayers,
            residual: vec![0.0; layers + 1],
        }
    }

    fn finish(&mut self, tokens: usize) {
        let n = tokens as f64;
        for s in &mut self.sublayers {
            s.s_in /= n;
            s.s_out /= n;
        }
        self.residual.iter_mut().for_each(|r| *r /= n);
    }
}

/// Output of [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub loss: f64,
    /// One `(n × vocab)` array per sequence.
    pub logits: Vec<NumArray>,
    pub trace: ForwardTrace,
}

/// One SwiGLU expert.
#[derive(Clone, Debug)]
pub struct Expert {
    pub up: NumArray,
    pub gate: NumArray,
    pub down: NumArray,
}

/// Per-token selected experts and their renormalized weights, sorted by
/// expert index.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub selected: Vec<Vec<(usize, f64)>>,
}

/// Token-wise RMSNorm over the last axis.
pub fn rmsnorm_forward(x: &NumArray, gamma: &NumArray, eps: f64) -> Result<NumArray> {
    let d = *x.shape().last().ok_or_else(|| Error::shape("rmsnorm of a scalar"))?;
    if gamma.shape() != [d] {
        return Err(Error::shape(format!(
            "gamma shape {:?} does not match feature extent {d}",
            gamma.shape()
        )));
    }
    let (z, _) = norm_rows(x.data(), gamma.data(), eps, d);
    NumArray::from_vec(x.shape(), z)
}

/// Applies layer `layer` to a single sequence's hidden states `h (n × d)`.
pub fn block_forward(model: &Model, layer: usize, h: &NumArray) -> Result<(NumArray, ForwardTrace)> {
    let cfg = model.config();
    if layer >= cfg.layers {
        return Err(Error::shape(format!("layer {layer} out of range")));
    }
    let (t, d) = h.dims2()?;
    if d != cfg.d_model {
        return Err(Error::shape(format!("hidden width {d} != d_model {}", cfg.d_model)));
    }
    let pl = PreparedLayer::new(model, layer)?;
    let mut trace = ForwardTrace::empty(1);
    trace.residual.truncate(1);
    let out = layer_forward(&pl, cfg, h.data().to_vec(), t, &mut trace, 0)?.0;
    let rms_out: f64 = (0..t).map(|i| rms_of(&out[i * d..(i + 1) * d])).sum();
    trace.residual[0] = rms_out;
    trace.finish(t);
    for s in &mut trace.sublayers {
        s.layer = layer;
    }
    Ok((NumArray::from_vec(&[t, d], out)?, trace))
}

/// Top-k MoE branch on normalized inputs `x_norm (n × d)`.
pub fn moe_forward(
    x_norm: &NumArray,
    router: &NumArray,
    experts: &[Expert],
    top_k: usize,
) -> Result<(NumArray, Routing)> {
    let (t, d) = x_norm.dims2()?;
    let (e_count, rd) = router.dims2()?;
    if top_k > e_count || top_k == 0 {
        return Err(Error::config(format!(
            "top_k ({top_k}) must be in 1..={e_count}"
        )));
    }
    if rd != d || experts.len() != e_count {
        return Err(Error::shape("router/expert extents do not match input"));
    }
    let router = Lin::new(router)?;
    let mats = experts
        .iter()
        .map(|e| Ok([Lin::new(&e.up)?, Lin::new(&e.gate)?, Lin::new(&e.down)?]))
        .collect::<Result<Vec<_>>>()?;
    let (out, cache) = moe_core(x_norm.data(), t, d, &router, &mats, top_k);
    Ok((
        NumArray::from_vec(&[t, d], out)?,
        Routing {
            selected: cache.selected,
        },
    ))
}

/// Mean next-token cross-entropy, logits and trace without gradients.
pub fn forward(model: &Model, batch: &Batch) -> Result<ForwardOutput> {
    let prep = Prepared::new(model)?;
    check_tokens(model.config(), batch)?;
    let n = batch.token_count();
    let mut trace = ForwardTrace::empty(model.config().layers);
    let mut loss_sum = 0.0;
    let mut logits = Vec::with_capacity(batch.sequences.len());
    for seq in &batch.sequences {
        let fwd = prep.sequence_forward(seq, &mut trace)?;
        let (l, _) = cross_entropy(&fwd.logits, &seq[1..], prep.vocab, n, false);
        loss_sum += l;
        logits.push(NumArray::from_vec(&[seq.len() - 1, prep.vocab], fwd.logits)?);
    }
    trace.finish(n);
    let loss = loss_sum / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({loss})")));
    }
    Ok(ForwardOutput {
        loss,
        logits,
        trace,
    })
}

/// Loss, exact parameter gradients and activation trace.
pub fn forward_backward(model: &Model, batch: &Batch) -> Result<(f64, GradientSet, ForwardTrace)> {
    let prep = Prepared::new(model)?;
    check_tokens(model.config(), batch)?;
    let n = batch.token_count();
    let mut trace = ForwardTrace::empty(model.config().layers);
    let mut grads = TensorMap::zeros_like(model.params());
    let mut loss_sum = 0.0;
    for seq in &batch.sequences {
        let fwd = prep.sequence_forward(seq, &mut trace)?;
        let (l, dlogits) = cross_entropy(&fwd.logits, &seq[1..], prep.vocab, n, true);
        loss_sum += l;
        prep.sequence_backward(seq, &fwd, &dlogits, &mut grads)?;
    }
    trace.finish(n);
    let loss = loss_sum / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({loss})")));
    }
    Ok((loss, grads, trace))
}

fn check_tokens(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    if let Some(bad) = batch
        .sequences
        .iter()
        .flatten()
        .find(|&&tok| tok as usize >= cfg.vocab)
    {
        return Err(Error::shape(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab
        )));
    }
    Ok(())
}

/// Sum of per-token losses and, optionally, `dL/dlogits` for the mean loss
/// over `total` tokens.
fn cross_entropy(
    logits: &[f64],
    targets: &[u32],
    vocab: usize,
    total: usize,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = if want_grad {
        vec![0.0; logits.len()]
    } else {
        Vec::new()
    };
    let inv_n = 1.0 / total as f64;
    for (t, &y) in targets.iter().enumerate() {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[y as usize];
        if want_grad {
            let g = &mut grad[t * vocab..(t + 1) * vocab];
            for (gv, &l) in g.iter_mut().zip(row) {
                *gv = (l - lse).exp() * inv_n;
            }
            g[y as usize] -= inv_n;
        }
    }
    (loss, grad)
}

/// Linear map `y = x Wᵀ` with `W` stored `(out × in)`.
struct Lin {
    w: Vec<f64>,
    wt: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Lin {
    fn new(a: &NumArray) -> Result<Self> {
        let (rows, cols) = a.dims2()?;
        Ok(Self {
            w: a.data().to_vec(),
            wt: kernels::transpose(a.data(), rows, cols),
            rows,
            cols,
        })
    }

    fn apply(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut y = vec![0.0; t * self.rows];
        kernels::gemm(x, &self.wt, &mut y, t, self.cols, self.rows);
        y
    }

    /// `dx += dy · W`.
    fn back_input(&self, dy: &[f64], t: usize, dx: &mut [f64]) {
        kernels::gemm(dy, &self.w, dx, t, self.rows, self.cols);
    }

    /// `g += dyᵀ · x`.
    fn back_weight(&self, dy: &[f64], x: &[f64], t: usize, g: &mut [f64]) {
        kernels::gemm_tn(dy, x, g, t, self.rows, self.cols);
    }
}

fn norm_rows(x: &[f64], gamma: &[f64], eps: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let t = x.len() / d;
    let mut z = vec![0.0; x.len()];
    let mut rinv = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        rinv[i] = r;
        for ((zv, &xv), &g) in z[i * d..(i + 1) * d].iter_mut().zip(row).zip(gamma) {
            *zv = xv * r * g;
        }
    }
    (z, rinv)
}

fn norm_rows_backward(
    dz: &[f64],
    x: &[f64],
    gamma: &[f64],
    rinv: &[f64],
    d: usize,
    dx: &mut [f64],
    dgamma: &mut [f64],
) {
    for (i, &r) in rinv.iter().enumerate() {
        let xr = &x[i * d..(i + 1) * d];
        let dzr = &dz[i * d..(i + 1) * d];
        let mut s = 0.0;
        for j in 0..d {
            s += dzr[j] * gamma[j] * xr[j];
        }
        let c = r * r * r * s / d as f64;
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dxr[j] += gamma[j] * dzr[j] * r - xr[j] * c;
            dgamma[j] += dzr[j] * xr[j] * r;
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal table `(t × d)`, tiled with period `base` across columns.
fn position_table(t: usize, d: usize, base: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let j = i % base;
            let freq = 10000f64.powf(-((2 * (j / 2)) as f64) / base as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = scale * if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

struct PreparedLayer {
    idx: usize,
    attn_norm: Vec<f64>,
    wq: Lin,
    wk: Lin,
    wv: Lin,
    wo: Lin,
    q_norm: Vec<f64>,
    k_norm: Vec<f64>,
    mlp_norm: Vec<f64>,
    router: Lin,
    experts: Vec<[Lin; 3]>,
}

impl PreparedLayer {
    fn new(model: &Model, l: usize) -> Result<Self> {
        let p = |w: &str| model.param(&names::layer(l, w));
        let experts = (0..model.config().experts)
            .map(|e| {
                Ok([
                    Lin::new(model.param(&names::expert(l, e, "up"))?)?,
                    Lin::new(model.param(&names::expert(l, e, "gate"))?)?,
                    Lin::new(model.param(&names::expert(l, e, "down"))?)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            idx: l,
            attn_norm: p("attn_norm")?.data().to_vec(),
            wq: Lin::new(p("wq")?)?,
            wk: Lin::new(p("wk")?)?,
            wv: Lin::new(p("wv")?)?,
            wo: Lin::new(p("wo")?)?,
            q_norm: p("q_norm")?.data().to_vec(),
            k_norm: p("k_norm")?.data().to_vec(),
            mlp_norm: p("mlp_norm")?.data().to_vec(),
            router: Lin::new(p("router")?)?,
            experts,
        })
    }
}

struct AttnCache {
    h_in: Vec<f64>,
    z: Vec<f64>,
    rinv: Vec<f64>,
    q_raw: Vec<f64>,
    k_raw: Vec<f64>,
    v: Vec<f64>,
    qn: Vec<f64>,
    kn: Vec<f64>,
    q_rinv: Vec<f64>,
    k_rinv: Vec<f64>,
    /// `(heads × t × t)` attention probabilities.
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

struct ExpertCache {
    tokens: Vec<usize>,
    weights: Vec<f64>,
    zin: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
}

struct MoeCache {
    h_in: Vec<f64>,
    z: Vec<f64>,
    rinv: Vec<f64>,
    selected: Vec<Vec<(usize, f64)>>,
    experts: Vec<ExpertCache>,
}

struct LayerCache {
    attn: AttnCache,
    moe: MoeCache,
}

struct SeqForward {
    layers: Vec<LayerCache>,
    h_final: Vec<f64>,
    final_rinv: Vec<f64>,
    zf: Vec<f64>,
    logits: Vec<f64>,
}

/// Query-row blocks `[i0, i1)`; block `[i0, i1)` only attends to keys
/// `< i1`, so products above the diagonal blocks are skipped.
fn causal_blocks(t: usize) -> impl Iterator<Item = (usize, usize)> {
    const BLOCK: usize = 16;
    (0..t).step_by(BLOCK).map(move |i0| (i0, (i0 + BLOCK).min(t)))
}

fn gather_cols(src: &[f64], t: usize, width: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * len);
    for i in 0..t {
        out.extend_from_slice(&src[i * width + start..i * width + start + len]);
    }
    out
}

fn scatter_add_cols(dst: &mut [f64], src: &[f64], t: usize, width: usize, start: usize, len: usize) {
    for i in 0..t {
        for (dv, sv) in dst[i * width + start..i * width + start + len]
            .iter_mut()
            .zip(&src[i * len..(i + 1) * len])
        {
            *dv += sv;
        }
    }
}

fn attn_forward(pl: &PreparedLayer, cfg: &ModelConfig, h: &[f64], t: usize) -> (Vec<f64>, AttnCache) {
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let (nh, nkv) = (cfg.n_heads, cfg.n_kv);
    let group = nh / nkv;
    let (z, rinv) = norm_rows(h, &pl.attn_norm, cfg.norm_eps, d);
    let q_raw = pl.wq.apply(&z, t);
    let k_raw = pl.wk.apply(&z, t);
    let v = pl.wv.apply(&z, t);
    let (qn, q_rinv) = norm_rows(&q_raw, &pl.q_norm, cfg.norm_eps, dh);
    let (kn, k_rinv) = norm_rows(&k_raw, &pl.k_norm, cfg.norm_eps, dh);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; nh * t * t];
    let mut ctx = vec![0.0; t * nh * dh];
    for head in 0..nh {
        let kvh = head / group;
        let qh = gather_cols(&qn, t, nh * dh, head * dh, dh);
        let kh = gather_cols(&kn, t, nkv * dh, kvh * dh, dh);
        let vh = gather_cols(&v, t, nkv * dh, kvh * dh, dh);
        let kht = kernels::transpose(&kh, t, dh);
        let p = &mut probs[head * t * t..(head + 1) * t * t];
        for (i0, i1) in causal_blocks(t) {
            kernels::gemm_strided(&qh[i0 * dh..], dh, &kht, t, &mut p[i0 * t..], t, i1 - i0, dh, i1);
        }
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            let mut m = f64::NEG_INFINITY;
            for s in row[..=i].iter_mut() {
                *s *= scale;
                m = m.max(*s);
            }
            let mut sum = 0.0;
            for s in row[..=i].iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            for s in row[..=i].iter_mut() {
                *s /= sum;
            }
            row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
        }
        let mut ch = vec![0.0; t * dh];
        for (i0, i1) in causal_blocks(t) {
            kernels::gemm_strided(&p[i0 * t..], t, &vh, dh, &mut ch[i0 * dh..], dh, i1 - i0, i1, dh);
        }
        scatter_add_cols(&mut ctx, &ch, t, nh * dh, head * dh, dh);
    }
    let out = pl.wo.apply(&ctx, t);
    let cache = AttnCache {
        h_in: h.to_vec(),
        z,
        rinv,
        q_raw,
        k_raw,
        v,
        qn,
        kn,
        q_rinv,
        k_rinv,
        probs,
        ctx,
    };
    (out, cache)
}

/// Router + experts on normalized input. Returns the branch output and a
/// cache without the norm fields filled in.
fn moe_core(
    z: &[f64],
    t: usize,
    d: usize,
    router: &Lin,
    experts: &[[Lin; 3]],
    top_k: usize,
) -> (Vec<f64>, MoeCache) {
    let e_count = experts.len();
    let logits = router.apply(z, t);
    let mut selected = Vec::with_capacity(t);
    let mut per_expert: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); e_count];
    for i in 0..t {
        let row = &logits[i * e_count..(i + 1) * e_count];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let mut order: Vec<usize> = (0..e_count).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = order[..top_k].to_vec();
        chosen.sort_unstable();
        let norm: f64 = chosen.iter().map(|&e| probs[e]).sum();
        let sel: Vec<(usize, f64)> = chosen.iter().map(|&e| (e, probs[e] / norm)).collect();
        for &(e, w) in &sel {
            per_expert[e].0.push(i);
            per_expert[e].1.push(w);
        }
        selected.push(sel);
    }
    let mut out = vec![0.0; t * d];
    let mut caches = Vec::with_capacity(e_count);
    for (e, (tokens, weights)) in per_expert.into_iter().enumerate() {
        let n = tokens.len();
        let [up, gate, down] = &experts[e];
        let mut zin = Vec::with_capacity(n * d);
        for &tok in &tokens {
            zin.extend_from_slice(&z[tok * d..(tok + 1) * d]);
        }
        let u = up.apply(&zin, n);
        let g = gate.apply(&zin, n);
        let a: Vec<f64> = u.iter().zip(&g).map(|(uv, gv)| silu(*gv) * uv).collect();
        let y = down.apply(&a, n);
        for (r, (&tok, &w)) in tokens.iter().zip(&weights).enumerate() {
            for (o, yv) in out[tok * d..(tok + 1) * d].iter_mut().zip(&y[r * d..(r + 1) * d]) {
                *o += w * yv;
            }
        }
        caches.push(ExpertCache {
            tokens,
            weights,
            zin,
            u,
            g,
            a,
            y,
        });
    }
    let cache = MoeCache {
        h_in: Vec::new(),
        z: Vec::new(),
        rinv: Vec::new(),
        selected,
        experts: caches,
    };
    (out, cache)
}

fn moe_forward_layer(pl: &PreparedLayer, cfg: &ModelConfig, h: &[f64], t: usize) -> (Vec<f64>, MoeCache) {
    let (z, rinv) = norm_rows(h, &pl.mlp_norm, cfg.norm_eps, cfg.d_model);
    let (out, mut cache) = moe_core(&z, t, cfg.d_model, &pl.router, &pl.experts, cfg.top_k);
    cache.h_in = h.to_vec();
    cache.z = z;
    cache.rinv = rinv;
    (out, cache)
}

fn add_trace(trace: &mut ForwardTrace, slot: usize, input: &[f64], output: &[f64], t: usize, d: usize) {
    let s = &mut trace.sublayers[slot];
    for i in 0..t {
        s.s_in += rms_of(&input[i * d..(i + 1) * d]);
        s.s_out += rms_of(&output[i * d..(i + 1) * d]);
    }
}

/// One layer on a single sequence; trace slots start at `2·slot_layer`.
fn layer_forward(
    pl: &PreparedLayer,
    cfg: &ModelConfig,
    mut h: Vec<f64>,
    t: usize,
    trace: &mut ForwardTrace,
    slot_layer: usize,
) -> Result<(Vec<f64>, LayerCache)> {
    let d = cfg.d_model;
    let (attn_out, attn) = attn_forward(pl, cfg, &h, t);
    add_trace(trace, 2 * slot_layer, &h, &attn_out, t, d);
    h.iter_mut().zip(&attn_out).for_each(|(a, b)| *a += b);
    let (moe_out, moe) = moe_forward_layer(pl, cfg, &h, t);
    add_trace(trace, 2 * slot_layer + 1, &h, &moe_out, t, d);
    h.iter_mut().zip(&moe_out).for_each(|(a, b)| *a += b);
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite activation in layer {}",
            pl.idx
        )));
    }
    Ok((h, LayerCache { attn, moe }))
}

struct Prepared<'m> {
    model: &'m Model,
    layers: Vec<PreparedLayer>,
    head: Lin,
    head_name: &'static str,
    final_norm: Vec<f64>,
    vocab: usize,
}

impl<'m> Prepared<'m> {
    fn new(model: &'m Model) -> Result<Self> {
        let cfg = model.config();
        let head_name = if cfg.tie_embeddings {
            names::EMBED
        } else {
            names::LM_HEAD
        };
        Ok(Self {
            model,
            layers: (0..cfg.layers)
                .map(|l| PreparedLayer::new(model, l))
                .collect::<Result<_>>()?,
            head: Lin::new(model.param(head_name)?)?,
            head_name,
            final_norm: model.param(names::FINAL_NORM)?.data().to_vec(),
            vocab: cfg.vocab,
        })
    }

    fn sequence_forward(&self, seq: &[u32], trace: &mut ForwardTrace) -> Result<SeqForward> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let inputs = &seq[..seq.len() - 1];
        let t = inputs.len();
        let embed = self.model.param(names::EMBED)?;
        let mut h = position_table(t, d, cfg.pos_base, cfg.pos_scale);
        for (i, &tok) in inputs.iter().enumerate() {
            for (hv, ev) in h[i * d..(i + 1) * d].iter_mut().zip(embed.row(tok as usize)) {
                *hv += ev;
            }
        }
        trace.residual[0] += (0..t).map(|i| rms_of(&h[i * d..(i + 1) * d])).sum::<f64>();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, pl) in self.layers.iter().enumerate() {
            let (h_next, cache) = layer_forward(pl, cfg, h, t, trace, l)?;
            h = h_next;
            trace.residual[l + 1] += (0..t).map(|i| rms_of(&h[i * d..(i + 1) * d])).sum::<f64>();
            layers.push(cache);
        }
        let (zf, final_rinv) = norm_rows(&h, &self.final_norm, cfg.norm_eps, d);
        let mut logits = self.head.apply(&zf, t);
        let s = self.model.logit_scale();
        if s != 1.0 {
            logits.iter_mut().for_each(|l| *l *= s);
        }
        Ok(SeqForward {
            layers,
            h_final: h,
            final_rinv,
            zf,
            logits,
        })
    }

    fn sequence_backward(
        &self,
        seq: &[u32],
        fwd: &SeqForward,
        dlogits: &[f64],
        grads: &mut GradientSet,
    ) -> Result<()> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let t = seq.len() - 1;
        let s = self.model.logit_scale();
        let dproj: Vec<f64> = if s != 1.0 {
            dlogits.iter().map(|g| g * s).collect()
        } else {
            dlogits.to_vec()
        };
        let mut dzf = vec![0.0; t * d];
        self.head.back_input(&dproj, t, &mut dzf);
        self.head
            .back_weight(&dproj, &fwd.zf, t, grads.get_mut(self.head_name)?.data_mut());
        let mut dh = vec![0.0; t * d];
        norm_rows_backward(
            &dzf,
            &fwd.h_final,
            &self.final_norm,
            &fwd.final_rinv,
            d,
            &mut dh,
            grads.get_mut(names::FINAL_NORM)?.data_mut(),
        );
        for (pl, cache) in self.layers.iter().zip(&fwd.layers).rev() {
            // Residual: gradient flows both through the branch and straight on.
            let mut dh_mid = dh.clone();
            moe_backward(pl, cfg, &cache.moe, &dh, t, grads, &mut dh_mid)?;
            let mut dh_in = dh_mid.clone();
            attn_backward(pl, cfg, &cache.attn, &dh_mid, t, grads, &mut dh_in)?;
            dh = dh_in;
        }
        let gembed = grads.get_mut(names::EMBED)?.data_mut();
        for (i, &tok) in seq[..t].iter().enumerate() {
            let row = tok as usize;
            for (g, v) in gembed[row * d..(row + 1) * d].iter_mut().zip(&dh[i * d..(i + 1) * d]) {
                *g += v;
            }
        }
        Ok(())
    }
}

fn moe_backward(
    pl: &PreparedLayer,
    cfg: &ModelConfig,
    c: &MoeCache,
    dout: &[f64],
    t: usize,
    grads: &mut GradientSet,
    dh: &mut [f64],
) -> Result<()> {
    let d = cfg.d_model;
    let e_count = cfg.experts;
    let l = pl.idx;
    let mut dz = vec![0.0; t * d];
    let mut dw = vec![0.0; t * e_count];
    for (e, ec) in c.experts.iter().enumerate() {
        let n = ec.tokens.len();
        if n == 0 {
            continue;
        }
        let [up, gate, down] = &pl.experts[e];
        let f = up.rows;
        let mut dy = vec![0.0; n * d];
        for (r, (&tok, &w)) in ec.tokens.iter().zip(&ec.weights).enumerate() {
            let go = &dout[tok * d..(tok + 1) * d];
            let yr = &ec.y[r * d..(r + 1) * d];
            let mut dot = 0.0;
            for j in 0..d {
                dy[r * d + j] = w * go[j];
                dot += go[j] * yr[j];
            }
            dw[tok * e_count + e] = dot;
        }
        down.back_weight(&dy, &ec.a, n, grads.get_mut(&names::expert(l, e, "down"))?.data_mut());
        let mut da = vec![0.0; n * f];
        down.back_input(&dy, n, &mut da);
        let mut du = vec![0.0; n * f];
        let mut dg = vec![0.0; n * f];
        for i in 0..n * f {
            du[i] = da[i] * silu(ec.g[i]);
            dg[i] = da[i] * ec.u[i] * silu_grad(ec.g[i]);
        }
        up.back_weight(&du, &ec.zin, n, grads.get_mut(&names::expert(l, e, "up"))?.data_mut());
        gate.back_weight(&dg, &ec.zin, n, grads.get_mut(&names::expert(l, e, "gate"))?.data_mut());
        let mut dzin = vec![0.0; n * d];
        up.back_input(&du, n, &mut dzin);
        gate.back_input(&dg, n, &mut dzin);
        for (r, &tok) in ec.tokens.iter().enumerate() {
            for (a, b) in dz[tok * d..(tok + 1) * d].iter_mut().zip(&dzin[r * d..(r + 1) * d]) {
                *a += b;
            }
        }
    }
    // Renormalized top-k weights are a softmax over the selected logits.
    let mut dlogits = vec![0.0; t * e_count];
    for (i, sel) in c.selected.iter().enumerate() {
        let inner: f64 = sel.iter().map(|&(e, w)| w * dw[i * e_count + e]).sum();
        for &(e, w) in sel {
            dlogits[i * e_count + e] = w * (dw[i * e_count + e] - inner);
        }
    }
    pl.router
        .back_weight(&dlogits, &c.z, t, grads.get_mut(&names::layer(l, "router"))?.data_mut());
    pl.router.back_input(&dlogits, t, &mut dz);
    norm_rows_backward(
        &dz,
        &c.h_in,
        &pl.mlp_norm,
        &c.rinv,
        d,
        dh,
        grads.get_mut(&names::layer(l, "mlp_norm"))?.data_mut(),
    );
    Ok(())
}

fn attn_backward(
    pl: &PreparedLayer,
    cfg: &ModelConfig,
    c: &AttnCache,
    dout: &[f64],
    t: usize,
    grads: &mut GradientSet,
    dh: &mut [f64],
) -> Result<()> {
    let d = cfg.d_model;
    let dh_dim = cfg.d_head;
    let (nh, nkv) = (cfg.n_heads, cfg.n_kv);
    let group = nh / nkv;
    let l = pl.idx;
    let scale = 1.0 / (dh_dim as f64).sqrt();

    pl.wo
        .back_weight(dout, &c.ctx, t, grads.get_mut(&names::layer(l, "wo"))?.data_mut());
    let mut dctx = vec![0.0; t * nh * dh_dim];
    pl.wo.back_input(dout, t, &mut dctx);

    let mut dqn = vec![0.0; t * nh * dh_dim];
    let mut dkn = vec![0.0; t * nkv * dh_dim];
    let mut dv = vec![0.0; t * nkv * dh_dim];
    for head in 0..nh {
        let kvh = head / group;
        let p = &c.probs[head * t * t..(head + 1) * t * t];
        let dch = gather_cols(&dctx, t, nh * dh_dim, head * dh_dim, dh_dim);
        let vh = gather_cols(&c.v, t, nkv * dh_dim, kvh * dh_dim, dh_dim);
        let qh = gather_cols(&c.qn, t, nh * dh_dim, head * dh_dim, dh_dim);
        let kh = gather_cols(&c.kn, t, nkv * dh_dim, kvh * dh_dim, dh_dim);
        let mut dp = vec![0.0; t * t];
        let vt = kernels::transpose(&vh, t, dh_dim);
        for (i0, i1) in causal_blocks(t) {
            kernels::gemm_strided(&dch[i0 * dh_dim..], dh_dim, &vt, t, &mut dp[i0 * t..], t, i1 - i0, dh_dim, i1);
        }
        let mut dvh = vec![0.0; t * dh_dim];
        for (j0, j1) in causal_blocks(t) {
            kernels::gemm_strided_tn(&p[j0 * t + j0..], t, &dch[j0 * dh_dim..], dh_dim, &mut dvh[j0 * dh_dim..], dh_dim, j1 - j0, t - j0, dh_dim);
        }
        scatter_add_cols(&mut dv, &dvh, t, nkv * dh_dim, kvh * dh_dim, dh_dim);
        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), then the 1/sqrt(d_head) factor.
        let mut ds = vec![0.0; t * t];
        for i in 0..t {
            let pr = &p[i * t..=i * t + i];
            let dpr = &dp[i * t..=i * t + i];
            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                ds[i * t + j] = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        let mut dqh = vec![0.0; t * dh_dim];
        for (i0, i1) in causal_blocks(t) {
            kernels::gemm_strided(&ds[i0 * t..], t, &kh, dh_dim, &mut dqh[i0 * dh_dim..], dh_dim, i1 - i0, i1, dh_dim);
        }
        scatter_add_cols(&mut dqn, &dqh, t, nh * dh_dim, head * dh_dim, dh_dim);
        let mut dkh = vec![0.0; t * dh_dim];
        for (j0, j1) in causal_blocks(t) {
            kernels::gemm_strided_tn(&ds[j0 * t + j0..], t, &qh[j0 * dh_dim..], dh_dim, &mut dkh[j0 * dh_dim..], dh_dim, j1 - j0, t - j0, dh_dim);
        }
        scatter_add_cols(&mut dkn, &dkh, t, nkv * dh_dim, kvh * dh_dim, dh_dim);
    }
    let mut dq_raw = vec![0.0; t * nh * dh_dim];
    norm_rows_backward(
        &dqn,
        &c.q_raw,
        &pl.q_norm,
        &c.q_rinv,
        dh_dim,
        &mut dq_raw,
        grads.get_mut(&names::layer(l, "q_norm"))?.data_mut(),
    );
    let mut dk_raw = vec![0.0; t * nkv * dh_dim];
    norm_rows_backward(
        &dkn,
        &c.k_raw,
        &pl.k_norm,
        &c.k_rinv,
        dh_dim,
        &mut dk_raw,
        grads.get_mut(&names::layer(l, "k_norm"))?.data_mut(),
    );
    pl.wq
        .back_weight(&dq_raw, &c.z, t, grads.get_mut(&names::layer(l, "wq"))?.data_mut());
    pl.wk
        .back_weight(&dk_raw, &c.z, t, grads.get_mut(&names::layer(l, "wk"))?.data_mut());
    pl.wv
        .back_weight(&dv, &c.z, t, grads.get_mut(&names::layer(l, "wv"))?.data_mut());
    let mut dz = vec![0.0; t * d];
    pl.wq.back_input(&dq_raw, t, &mut dz);
    pl.wk.back_input(&dk_raw, t, &mut dz);
    pl.wv.back_input(&dv, t, &mut dz);
    norm_rows_backward(
        &dz,
        &c.h_in,
        &pl.attn_norm,
        &c.rinv,
        d,
        dh,
        grads.get_mut(&names::layer(l, "attn_norm"))?.data_mut(),
    );
    Ok(())
}
