//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use widegrow::harness::{Corpus, CorpusSpec};
use widegrow::model::{names, Batch, Model, ModelConfig};
use widegrow::numerics::NumArray;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        d_ffn: 8,
        n_heads: 4,
        n_kv: 2,
        d_head: 4,
        experts: 4,
        top_k: 2,
        vocab: 11,
        tie_embeddings: true,
        norm_eps: 1e-6,
        pos_base: 16,
        pos_scale: 0.125,
    }
}

pub fn markov_batch(vocab: usize, seed: u64, sequences: usize, length: usize) -> Batch {
    Corpus::new(&CorpusSpec::default(), vocab)
        .unwrap()
        .batch(seed, sequences, length)
        .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type Mat = Vec<Vec<f64>>;

fn mat(a: &NumArray) -> Mat {
    let (r, c) = a.dims2().unwrap();
    (0..r).map(|i| a.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// `W x` with `W` stored `(out × in)`.
fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, gv)| v * r * gv).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Experts `(up, gate, down)` of one layer.
pub struct OracleExpert {
    pub up: Mat,
    pub gate: Mat,
    pub down: Mat,
}

impl OracleExpert {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let u = matvec(&self.up, x);
        let g = matvec(&self.gate, x);
        let a: Vec<f64> = u.iter().zip(&g).map(|(uv, gv)| silu(*gv) * uv).collect();
        matvec(&self.down, &a)
    }
}

/// Routed mixture for one token: softmax over all experts, the `k`
/// largest probabilities (ties to the lower index), renormalized, summed
/// in ascending expert order.
pub fn oracle_moe(x: &[f64], router: &Mat, experts: &[OracleExpert], k: usize) -> (Vec<f64>, Vec<(usize, f64)>) {
    let p = softmax(&matvec(router, x));
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort();
    let z: f64 = chosen.iter().map(|&e| p[e]).sum();
    let mut out = vec![0.0; x.len()];
    let mut sel = Vec::new();
    for &e in &chosen {
        let w = p[e] / z;
        for (o, y) in out.iter_mut().zip(experts[e].apply(x)) {
            *o += w * y;
        }
        sel.push((e, w));
    }
    (out, sel)
}

/// Per-sequence result of the oracle forward pass.
pub struct OracleOutput {
    pub logits: Mat,
    pub loss_sum: f64,
    /// Per sublayer (attention, MoE for each layer): sums over tokens of
    /// input RMS and branch-output RMS.
    pub sublayer_sums: Vec<(f64, f64)>,
    /// Residual RMS sums after embedding and after each layer.
    pub residual_sums: Vec<f64>,
}

/// Straight-line forward pass with per-token loops.
pub fn oracle_forward(model: &Model, seq: &[u32]) -> OracleOutput {
    let cfg = model.config();
    let p = |n: &str| model.param(n).unwrap();
    let (d, dh, nh, nkv) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.n_kv);
    let inputs = &seq[..seq.len() - 1];
    let t = inputs.len();
    let embed = mat(p(names::EMBED));
    let mut h: Mat = (0..t)
        .map(|pos| {
            (0..d)
                .map(|i| {
                    let j = i % cfg.pos_base;
                    let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / cfg.pos_base as f64);
                    let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    cfg.pos_scale * pe + embed[inputs[pos] as usize][i]
                })
                .collect()
        })
        .collect();
    let mut sublayer_sums = Vec::new();
    let mut residual_sums = vec![h.iter().map(|r| rms(r)).sum()];
    for l in 0..cfg.layers {
        let lp = |w: &str| p(&names::layer(l, w));
        let (wq, wk, wv, wo) = (mat(lp("wq")), mat(lp("wk")), mat(lp("wv")), mat(lp("wo")));
        let (qg, kg) = (lp("q_norm").data().to_vec(), lp("k_norm").data().to_vec());
        let z: Mat = h.iter().map(|r| rmsnorm(r, lp("attn_norm").data(), cfg.norm_eps)).collect();
        let q: Mat = z.iter().map(|r| matvec(&wq, r)).collect();
        let k: Mat = z.iter().map(|r| matvec(&wk, r)).collect();
        let v: Mat = z.iter().map(|r| matvec(&wv, r)).collect();
        let head = |m: &Mat, i: usize, hd: usize, g: &[f64]| -> Vec<f64> {
            rmsnorm(&m[i][hd * dh..(hd + 1) * dh], g, cfg.norm_eps)
        };
        let mut attn_out = Vec::with_capacity(t);
        for i in 0..t {
            let mut ctx = vec![0.0; nh * dh];
            for hd in 0..nh {
                let kvh = hd / (nh / nkv);
                let qi = head(&q, i, hd, &qg);
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = head(&k, j, kvh, &kg);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for (j, wj) in w.iter().enumerate() {
                    for c in 0..dh {
                        ctx[hd * dh + c] += wj * v[j][kvh * dh + c];
                    }
                }
            }
            attn_out.push(matvec(&wo, &ctx));
        }
        sublayer_sums.push((
            h.iter().map(|r| rms(r)).sum(),
            attn_out.iter().map(|r| rms(r)).sum(),
        ));
        for (hr, ar) in h.iter_mut().zip(&attn_out) {
            hr.iter_mut().zip(ar).for_each(|(a, b)| *a += b);
        }
        let router = mat(lp("router"));
        let experts: Vec<OracleExpert> = (0..cfg.experts)
            .map(|e| OracleExpert {
                up: mat(p(&names::expert(l, e, "up"))),
                gate: mat(p(&names::expert(l, e, "gate"))),
                down: mat(p(&names::expert(l, e, "down"))),
            })
            .collect();
        let moe_out: Mat = h
            .iter()
            .map(|r| oracle_moe(&rmsnorm(r, lp("mlp_norm").data(), cfg.norm_eps), &router, &experts, cfg.top_k).0)
            .collect();
        sublayer_sums.push((
            h.iter().map(|r| rms(r)).sum(),
            moe_out.iter().map(|r| rms(r)).sum(),
        ));
        for (hr, mr) in h.iter_mut().zip(&moe_out) {
            hr.iter_mut().zip(mr).for_each(|(a, b)| *a += b);
        }
        residual_sums.push(h.iter().map(|r| rms(r)).sum());
    }
    let head_w = mat(p(if cfg.tie_embeddings { names::EMBED } else { names::LM_HEAD }));
    let mut loss_sum = 0.0;
    let logits: Mat = h
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let zf = rmsnorm(r, p(names::FINAL_NORM).data(), cfg.norm_eps);
            let lg: Vec<f64> = matvec(&head_w, &zf).iter().map(|x| x * model.logit_scale()).collect();
            let pr = softmax(&lg);
            loss_sum -= pr[seq[i + 1] as usize].ln();
            lg
        })
        .collect();
    OracleOutput {
        logits,
        loss_sum,
        sublayer_sums,
        residual_sums,
    }
}

pub fn experts_of(model: &Model, l: usize) -> Vec<OracleExpert> {
    (0..model.config().experts)
        .map(|e| OracleExpert {
            up: mat(model.param(&names::expert(l, e, "up")).unwrap()),
            gate: mat(model.param(&names::expert(l, e, "gate")).unwrap()),
            down: mat(model.param(&names::expert(l, e, "down")).unwrap()),
        })
        .collect()
}

pub fn to_mat(a: &NumArray) -> Vec<Vec<f64>> {
    mat(a)
}
