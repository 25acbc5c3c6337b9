//! RMS gain probes, duplicated-block divergence, Gram block checks and the
//! training-compute model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::RegionMap;
use crate::model::{ForwardTrace, Model, ModelConfig, SublayerKind};
use crate::numerics::{kernels, NumArray};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SublayerGain {
    pub layer: usize,
    pub kind: SublayerKind,
    /// `s_out / s_in`.
    pub gain: f64,
    /// Gain divided by the baseline trace's gain for the same sublayer.
    pub baseline_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProbeReport {
    pub step: usize,
    pub sublayers: Vec<SublayerGain>,
    pub residual: Vec<f64>,
}

fn gain(s_in: f64, s_out: f64) -> f64 {
    if s_in > 0.0 {
        s_out / s_in
    } else {
        0.0
    }
}

/// Per-sublayer gains of `trace`, optionally relative to `baseline`.
pub fn rms_probe(trace: &ForwardTrace, baseline: Option<&ForwardTrace>, step: usize) -> Result<RmsProbeReport> {
    if let Some(b) = baseline {
        if b.sublayers.len() != trace.sublayers.len() || b.residual.len() != trace.residual.len() {
            return Err(Error::shape(format!(
                "trace has {} sublayers, baseline {}",
                trace.sublayers.len(),
                b.sublayers.len()
            )));
        }
    }
    let sublayers = trace
        .sublayers
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let g = gain(s.s_in, s.s_out);
            SublayerGain {
                layer: s.layer,
                kind: s.kind,
                gain: g,
                baseline_ratio: baseline.map(|b| {
                    let bs = &b.sublayers[i];
                    g / gain(bs.s_in, bs.s_out)
                }),
            }
        })
        .collect();
    Ok(RmsProbeReport {
        step,
        sublayers,
        residual: trace.residual.clone(),
    })
}

/// Divergence between a copied slice and its donor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub param: String,
    pub axis: usize,
    pub start: usize,
    pub end: usize,
    pub donor_start: usize,
    pub max_abs: f64,
    /// `‖copy − donor‖_F / ‖donor‖_F` (0 when both vanish).
    pub rel_frobenius: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub pairs: Vec<PairDistance>,
}

impl SymmetryReport {
    pub fn max_abs(&self) -> f64 {
        self.pairs.iter().map(|p| p.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel_frobenius(&self) -> f64 {
        self.pairs.iter().map(|p| p.rel_frobenius).fold(0.0, f64::max)
    }
}

/// Distances between every copied slice recorded in `map` and its donor.
pub fn symmetry_distance(model: &Model, map: &RegionMap) -> Result<SymmetryReport> {
    if !map.has_copy_pairs() {
        return Err(Error::config("region map records no copied slices to compare"));
    }
    map.check_covers(model)?;
    let mut pairs = Vec::new();
    for (name, regions) in map.iter() {
        let p = model.param(name)?;
        for pair in regions.copy_pairs() {
            let len = pair.end - pair.start;
            let (copy, donor) = if p.ndim() == 1 {
                let d = p.data();
                (
                    d[pair.start..pair.end].to_vec(),
                    d[pair.donor_start..pair.donor_start + len].to_vec(),
                )
            } else {
                (
                    p.slice2(pair.axis, pair.start, pair.end)?.into_vec(),
                    p.slice2(pair.axis, pair.donor_start, pair.donor_start + len)?.into_vec(),
                )
            };
            let mut max_abs = 0.0f64;
            let (mut diff_sq, mut donor_sq) = (0.0, 0.0);
            for (a, b) in copy.iter().zip(&donor) {
                max_abs = max_abs.max((a - b).abs());
                diff_sq += (a - b) * (a - b);
                donor_sq += b * b;
            }
            let rel_frobenius = if diff_sq == 0.0 {
                0.0
            } else {
                (diff_sq / donor_sq).sqrt()
            };
            pairs.push(PairDistance {
                param: name.clone(),
                axis: pair.axis,
                start: pair.start,
                end: pair.end,
                donor_start: pair.donor_start,
                max_abs,
                rel_frobenius,
            });
        }
    }
    Ok(SymmetryReport { pairs })
}

/// Which axis of a matrix holds the two duplicated halves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DuplicatedAxis {
    /// `X = [A; A]`: check the blocks of `XXᵀ`.
    Rows,
    /// `X = [A, A]`: check the blocks of `XᵀX`.
    Columns,
}

/// Largest absolute difference between the off-diagonal / lower blocks of
/// the Gram matrix over the duplicated axis and its top-left block.
pub fn gram_block_check(x: &NumArray, axis: DuplicatedAxis) -> Result<f64> {
    let (m, n) = x.dims2()?;
    let (data, outer, inner) = match axis {
        DuplicatedAxis::Rows => (x.data().to_vec(), m, n),
        DuplicatedAxis::Columns => (kernels::transpose(x.data(), m, n), n, m),
    };
    if outer % 2 != 0 {
        return Err(Error::shape(format!("duplicated axis has odd extent {outer}")));
    }
    let t = kernels::transpose(&data, outer, inner);
    let mut g = vec![0.0; outer * outer];
    kernels::gemm(&data, &t, &mut g, outer, inner, outer);
    let h = outer / 2;
    let mut worst = 0.0f64;
    for i in 0..h {
        for j in 0..h {
            let p11 = g[i * outer + j];
            for (di, dj) in [(0, h), (h, 0), (h, h)] {
                worst = worst.max((g[(i + di) * outer + j + dj] - p11).abs());
            }
        }
    }
    Ok(worst)
}

/// Training compute with and without a small-model phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_small: f64,
    pub n_large: f64,
    pub tokens: f64,
    pub expansion_tokens: f64,
    /// `6·N_large·D`.
    pub c_scratch: f64,
    /// `6(N_small·D_e + N_large(D − D_e))`.
    pub c_star: f64,
    /// `1 − C*/C_scratch`.
    pub flops_saved: f64,
}

/// `C ≈ 6ND` accounting for growing from `n_small` to `n_large` active
/// parameters after `expansion_tokens` of `tokens`.
pub fn compute_cost(n_small: f64, n_large: f64, tokens: f64, expansion_tokens: f64) -> Result<CostReport> {
    let finite = [n_small, n_large, tokens, expansion_tokens]
        .iter()
        .all(|v| v.is_finite());
    if !finite || n_small <= 0.0 || n_large <= 0.0 || tokens <= 0.0 || expansion_tokens < 0.0 {
        return Err(Error::Domain(
            "parameter and token counts must be positive".into(),
        ));
    }
    if expansion_tokens > tokens {
        return Err(Error::Domain(format!(
            "expansion tokens {expansion_tokens} exceed total tokens {tokens}"
        )));
    }
    let c_scratch = 6.0 * n_large * tokens;
    let c_star = 6.0 * (n_small * expansion_tokens + n_large * (tokens - expansion_tokens));
    Ok(CostReport {
        n_small,
        n_large,
        tokens,
        expansion_tokens,
        c_scratch,
        c_star,
        flops_saved: 1.0 - c_star / c_scratch,
    })
}

/// Parameters touched per token: everything except experts, plus the
/// `top_k / experts` fraction of expert weights. The tied output head is
/// counted once (as the embedding).
pub fn active_parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let hq = cfg.n_heads * cfg.d_head;
    let hkv = cfg.n_kv * cfg.d_head;
    let head = if cfg.tie_embeddings { 0 } else { cfg.vocab * d };
    let per_layer = 2 * d // attention and MoE norms
        + hq * d + 2 * hkv * d + d * hq
        + 2 * cfg.d_head
        + cfg.experts * d
        + cfg.top_k * 3 * d * cfg.d_ffn;
    cfg.vocab * d + head + d + cfg.layers * per_layer
}
