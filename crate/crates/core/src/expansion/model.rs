//! Model-level growth orchestration.

use std::collections::BTreeMap;

use super::ops::{expanded_len, fan_in_scale_factor, grow, scale_in_place};
use super::{baseline, ExpansionPlan, InitRegime, ParamRegions, RegionMap};
use crate::error::Result;
use crate::model::{names, Model, ModelConfig, TensorMap};
use crate::numerics::Rng;

/// Applies `plan` to `model`, returning the grown model and a region map
/// tagging every added slice. Inner growth runs before hidden growth.
///
/// With tied embeddings the shared matrix grows once as a producer and the
/// output head's fan-in factor is folded into the model's logit scale.
pub fn expand_model(model: &Model, plan: &ExpansionPlan) -> Result<(Model, RegionMap)> {
    plan.validate()?;
    let (mut cfg, params, mut logit_scale) = model.clone().into_parts();
    let regions = params
        .iter()
        .map(|(k, v)| (k.clone(), ParamRegions::original(v.shape())))
        .collect();
    let mut g = Grower {
        params,
        regions,
        seed: plan.seed,
    };
    if let Some(ratio) = plan.inner_ratio {
        grow_inner(&mut g, &mut cfg, plan, ratio)?;
    }
    if let Some(ratio) = plan.hidden_ratio {
        logit_scale *= grow_hidden(&mut g, &mut cfg, plan, ratio)?;
    }
    if let Some(b) = plan.baseline {
        baseline::apply(b, &mut g.params, &cfg, plan.seed)?;
    }
    let model = Model::from_parts(cfg, g.params, logit_scale)?;
    let map = RegionMap::from_params(g.regions);
    map.check_covers(&model)?;
    Ok((model, map))
}

struct Grower {
    params: TensorMap,
    regions: BTreeMap<String, ParamRegions>,
    seed: u64,
}

impl Grower {
    fn grow(&mut self, name: &str, axis: usize, new_len: usize, regime: InitRegime, keep_mean: bool) -> Result<()> {
        let mut rng = Rng::derived(self.seed, &format!("{name}/{axis}"));
        let (value, segments) = grow(self.params.get(name)?, axis, new_len, regime, &mut rng, keep_mean)?;
        let reg = self.regions.get_mut(name).expect("regions mirror params");
        reg.shape = value.shape().to_vec();
        reg.axes[axis] = segments;
        self.params.insert(name, value);
        Ok(())
    }

    fn fan_in(&mut self, name: &str, new_len: usize, regime: InitRegime, upstream_copy: bool, scale: bool) -> Result<()> {
        let d = self.params.get(name)?.shape()[1];
        self.grow(name, 1, new_len, regime, false)?;
        if scale {
            let f = fan_in_scale_factor(regime == InitRegime::Copy && upstream_copy, d, new_len)?;
            let w = self.params.get(name)?.clone();
            self.params.insert(name, scale_in_place(w, f));
            self.regions.get_mut(name).expect("regions mirror params").scale *= f;
        }
        Ok(())
    }
}

fn grow_inner(g: &mut Grower, cfg: &mut ModelConfig, plan: &ExpansionPlan, ratio: f64) -> Result<()> {
    let n = expanded_len(cfg.d_ffn, ratio)?;
    let spec = plan.expert;
    for l in 0..cfg.layers {
        for e in 0..cfg.experts {
            g.grow(&names::expert(l, e, "up"), 0, n, spec.fan_out, false)?;
            g.grow(&names::expert(l, e, "gate"), 0, n, spec.fan_out, false)?;
            g.fan_in(
                &names::expert(l, e, "down"),
                n,
                spec.fan_in,
                spec.fan_out == InitRegime::Copy,
                spec.scale,
            )?;
        }
    }
    cfg.d_ffn = n;
    Ok(())
}

/// Returns the factor to fold into the logit scale (1 when untied).
fn grow_hidden(g: &mut Grower, cfg: &mut ModelConfig, plan: &ExpansionPlan, ratio: f64) -> Result<f64> {
    let d = cfg.d_model;
    let n = expanded_len(d, ratio)?;
    let (attn, hid) = (plan.attention, plan.hidden);
    // New hidden channels are exact duplicates only if every writer of the
    // residual stream duplicated its rows.
    let upstream_copy = hid.fan_out == InitRegime::Copy && attn.fan_out == InitRegime::Copy;
    let norm_regime = if hid.fan_out == InitRegime::Copy {
        InitRegime::Copy
    } else {
        InitRegime::Random
    };
    g.grow(names::EMBED, 1, n, hid.fan_out, false)?;
    let mut head_factor = 1.0;
    if cfg.tie_embeddings {
        if hid.scale {
            head_factor = fan_in_scale_factor(hid.fan_out == InitRegime::Copy && upstream_copy, d, n)?;
        }
    } else {
        g.fan_in(names::LM_HEAD, n, hid.fan_in, upstream_copy, hid.scale)?;
    }
    g.grow(names::FINAL_NORM, 0, n, norm_regime, true)?;
    for l in 0..cfg.layers {
        g.grow(&names::layer(l, "attn_norm"), 0, n, norm_regime, true)?;
        g.grow(&names::layer(l, "mlp_norm"), 0, n, norm_regime, true)?;
        for w in ["wq", "wk", "wv"] {
            g.fan_in(&names::layer(l, w), n, attn.fan_in, upstream_copy, attn.scale)?;
        }
        g.grow(&names::layer(l, "wo"), 0, n, attn.fan_out, false)?;
        g.fan_in(&names::layer(l, "router"), n, hid.fan_in, upstream_copy, hid.scale)?;
        for e in 0..cfg.experts {
            g.fan_in(&names::expert(l, e, "up"), n, hid.fan_in, upstream_copy, hid.scale)?;
            g.fan_in(&names::expert(l, e, "gate"), n, hid.fan_in, upstream_copy, hid.scale)?;
            g.grow(&names::expert(l, e, "down"), 0, n, hid.fan_out, false)?;
        }
    }
    cfg.d_model = n;
    Ok(head_factor)
}
