//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys use dotted prefixes (`model.d_model`, `expansion.expert.fan_in`).
//! Optional values accept `none`, derived defaults accept `auto`.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::expansion::{Baseline, ExpansionPlan, InitRegime, PairSpec};
use crate::model::ModelConfig;
use crate::optim::{Hyperparams, OptimizerKind, StatePolicy};
use crate::schedule::{CosineWarmup, RewarmPlan, RewarmScope};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    /// Order-2 Markov chain with a seeded transition table.
    Markov,
    /// Random span, delimiter, the same span again.
    Copy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    /// Seeds the Markov transition table.
    pub seed: u64,
    /// Seeds the held-out evaluation sequences.
    pub eval_seed: u64,
    /// Logit scale of the transition table; larger is more predictable.
    pub sharpness: f64,
    /// Span length of the copy task.
    pub span: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Markov,
            seed: 1,
            eval_seed: 2,
            sharpness: 2.5,
            span: 8,
        }
    }
}

/// Base schedule; `None` fields are derived from the step budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_steps: Option<usize>,
    pub initial_lr: f64,
    pub peak_lr: f64,
    pub final_lr: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_steps: None,
            initial_lr: 0.0,
            peak_lr: 3e-3,
            final_lr: None,
        }
    }
}

/// A growth event inside a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionEvent {
    /// Applied before the update of this step.
    pub step: usize,
    pub plan: ExpansionPlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_sequences: usize,
    pub batch_length: usize,
    pub probe_interval: usize,
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub hyper: Hyperparams,
    pub schedule: ScheduleConfig,
    pub corpus: CorpusSpec,
    pub eval_sequences: usize,
    pub expansion: Option<ExpansionEvent>,
    pub output_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_sequences: 8,
            batch_length: 128,
            probe_interval: 50,
            model: ModelConfig::default(),
            optimizer: OptimizerKind::AdamW,
            hyper: Hyperparams::default(),
            schedule: ScheduleConfig::default(),
            corpus: CorpusSpec::default(),
            eval_sequences: 16,
            expansion: None,
            output_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
        }
    }
}

/// One parsed `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits config text into assignments, rejecting malformed lines.
pub fn parse_assignments(text: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::ConfigField {
                line,
                field: content.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::ConfigField {
                line,
                field: key.to_string(),
                message: "malformed key".into(),
            });
        }
        out.push(Assignment {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn optional<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Option<T>, String> {
    if v == "none" || v == "auto" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn parsed<T: std::str::FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|e| match e {
        Error::Config(m) => m,
        other => other.to_string(),
    })
}

fn show_opt<T: std::fmt::Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

/// Expansion plan fields shared by run configs and standalone plan files.
#[derive(Clone, Debug, PartialEq)]
struct PlanBuilder {
    plan: ExpansionPlan,
    rewarm: bool,
    rewarm_plan: RewarmPlan,
    baseline: Option<String>,
    perturb_std: f64,
}

impl Default for PlanBuilder {
    fn default() -> Self {
        Self {
            plan: ExpansionPlan::default(),
            rewarm: true,
            rewarm_plan: RewarmPlan::default(),
            baseline: None,
            perturb_std: 0.01,
        }
    }
}

impl PlanBuilder {
    fn from_plan(plan: &ExpansionPlan) -> Self {
        let (baseline, perturb_std) = match plan.baseline {
            Some(b @ Baseline::Perturb { std }) => (Some(b.name().to_string()), std),
            Some(b) => (Some(b.name().to_string()), 0.01),
            None => (None, 0.01),
        };
        Self {
            plan: plan.clone(),
            rewarm: plan.rewarm.is_some(),
            rewarm_plan: plan.rewarm.unwrap_or_default(),
            baseline,
            perturb_std,
        }
    }

    /// `key` without the `expansion.` prefix.
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, String> {
        let p = &mut self.plan;
        match key {
            "inner_ratio" => p.inner_ratio = optional(v, float)?,
            "hidden_ratio" => p.hidden_ratio = optional(v, float)?,
            "state_policy" => p.state_policy = parsed::<StatePolicy>(v)?,
            "seed" => p.seed = num(v)?,
            "rewarm" => self.rewarm = boolean(v)?,
            "rewarm.steps" => self.rewarm_plan.steps = num(v)?,
            "rewarm.ratio" => self.rewarm_plan.ratio = float(v)?,
            "rewarm.scope" => self.rewarm_plan.scope = parsed::<RewarmScope>(v)?,
            "baseline" => self.baseline = optional(v, |s| Ok(s.to_string()))?,
            "perturb_std" => self.perturb_std = float(v)?,
            _ => {
                let Some((pair, field)) = key.split_once('.') else {
                    return Ok(false);
                };
                let spec: &mut PairSpec = match pair {
                    "expert" => &mut p.expert,
                    "attention" => &mut p.attention,
                    "hidden" => &mut p.hidden,
                    _ => return Ok(false),
                };
                match field {
                    "fan_out" => spec.fan_out = parsed::<InitRegime>(v)?,
                    "fan_in" => spec.fan_in = parsed::<InitRegime>(v)?,
                    "scale" => spec.scale = boolean(v)?,
                    _ => return Ok(false),
                }
            }
        }
        Ok(true)
    }

    fn build(&self) -> Result<ExpansionPlan> {
        let mut plan = self.plan.clone();
        plan.rewarm = self.rewarm.then_some(self.rewarm_plan);
        plan.baseline = match &self.baseline {
            Some(name) => Some(Baseline::from_name(name, self.perturb_std)?),
            None => None,
        };
        plan.validate()?;
        Ok(plan)
    }

    fn write(&self, out: &mut String) {
        let p = &self.plan;
        let _ = writeln!(out, "expansion.inner_ratio = {}", show_opt(&p.inner_ratio, "none"));
        let _ = writeln!(out, "expansion.hidden_ratio = {}", show_opt(&p.hidden_ratio, "none"));
        for (name, spec) in [("expert", p.expert), ("attention", p.attention), ("hidden", p.hidden)] {
            let _ = writeln!(out, "expansion.{name}.fan_out = {}", spec.fan_out);
            let _ = writeln!(out, "expansion.{name}.fan_in = {}", spec.fan_in);
            let _ = writeln!(out, "expansion.{name}.scale = {}", spec.scale);
        }
        let _ = writeln!(out, "expansion.state_policy = {}", p.state_policy);
        let _ = writeln!(out, "expansion.rewarm = {}", self.rewarm);
        let _ = writeln!(out, "expansion.rewarm.steps = {}", self.rewarm_plan.steps);
        let _ = writeln!(out, "expansion.rewarm.ratio = {}", self.rewarm_plan.ratio);
        let _ = writeln!(out, "expansion.rewarm.scope = {}", self.rewarm_plan.scope);
        let _ = writeln!(out, "expansion.baseline = {}", show_opt(&self.baseline, "none"));
        let _ = writeln!(out, "expansion.perturb_std = {}", self.perturb_std);
        let _ = writeln!(out, "expansion.seed = {}", p.seed);
    }
}

/// Mutable view used while applying assignments.
struct Builder {
    cfg: RunConfig,
    expansion_step: Option<usize>,
    plan: PlanBuilder,
}

impl Builder {
    fn new(cfg: RunConfig) -> Self {
        let (expansion_step, plan) = match &cfg.expansion {
            Some(ev) => (Some(ev.step), PlanBuilder::from_plan(&ev.plan)),
            None => (None, PlanBuilder::default()),
        };
        Self {
            cfg,
            expansion_step,
            plan,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let c = &mut self.cfg;
        match key {
            "format_version" => {
                let ver: u32 = num(v)?;
                if ver != FORMAT_VERSION {
                    return Err(format!("unsupported format version {ver}"));
                }
            }
            "seed" => c.seed = num(v)?,
            "steps" => c.steps = num(v)?,
            "batch.sequences" => c.batch_sequences = num(v)?,
            "batch.length" => c.batch_length = num(v)?,
            "probe_interval" => c.probe_interval = num(v)?,
            "model.layers" => c.model.layers = num(v)?,
            "model.d_model" => c.model.d_model = num(v)?,
            "model.d_ffn" => c.model.d_ffn = num(v)?,
            "model.n_heads" => c.model.n_heads = num(v)?,
            "model.n_kv" => c.model.n_kv = num(v)?,
            "model.d_head" => c.model.d_head = num(v)?,
            "model.experts" => c.model.experts = num(v)?,
            "model.top_k" => c.model.top_k = num(v)?,
            "model.vocab" => c.model.vocab = num(v)?,
            "model.tie_embeddings" => c.model.tie_embeddings = boolean(v)?,
            "model.norm_eps" => c.model.norm_eps = float(v)?,
            "model.pos_base" => c.model.pos_base = num(v)?,
            "model.pos_scale" => c.model.pos_scale = float(v)?,
            "optimizer.kind" => c.optimizer = parsed::<OptimizerKind>(v)?,
            "optimizer.beta1" => c.hyper.beta1 = float(v)?,
            "optimizer.beta2" => c.hyper.beta2 = float(v)?,
            "optimizer.eps" => c.hyper.eps = float(v)?,
            "optimizer.weight_decay" => c.hyper.weight_decay = float(v)?,
            "optimizer.momentum" => c.hyper.momentum = float(v)?,
            "optimizer.ns_iterations" => {
                let n: i64 = num(v)?;
                c.hyper.ns_iterations = usize::try_from(n).map_err(|_| "iterations must be >= 0".to_string())?;
            }
            "optimizer.ns_coefficients" => {
                let parts = v.split(',').map(|s| float(s.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
                c.hyper.ns_coefficients = parts
                    .try_into()
                    .map_err(|_| "expected three comma-separated coefficients".to_string())?;
            }
            "schedule.warmup_steps" => c.schedule.warmup_steps = optional(v, num)?,
            "schedule.initial_lr" => c.schedule.initial_lr = float(v)?,
            "schedule.peak_lr" => c.schedule.peak_lr = float(v)?,
            "schedule.final_lr" => c.schedule.final_lr = optional(v, float)?,
            "corpus.kind" => {
                c.corpus.kind = match v {
                    "markov" => CorpusKind::Markov,
                    "copy" => CorpusKind::Copy,
                    _ => return Err(format!("unknown corpus kind `{v}` (expected markov or copy)")),
                }
            }
            "corpus.seed" => c.corpus.seed = num(v)?,
            "corpus.eval_seed" => c.corpus.eval_seed = num(v)?,
            "corpus.sharpness" => c.corpus.sharpness = float(v)?,
            "corpus.span" => c.corpus.span = num(v)?,
            "eval.sequences" => c.eval_sequences = num(v)?,
            "expansion.step" => self.expansion_step = optional(v, num)?,
            "output.dir" => c.output_dir = PathBuf::from(v),
            "init.checkpoint" => c.init_checkpoint = optional(v, |s| Ok(PathBuf::from(s)))?,
            _ => {
                let handled = match key.strip_prefix("expansion.") {
                    Some(rest) => self.plan.set(rest, v)?,
                    None => false,
                };
                if !handled {
                    return Err("unknown key".into());
                }
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunConfig> {
        self.cfg.expansion = match self.expansion_step {
            Some(step) => Some(ExpansionEvent {
                step,
                plan: self.plan.build()?,
            }),
            None => None,
        };
        self.cfg.validate()?;
        Ok(self.cfg)
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().with_overrides(&parse_assignments(text)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies assignments on top of `self`.
    pub fn with_overrides(&self, assignments: &[Assignment]) -> Result<Self> {
        let mut b = Builder::new(self.clone());
        for a in assignments {
            b.set(&a.key, &a.value).map_err(|message| Error::ConfigField {
                line: a.line,
                field: a.key.clone(),
                message,
            })?;
        }
        b.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        self.base_schedule()?;
        if self.batch_sequences == 0 || self.batch_length == 0 {
            return Err(Error::config("batch.sequences and batch.length must be >= 1"));
        }
        if self.probe_interval == 0 || self.eval_sequences == 0 {
            return Err(Error::config("probe_interval and eval.sequences must be >= 1"));
        }
        if self.model.vocab < 2 {
            return Err(Error::config("model.vocab must be >= 2"));
        }
        if self.corpus.kind == CorpusKind::Copy && self.corpus.span == 0 {
            return Err(Error::config("corpus.span must be >= 1"));
        }
        if let Some(ev) = &self.expansion {
            if ev.step >= self.steps {
                return Err(Error::config(format!(
                    "expansion.step ({}) must be below steps ({})",
                    ev.step, self.steps
                )));
            }
            ev.plan.validate()?;
        }
        Ok(())
    }

    /// The baseline schedule with derived defaults filled in: warmup over
    /// 3% of the steps and a final rate of 1% of the peak.
    pub fn base_schedule(&self) -> Result<CosineWarmup> {
        let s = &self.schedule;
        let warmup = s
            .warmup_steps
            .unwrap_or_else(|| (0.03 * self.steps as f64).round() as usize);
        let final_lr = s.final_lr.unwrap_or(0.01 * s.peak_lr);
        CosineWarmup::new(warmup, self.steps, s.initial_lr, s.peak_lr, final_lr)
    }

    /// Tokens predicted per optimizer step.
    pub fn batch_tokens(&self) -> usize {
        self.batch_sequences * self.batch_length
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        let h = &self.hyper;
        let s = &self.schedule;
        let c = &self.corpus;
        let _ = writeln!(out, "format_version = {FORMAT_VERSION}");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "batch.sequences = {}", self.batch_sequences);
        let _ = writeln!(out, "batch.length = {}", self.batch_length);
        let _ = writeln!(out, "probe_interval = {}", self.probe_interval);
        let _ = writeln!(out, "model.layers = {}", m.layers);
        let _ = writeln!(out, "model.d_model = {}", m.d_model);
        let _ = writeln!(out, "model.d_ffn = {}", m.d_ffn);
        let _ = writeln!(out, "model.n_heads = {}", m.n_heads);
        let _ = writeln!(out, "model.n_kv = {}", m.n_kv);
        let _ = writeln!(out, "model.d_head = {}", m.d_head);
        let _ = writeln!(out, "model.experts = {}", m.experts);
        let _ = writeln!(out, "model.top_k = {}", m.top_k);
        let _ = writeln!(out, "model.vocab = {}", m.vocab);
        let _ = writeln!(out, "model.tie_embeddings = {}", m.tie_embeddings);
        let _ = writeln!(out, "model.norm_eps = {:e}", m.norm_eps);
        let _ = writeln!(out, "model.pos_base = {}", m.pos_base);
        let _ = writeln!(out, "model.pos_scale = {}", m.pos_scale);
        let _ = writeln!(out, "optimizer.kind = {}", self.optimizer);
        let _ = writeln!(out, "optimizer.beta1 = {}", h.beta1);
        let _ = writeln!(out, "optimizer.beta2 = {}", h.beta2);
        let _ = writeln!(out, "optimizer.eps = {:e}", h.eps);
        let _ = writeln!(out, "optimizer.weight_decay = {}", h.weight_decay);
        let _ = writeln!(out, "optimizer.momentum = {}", h.momentum);
        let _ = writeln!(out, "optimizer.ns_iterations = {}", h.ns_iterations);
        let [a, b, cc] = h.ns_coefficients;
        let _ = writeln!(out, "optimizer.ns_coefficients = {a}, {b}, {cc}");
        let _ = writeln!(out, "schedule.warmup_steps = {}", show_opt(&s.warmup_steps, "auto"));
        let _ = writeln!(out, "schedule.initial_lr = {:e}", s.initial_lr);
        let _ = writeln!(out, "schedule.peak_lr = {:e}", s.peak_lr);
        let _ = writeln!(
            out,
            "schedule.final_lr = {}",
            s.final_lr.map_or_else(|| "auto".to_string(), |v| format!("{v:e}"))
        );
        let kind = match c.kind {
            CorpusKind::Markov => "markov",
            CorpusKind::Copy => "copy",
        };
        let _ = writeln!(out, "corpus.kind = {kind}");
        let _ = writeln!(out, "corpus.seed = {}", c.seed);
        let _ = writeln!(out, "corpus.eval_seed = {}", c.eval_seed);
        let _ = writeln!(out, "corpus.sharpness = {}", c.sharpness);
        let _ = writeln!(out, "corpus.span = {}", c.span);
        let _ = writeln!(out, "eval.sequences = {}", self.eval_sequences);
        let _ = writeln!(
            out,
            "expansion.step = {}",
            show_opt(&self.expansion.as_ref().map(|e| e.step), "none")
        );
        let plan = match &self.expansion {
            Some(ev) => PlanBuilder::from_plan(&ev.plan),
            None => PlanBuilder::default(),
        };
        plan.write(&mut out);
        let _ = writeln!(out, "output.dir = {}", self.output_dir.display());
        let _ = writeln!(
            out,
            "init.checkpoint = {}",
            self.init_checkpoint
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        );
        out
    }
}

/// Parses a standalone plan file containing only `expansion.*` keys.
pub fn parse_plan(text: &str) -> Result<ExpansionPlan> {
    let mut b = PlanBuilder::default();
    for a in parse_assignments(text)? {
        let handled = match a.key.strip_prefix("expansion.") {
            Some(rest) => b.set(rest, &a.value),
            None => Ok(false),
        };
        match handled {
            Ok(true) => {}
            Ok(false) => {
                return Err(Error::ConfigField {
                    line: a.line,
                    field: a.key,
                    message: "unknown key".into(),
                })
            }
            Err(message) => {
                return Err(Error::ConfigField {
                    line: a.line,
                    field: a.key,
                    message,
                })
            }
        }
    }
    b.build()
}

/// Text form of a plan, readable by [`parse_plan`].
pub fn plan_to_text(plan: &ExpansionPlan) -> String {
    let mut out = String::new();
    PlanBuilder::from_plan(plan).write(&mut out);
    out
}
