//! The training loop: optional mid-run expansion, per-region learning
//! rates, periodic probes and run outputs.
//!
//! Output directory layout: `config.txt`, `metrics.csv`, `summary.json`,
//! `checkpoint/` (final state) and, after a non-finite step,
//! `last_good/` holding the state before that step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, Checkpoint};
use super::config::RunConfig;
use super::corpus::Corpus;
use super::metrics::{metrics_csv, MetricsRecord};
use crate::diagnostics::symmetry_distance;
use crate::error::{Error, Result};
use crate::expansion::{expand_model, ExpansionPlan, RegionMap, RegionTag};
use crate::model::{forward, forward_backward, Batch, ForwardTrace, Model};
use crate::numerics::derive_seed;
use crate::optim::{expand_states, LrByRegion, OptimizerState};
use crate::schedule::{region_lr, rewarm_lr_at, CosineWarmup, RewarmScope, RewarmSpec};

/// Losses and sizes around the expansion event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub step: usize,
    /// Eval loss immediately before and after growth, same eval batch.
    pub eval_before: f64,
    pub eval_after: f64,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `ok` or `failed: <message>`.
    pub status: String,
    pub steps_completed: usize,
    pub final_train_loss: Option<f64>,
    pub final_eval_loss: Option<f64>,
    pub final_max_symmetry_distance: Option<f64>,
    pub parameters: usize,
    pub expansion: Option<ExpansionRecord>,
}

/// In-memory result of a run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    pub model: Model,
    pub regions: RegionMap,
    pub optimizer: OptimizerState,
}

/// Training state for one run.
pub struct Trainer {
    cfg: RunConfig,
    corpus: Corpus,
    eval_batch: Batch,
    base: CosineWarmup,
    model: Model,
    optimizer: OptimizerState,
    regions: RegionMap,
    rewarm: Option<RewarmSpec>,
    rewarm_scope: RewarmScope,
    step: usize,
    expanded: bool,
    records: Vec<MetricsRecord>,
    expansion: Option<ExpansionRecord>,
    last_train_loss: Option<f64>,
}

impl Trainer {
    /// Fresh model, or the state in `init.checkpoint` when set.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_schedule()?;
        let (model, optimizer, regions, step) = match &cfg.init_checkpoint {
            Some(dir) => {
                let ck = Checkpoint::load(dir)?;
                if ck.model.config().vocab != cfg.model.vocab {
                    return Err(Error::config("checkpoint vocabulary differs from model.vocab"));
                }
                let opt = match ck.optimizer {
                    Some(st) if st.kind() == cfg.optimizer => st,
                    Some(_) => return Err(Error::config("checkpoint optimizer differs from optimizer.kind")),
                    None => OptimizerState::new(cfg.optimizer, ck.model.params()),
                };
                if ck.step > cfg.steps {
                    return Err(Error::config(format!(
                        "checkpoint is at step {}, beyond steps = {}",
                        ck.step, cfg.steps
                    )));
                }
                (ck.model, opt, ck.regions, ck.step)
            }
            None => {
                let model = Model::init(cfg.model.clone(), derive_seed(cfg.seed, "init"))?;
                let opt = OptimizerState::new(cfg.optimizer, model.params());
                let regions = RegionMap::fresh(&model);
                (model, opt, regions, 0)
            }
        };
        let corpus = Corpus::new(&cfg.corpus, model.config().vocab)?;
        let eval_batch = corpus.batch(cfg.corpus.eval_seed, cfg.eval_sequences, cfg.batch_length)?;
        let mut t = Self {
            cfg: cfg.clone(),
            corpus,
            eval_batch,
            base,
            model,
            optimizer,
            regions,
            rewarm: None,
            rewarm_scope: RewarmScope::New,
            step,
            expanded: false,
            records: Vec::new(),
            expansion: None,
            last_train_loss: None,
        };
        if let Some(ev) = &cfg.expansion {
            let resumed_after = step > ev.step || (step == ev.step && !t.regions.is_all_original());
            if resumed_after {
                t.expanded = true;
                t.set_rewarm(&ev.plan, ev.step);
            }
        }
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn regions(&self) -> &RegionMap {
        &self.regions
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn eval_batch(&self) -> &Batch {
        &self.eval_batch
    }

    /// Training batch for step `s`.
    pub fn train_batch(&self, s: usize) -> Result<Batch> {
        self.corpus.batch(
            derive_seed(self.cfg.seed, &format!("batch/{s}")),
            self.cfg.batch_sequences,
            self.cfg.batch_length,
        )
    }

    pub fn evaluate(&self) -> Result<(f64, ForwardTrace)> {
        let out = forward(&self.model, &self.eval_batch)?;
        Ok((out.loss, out.trace))
    }

    /// Learning rates used by the update of step `s`.
    pub fn lr_at(&self, s: usize) -> Result<LrByRegion> {
        let t = s as f64;
        let new = region_lr(&self.base, self.rewarm.as_ref(), RegionTag::New, t)?;
        let original = match (&self.rewarm, self.rewarm_scope) {
            (Some(rw), RewarmScope::All) if s > rw.expansion_step => rewarm_lr_at(&self.base, rw, t)?,
            _ => self.base.lr_at(t)?,
        };
        Ok(LrByRegion {
            original,
            new: Some(new),
        })
    }

    fn set_rewarm(&mut self, plan: &ExpansionPlan, step: usize) {
        if let Some(rw) = plan.rewarm {
            self.rewarm = Some(rw.at(step));
            self.rewarm_scope = rw.scope;
        }
    }

    /// Grows model and optimizer state together; nothing changes on error.
    pub fn expand(&mut self, plan: &ExpansionPlan) -> Result<ExpansionRecord> {
        let (eval_before, _) = self.evaluate()?;
        let (model, regions) = expand_model(&self.model, plan)?;
        let optimizer = expand_states(&self.optimizer, &regions, plan.state_policy)?;
        let params_before = self.model.parameter_count();
        self.model = model;
        self.regions = regions;
        self.optimizer = optimizer;
        self.expanded = true;
        self.set_rewarm(plan, self.step);
        let (eval_after, _) = self.evaluate()?;
        let record = ExpansionRecord {
            step: self.step,
            eval_before,
            eval_after,
            params_before,
            params_after: self.model.parameter_count(),
        };
        self.expansion = Some(record.clone());
        Ok(record)
    }

    fn symmetry(&self) -> Result<f64> {
        if self.regions.has_copy_pairs() {
            Ok(symmetry_distance(&self.model, &self.regions)?.max_rel_frobenius())
        } else {
            Ok(f64::NAN)
        }
    }

    fn record(&mut self, train_loss: f64) -> Result<()> {
        let (eval_loss, trace) = self.evaluate()?;
        let lr = self.lr_at(self.step)?;
        let rec = MetricsRecord {
            step: self.step,
            tokens: self.step * self.cfg.batch_tokens(),
            train_loss,
            eval_loss,
            lr_original: lr.original,
            lr_new: lr.new.unwrap_or(lr.original),
            gains: trace
                .sublayers
                .iter()
                .map(|s| if s.s_in > 0.0 { s.s_out / s.s_in } else { 0.0 })
                .collect(),
            max_symmetry_distance: self.symmetry()?,
        };
        self.records.push(rec);
        Ok(())
    }

    /// Runs from the current step to `steps`.
    pub fn run(&mut self) -> Result<()> {
        let total = self.cfg.steps;
        if total == 0 {
            return Ok(());
        }
        let probe = self.cfg.probe_interval;
        loop {
            let s = self.step;
            if let Some(ev) = self.cfg.expansion.clone() {
                if s == ev.step && !self.expanded {
                    self.expand(&ev.plan)?;
                }
            }
            let is_probe = s % probe == 0 || s == total;
            if s == total {
                let loss = forward(&self.model, &self.train_batch(s)?)?.loss;
                self.last_train_loss = Some(loss);
                if is_probe {
                    self.record(loss)?;
                }
                return Ok(());
            }
            let batch = self.train_batch(s)?;
            let (loss, grads, _) = forward_backward(&self.model, &batch)?;
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at step {s}")));
            }
            if is_probe {
                self.record(loss)?;
            }
            let lr = self.lr_at(s)?;
            let mut params = self.model.params().clone();
            self.optimizer.step(&mut params, &grads, lr, &self.cfg.hyper)?;
            if !params.is_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after step {s}")));
            }
            *self.model.params_mut() = params;
            self.last_train_loss = Some(loss);
            self.step += 1;
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config_text: self.cfg.to_text(),
            model: self.model.clone(),
            regions: self.regions.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn summary(&self, status: String) -> Result<RunSummary> {
        let symmetry = self.symmetry()?;
        Ok(RunSummary {
            status,
            steps_completed: self.step,
            final_train_loss: self.last_train_loss,
            final_eval_loss: self.records.last().map(|r| r.eval_loss),
            final_max_symmetry_distance: (!symmetry.is_nan()).then_some(symmetry),
            parameters: self.model.parameter_count(),
            expansion: self.expansion.clone(),
        })
    }

    pub fn into_outcome(self) -> Result<RunOutcome> {
        let summary = self.summary("ok".into())?;
        Ok(RunOutcome {
            summary,
            records: self.records,
            model: self.model,
            regions: self.regions,
            optimizer: self.optimizer,
        })
    }
}

/// Runs `cfg` in memory without writing outputs.
pub fn train_in_memory(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut t = Trainer::new(cfg)?;
    t.run()?;
    t.into_outcome()
}

/// Runs `cfg` and writes its outputs under `cfg.output_dir`. On failure the
/// partial metrics and a failed summary are still written.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let mut t = Trainer::new(cfg)?;
    match t.run() {
        Ok(()) => {
            write_outputs(&t, &dir, "ok".into())?;
            t.checkpoint().save(&dir.join("checkpoint"))?;
            t.into_outcome()
        }
        Err(e) => {
            if matches!(e, Error::Numeric(_)) {
                t.checkpoint().save(&dir.join("last_good"))?;
            }
            write_outputs(&t, &dir, format!("failed: {e}"))?;
            Err(e)
        }
    }
}

fn write_outputs(t: &Trainer, dir: &Path, status: String) -> Result<()> {
    let layers = t.model.config().layers;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(layers, &t.records).as_bytes())?;
    let mut summary = serde_json::to_string_pretty(&t.summary(status)?)?;
    summary.push('\n');
    write_atomic(&dir.join("summary.json"), summary.as_bytes())
}

