//! Acceptance suite: one PASS/FAIL line per check, with its measured
//! values and runtime. Set `WIDEGROW_ACCEPTANCE_STRICT=1` to exit non-zero
//! when any check fails. Set `WIDEGROW_UPDATE_FIXTURES=1` to rewrite the
//! trend fixtures instead of comparing against them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use widegrow::diagnostics::{compute_cost, gram_block_check, symmetry_distance, DuplicatedAxis};
use widegrow::expansion::{
    expand_model, fan_in_expand, fan_in_scale_factor, fan_out_expand, ExpansionPlan, InitRegime, RegionTag,
};
use widegrow::harness::{run_training, Checkpoint, CorpusSpec, RunConfig, Trainer};
use widegrow::model::{forward, forward_backward, gradcheck, Batch, Model, ModelConfig};
use widegrow::numerics::{sample_gaussian, NumArray, Rng};
use widegrow::optim::{newton_schulz, OptimizerKind, StatePolicy};
use widegrow::schedule::{region_lr, rewarm_lr_at, CosineWarmup, RewarmPlan};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

fn main() {
    let checks: [(&str, Duration, Check); 11] = [
        ("scale-factor exactness", Duration::from_secs(1), scale_factors),
        ("rms preservation (monte carlo)", Duration::from_secs(30), rms_monte_carlo),
        ("exact function preservation", Duration::from_secs(10), function_preservation),
        ("gradient symmetry", Duration::from_secs(5), gradient_symmetry),
        ("symmetry lock and break", Duration::from_secs(120), symmetry_lock),
        ("newton-schulz block invariance", Duration::from_secs(5), newton_schulz_blocks),
        ("schedule algebra", Duration::from_secs(1), schedule_algebra),
        ("compute-cost table", Duration::from_secs(1), cost_table),
        ("gradcheck", Duration::from_secs(60), gradcheck_micro),
        ("desk-scale trend", Duration::from_secs(15 * 60), desk_trend),
        ("determinism and round trip", Duration::from_secs(5 * 60), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in checks.iter().enumerate() {
        let t0 = Instant::now();
        let out = check();
        let took = t0.elapsed();
        let in_time = took <= *budget;
        let ok = out.passed && in_time;
        if !ok {
            failed += 1;
        }
        let time_note = if in_time { String::new() } else { format!(" over budget {budget:?}") };
        println!(
            "{} {:>2} {name}: {} [{:.2}s{time_note}]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 && std::env::var_os("WIDEGROW_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn scale_factors() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for d in [4usize, 8, 12, 64, 256] {
        for mult in [1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 8.0] {
            let dn = (d as f64 * mult).round() as usize;
            let (df, dnf) = (d as f64, dn as f64);
            let indep = (df / dnf).sqrt();
            let c = dnf / df - 1.0;
            let copied = if c <= 1.0 { 1.0 / (1.0 + 3.0 * c).sqrt() } else { 1.0 / (1.0 + c) };
            let got_i = fan_in_scale_factor(false, d, dn).unwrap();
            let got_c = fan_in_scale_factor(true, d, dn).unwrap();
            worst = worst.max(((got_i - indep) / indep).abs()).max(((got_c - copied) / copied).abs());
            pairs += 1;
        }
    }
    // Both closed forms at c = 1.
    let at_double = (1.0 / (1.0f64 + 3.0).sqrt() - 1.0 / 2.0).abs();
    let doubled = fan_in_scale_factor(true, 32, 64).unwrap();
    let ok = worst <= 2.0 * f64::EPSILON && at_double == 0.0 && doubled == 0.5;
    Outcome::new(ok, format!("{pairs} pairs, max rel err {worst:.1e}, factor at 2x = {doubled}"))
}

/// `E[RMS²(y′)] / E[RMS²(y)]` for one fan-in regime, where the grown input
/// comes from an upstream fan-out in `upstream`.
fn rms_ratio(w_regime: InitRegime, upstream: InitRegime, scale: bool, samples: usize) -> f64 {
    let (d_in, d_out, chunk) = (256, 16, 2000);
    let mut rng = Rng::derived(7, &format!("mc/{w_regime}/{upstream}"));
    let w = sample_gaussian(&mut rng, &[d_out, d_in], 0.0, 1.0 / (d_in as f64).sqrt()).unwrap();
    let grown = fan_in_expand(&w, 2.0, w_regime, upstream == InitRegime::Copy, &mut rng, scale).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    let mut done = 0;
    while done < samples {
        let n = chunk.min(samples - done);
        // Columns are samples; growing rows extends each input vector.
        let x = sample_gaussian(&mut rng, &[d_in, n], 0.0, 1.0).unwrap();
        let xg = fan_out_expand(&x, 2.0, upstream, &mut rng).unwrap();
        before += w.matmul(&x).unwrap().data().iter().map(|v| v * v).sum::<f64>();
        after += grown.matmul(&xg).unwrap().data().iter().map(|v| v * v).sum::<f64>();
        done += n;
    }
    after / before
}

fn rms_monte_carlo() -> Outcome {
    let samples = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for upstream in [InitRegime::Copy, InitRegime::Random] {
        for w_regime in [InitRegime::Copy, InitRegime::Random, InitRegime::Zero] {
            let r = rms_ratio(w_regime, upstream, true, samples);
            ok &= (0.95..=1.05).contains(&r);
            parts.push(format!("{upstream}-{w_regime}={r:.4}"));
        }
    }
    let control = rms_ratio(InitRegime::Copy, InitRegime::Copy, false, samples).sqrt();
    ok &= (control - 2.0).abs() <= 0.02;
    parts.push(format!("unscaled copy-copy rms ratio={control:.4}"));
    Outcome::new(ok, parts.join(" "))
}

fn desk_batches() -> Vec<Batch> {
    let corpus = widegrow::harness::Corpus::new(&CorpusSpec::default(), 64).unwrap();
    (0..4).map(|s| corpus.batch(100 + s, 4, 64).unwrap()).collect()
}

fn function_preservation() -> Outcome {
    let model = Model::init(ModelConfig::default(), 0).unwrap();
    let batches = desk_batches();
    let reference: Vec<_> = batches.iter().map(|b| forward(&model, b).unwrap()).collect();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, plan) in [
        ("inner", ExpansionPlan::inner(2.0)),
        ("hidden", ExpansionPlan::hidden(2.0)),
        ("joint", ExpansionPlan::joint(2.0, 2.0)),
    ] {
        let (big, _) = expand_model(&model, &plan).unwrap();
        let mut diff: f64 = 0.0;
        for (b, r) in batches.iter().zip(&reference) {
            let out = forward(&big, b).unwrap();
            for (x, y) in out.logits.iter().zip(&r.logits) {
                diff = diff.max(x.max_abs_diff(y).unwrap());
            }
        }
        worst = worst.max(diff);
        parts.push(format!("{name}={diff:.1e}"));
    }
    Outcome::new(worst <= 1e-10, format!("max |dlogit| {}", parts.join(" ")))
}

fn gradient_symmetry() -> Outcome {
    let model = Model::init(ModelConfig::default(), 0).unwrap();
    let batch = &desk_batches()[0];
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for plan in [ExpansionPlan::inner(2.0), ExpansionPlan::hidden(2.0)] {
        let (big, map) = expand_model(&model, &plan).unwrap();
        let (_, grads, _) = forward_backward(&big, batch).unwrap();
        for (name, regions) in map.iter() {
            let g = grads.get(name).unwrap();
            let g2 = if g.ndim() == 1 {
                NumArray::from_vec(&[g.len(), 1], g.data().to_vec()).unwrap()
            } else {
                g.clone()
            };
            for p in regions.copy_pairs() {
                let len = p.end - p.start;
                let a = g2.slice2(p.axis, p.start, p.end).unwrap();
                let b = g2.slice2(p.axis, p.donor_start, p.donor_start + len).unwrap();
                worst = worst.max(a.max_abs_diff(&b).unwrap());
                pairs += 1;
            }
        }
    }
    Outcome::new(
        pairs > 0 && worst <= 1e-12,
        format!("{pairs} copied blocks, max |dg| {worst:.1e}"),
    )
}

/// Reference desk run, grown 2x on the expert axis at step 20 and trained
/// 100 steps further without re-warmup.
fn lock_config(optimizer: OptimizerKind, policy: StatePolicy) -> RunConfig {
    let mut cfg = RunConfig {
        steps: 120,
        batch_sequences: 4,
        batch_length: 64,
        probe_interval: 1000,
        eval_sequences: 2,
        optimizer,
        ..RunConfig::default()
    };
    let mut plan = ExpansionPlan::inner(2.0);
    plan.state_policy = policy;
    plan.rewarm = None;
    cfg.expansion = Some(widegrow::harness::ExpansionEvent { step: 20, plan });
    cfg
}

fn symmetry_lock() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for optimizer in [OptimizerKind::AdamW, OptimizerKind::Muon] {
        for policy in [StatePolicy::CopyStates, StatePolicy::DropAll, StatePolicy::AsymmetricReset] {
            let mut t = Trainer::new(&lock_config(optimizer, policy)).unwrap();
            t.run().unwrap();
            let div = symmetry_distance(t.model(), t.regions()).unwrap().max_abs();
            ok &= match policy {
                StatePolicy::AsymmetricReset => div >= 1e-6,
                _ => div <= 1e-10,
            };
            parts.push(format!("{optimizer}/{policy}={div:.1e}"));
        }
    }
    Outcome::new(ok, parts.join(" "))
}

fn newton_schulz_blocks() -> Outcome {
    let mut rng = Rng::new(19);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (r, c) in [(2, 3), (8, 16), (16, 64), (32, 128), (64, 64)] {
        let a = sample_gaussian(&mut rng, &[r, c], 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut rng, &[c, r], 0.0, 1.0).unwrap();
        let rows = a.concat(&a, 0).unwrap();
        let cols = b.concat(&b, 1).unwrap();
        for (x, axis) in [(rows, DuplicatedAxis::Rows), (cols, DuplicatedAxis::Columns)] {
            let x = x.scale(1.0 / x.frobenius());
            for iters in 1..=10 {
                let y = newton_schulz(&x, iters, [3.4445, -4.7750, 2.0315]).unwrap();
                worst = worst.max(gram_block_check(&y, axis).unwrap());
                cases += 1;
            }
        }
    }
    Outcome::new(worst <= 1e-12, format!("{cases} cases, max block gap {worst:.1e}"))
}

fn schedule_algebra() -> Outcome {
    let (tw, total, eta0, peak, fin) = (60, 2000, 1e-4, 3e-3, 3e-5);
    let base = CosineWarmup::new(tw, total, eta0, peak, fin).unwrap();
    let mid = tw as f64 + (total - tw) as f64 / 2.0;
    let mid_want = fin + (peak - fin) * 0.5;
    let mut ok = base.lr_at(0.0).unwrap() == eta0
        && base.lr_at(tw as f64).unwrap() == peak
        && base.lr_at(total as f64).unwrap() == fin
        && (base.lr_at(mid).unwrap() - mid_want).abs() <= f64::EPSILON * peak;
    let rw = RewarmPlan::default();
    let te = 1000;
    let spec = rw.at(te);
    let eta_e = base.lr_at(te as f64).unwrap();
    let just_after = rewarm_lr_at(&base, &spec, te as f64 + 1e-9).unwrap();
    let at_te = region_lr(&base, Some(&spec), RegionTag::New, te as f64).unwrap();
    let peak_rw = rewarm_lr_at(&base, &spec, (te + rw.steps) as f64).unwrap();
    let end = rewarm_lr_at(&base, &spec, total as f64).unwrap();
    ok &= rw.steps == 250 && rw.ratio == 1.3;
    ok &= at_te == eta_e && (just_after - eta_e).abs() <= 1e-9 * eta_e;
    ok &= peak_rw == 1.3 * eta_e && end == fin;
    ok &= region_lr(&base, Some(&spec), RegionTag::Original, 1500.0).unwrap() == base.lr_at(1500.0).unwrap();
    Outcome::new(
        ok,
        format!("eta_e={eta_e:.6e} rewarm peak={peak_rw:.6e} terminal={end:.1e}"),
    )
}

fn cost_table() -> Outcome {
    let (d, de) = (200e9, 100e9);
    let sig3 = |x: f64, want: f64| (x - want).abs() < 0.005 * want.abs().max(1.0).min(10.0);
    let mut ok = true;
    let mut parts = Vec::new();
    let base = compute_cost(450e6, 450e6, d, de).unwrap();
    ok &= sig3(base.c_scratch / 1e20, 5.40);
    parts.push(format!("{:.2}", base.c_scratch / 1e20));
    for (n_large, scratch, star, saved) in [
        (751e6, 9.01, 7.21, 20.0),
        (900e6, 10.80, 8.10, 25.0),
        (1.5e9, 18.00, 11.70, 35.0),
    ] {
        let r = compute_cost(450e6, n_large, d, de).unwrap();
        let (s, c, p) = (r.c_scratch / 1e20, r.c_star / 1e20, 100.0 * r.flops_saved);
        ok &= format!("{s:.2}") == format!("{scratch:.2}")
            && format!("{c:.2}") == format!("{star:.2}")
            && format!("{p:.0}") == format!("{saved:.0}");
        parts.push(format!("{s:.2}/{c:.2}/{p:.1}%"));
    }
    Outcome::new(ok, format!("x1e20 flops {}", parts.join(" ")))
}

fn gradcheck_micro() -> Outcome {
    let cfg = ModelConfig {
        layers: 1,
        d_model: 8,
        d_ffn: 6,
        n_heads: 2,
        n_kv: 1,
        d_head: 4,
        experts: 4,
        top_k: 2,
        vocab: 10,
        tie_embeddings: false,
        norm_eps: 1e-6,
        pos_base: 8,
        pos_scale: 0.125,
    };
    let model = Model::init(cfg, 3).unwrap();
    let corpus = widegrow::harness::Corpus::new(&CorpusSpec::default(), 10).unwrap();
    let batch = corpus.batch(5, 2, 6).unwrap();
    let report = gradcheck(&model, &batch, 1e-5, 1e-5).unwrap();
    let classes = ["norm", "wq", "wk", "wv", "wo", "router", "up", "gate", "down", "embed", "head"];
    let covered = classes
        .iter()
        .all(|c| report.params.iter().any(|p| p.name.contains(c)));
    let failures: Vec<_> = report.failures().map(|p| p.name.clone()).collect();
    Outcome::new(
        report.passed() && covered,
        format!(
            "{} tensors, max rel err {:.1e}{}",
            report.params.len(),
            report.max_error(),
            if failures.is_empty() { String::new() } else { format!(", failed: {}", failures.join(",")) }
        ),
    )
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Config text of the three trend cells, each differing from the previous
/// in one factor.
fn trend_cells() -> [(&'static str, &'static str); 3] {
    [
        ("trend_full", "expansion.rewarm = true\n"),
        ("trend_no_rewarm", "expansion.rewarm = false\n"),
        ("trend_unscaled", "expansion.rewarm = false\nexpansion.expert.scale = false\n"),
    ]
}

fn trend_config(extra: &str, out: &Path) -> RunConfig {
    let text = format!(
        "seed = 0\nsteps = 2000\nexpansion.step = 1000\nexpansion.inner_ratio = 2\nexpansion.state_policy = asymmetric_reset\n{extra}output.dir = {}\n",
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

fn desk_trend() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let update = std::env::var_os("WIDEGROW_UPDATE_FIXTURES").is_some();
    let mut losses = Vec::new();
    let mut fixtures_match = true;
    for (name, extra) in trend_cells() {
        let out = tmp.path().join(name);
        let outcome = run_training(&trend_config(extra, &out)).unwrap();
        losses.push(outcome.summary.final_eval_loss.unwrap_or(f64::NAN));
        let csv = fs::read(out.join("metrics.csv")).unwrap();
        let fixture = fixtures_dir().join(format!("{name}.csv"));
        if update || !fixture.exists() {
            fs::create_dir_all(fixtures_dir()).unwrap();
            fs::write(&fixture, &csv).unwrap();
        } else {
            fixtures_match &= fs::read(&fixture).unwrap() == csv;
        }
    }
    let ordered = losses[0] <= losses[1] && losses[1] <= losses[2];
    Outcome::new(
        ordered && fixtures_match,
        format!(
            "seed 0 final eval loss full={:.4} no-rewarm={:.4} unscaled={:.4}, fixtures {}",
            losses[0],
            losses[1],
            losses[2],
            if fixtures_match { "match" } else { "differ" }
        ),
    )
}

/// Reruns the first trend cell and compares against its fixture, which the
/// trend check has just verified against its own run.
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (name, extra) = trend_cells()[0];
    let a = tmp.path().join("a");
    run_training(&trend_config(extra, &a)).unwrap();
    let fixture = fixtures_dir().join(format!("{name}.csv"));
    let same_csv = fs::read(&fixture).ok() == Some(fs::read(a.join("metrics.csv")).unwrap());

    let ck = Checkpoint::load(&a.join("checkpoint")).unwrap();
    let again = tmp.path().join("again");
    ck.save(&again).unwrap();
    let same_ckpt = ["manifest.json", "tensors.bin"]
        .iter()
        .all(|f| fs::read(a.join("checkpoint").join(f)).unwrap() == fs::read(again.join(f)).unwrap());
    Outcome::new(
        same_csv && same_ckpt,
        format!(
            "rerun metrics csv {}, checkpoint save/load/save {}",
            if same_csv { "byte-identical" } else { "differs" },
            if same_ckpt { "byte-identical" } else { "differs" }
        ),
    )
}
