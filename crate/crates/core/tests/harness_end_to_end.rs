use std::fs;
use std::path::Path;
use std::process::Command;

use widegrow::harness::{
    parse_grid, run_sweep, run_training, train_in_memory, Checkpoint, RunConfig, Table,
};

const TINY: &str = "\
model.layers = 1
model.d_model = 16
model.d_ffn = 8
model.n_heads = 2
model.n_kv = 1
model.d_head = 8
model.experts = 4
model.top_k = 2
model.vocab = 12
model.pos_base = 16
batch.sequences = 2
batch.length = 16
eval.sequences = 2
probe_interval = 5
";

fn tiny(extra: &str, out: &Path) -> RunConfig {
    RunConfig::parse(&format!("{TINY}{extra}output.dir = {}\n", out.display())).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_widegrow"))
}

#[test]
fn zero_step_run_writes_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&tiny("steps = 0\n", dir.path())).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.summary.steps_completed, 0);
    let ck = Checkpoint::load(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(ck.step, 0);
    let table = Table::read(&dir.path().join("metrics.csv")).unwrap();
    assert!(table.rows.is_empty());
}

#[test]
fn expansion_keeps_eval_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("steps = 20\nexpansion.step = 10\nexpansion.inner_ratio = 2\nexpansion.hidden_ratio = 2\n", dir.path());
    let out = train_in_memory(&cfg).unwrap();
    let e = out.summary.expansion.unwrap();
    assert!((e.eval_before - e.eval_after).abs() < 1e-8);
    assert!(e.params_after > e.params_before);
    assert!(out.records.iter().all(|r| r.eval_loss.is_finite()));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "steps = 15\nexpansion.step = 7\nexpansion.inner_ratio = 2\n";
    for name in ["a", "b"] {
        run_training(&tiny(extra, &dir.path().join(name))).unwrap();
    }
    for file in ["metrics.csv", "summary.json", "checkpoint/tensors.bin"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(file)).unwrap(),
            fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file}"
        );
    }
    // The manifest embeds the config, which names each run's own directory.
    let manifest = |name: &str| {
        fs::read_to_string(dir.path().join(name).join("checkpoint/manifest.json"))
            .unwrap()
            .replace(&dir.path().join(name).display().to_string(), "OUT")
    };
    assert_eq!(manifest("a"), manifest("b"));
}

#[test]
fn cli_train_then_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("{TINY}steps = 6\n")).unwrap();
    let out = dir.path().join("run");
    let st = bin().arg("train").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let st = bin().arg("check").arg(out.join("checkpoint")).output().unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).starts_with("ok:"));
}

#[test]
fn cli_unit_ratio_expand_keeps_parameters() {
    let dir = tempfile::tempdir().unwrap();
    run_training(&tiny("steps = 3\n", &dir.path().join("run"))).unwrap();
    let plan = dir.path().join("plan.txt");
    fs::write(&plan, "expansion.inner_ratio = 1\nexpansion.state_policy = copy_states\n").unwrap();
    let grown = dir.path().join("grown");
    let st = bin()
        .arg("expand")
        .arg(dir.path().join("run/checkpoint"))
        .arg(&plan)
        .arg(&grown)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let a = Checkpoint::load(&dir.path().join("run/checkpoint")).unwrap();
    let b = Checkpoint::load(&grown).unwrap();
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn cli_cost_prints_savings() {
    let st = bin().args(["cost", "450e6", "751e6", "200e9", "100e9"]).output().unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).contains("saved=20.0%"));
}

#[test]
fn cli_rejects_malformed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "steps = 10\nsteps is ten\n").unwrap();
    let st = bin().arg("train").arg(&cfg).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("line 2"));
}

#[test]
fn sweep_runs_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny("steps = 6\nexpansion.step = 3\n", dir.path());
    let axes = parse_grid("schedule.peak_lr = 1e-3 | 3e-3\nexpansion.rewarm = true | false\n").unwrap();
    let rows = run_sweep(&base, &axes).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.status == "ok" && r.final_eval_loss.is_finite()));
    let sorted = rows.windows(2).all(|w| w[0].final_eval_loss <= w[1].final_eval_loss);
    assert!(sorted);
    assert!(dir.path().join("sweep.csv").exists());
}

#[test]
fn single_cell_sweep_matches_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny("steps = 8\n", &dir.path().join("sweep"));
    let rows = run_sweep(&base, &parse_grid("seed = 4\n").unwrap()).unwrap();
    let plain = run_training(&tiny("steps = 8\nseed = 4\n", &dir.path().join("plain"))).unwrap();
    assert_eq!(rows[0].final_eval_loss, plain.summary.final_eval_loss.unwrap());
    assert_eq!(
        fs::read(dir.path().join("sweep/cell_000/metrics.csv")).unwrap(),
        fs::read(dir.path().join("plain/metrics.csv")).unwrap()
    );
}

#[test]
fn asymmetric_reset_breaks_symmetry_in_policy_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny("steps = 25\nexpansion.step = 5\nexpansion.rewarm = false\n", dir.path());
    let axes = parse_grid("expansion.state_policy = copy_states | drop_all | asymmetric_reset\n").unwrap();
    let rows = run_sweep(&base, &axes).unwrap();
    let dist = |p: &str| {
        rows.iter()
            .find(|r| r.overrides.ends_with(p))
            .unwrap()
            .final_max_symmetry_distance
    };
    let reset = dist("asymmetric_reset");
    assert!(reset > 1e-6);
    assert!(reset > dist("copy_states") && reset > dist("drop_all"));
}

#[test]
fn divergence_leaves_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("steps = 30\nschedule.peak_lr = 1e200\nschedule.warmup_steps = 0\n", dir.path());
    assert!(run_training(&cfg).is_err());
    let summary = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(summary.contains("failed"));
    let ck = Checkpoint::load(&dir.path().join("last_good")).unwrap();
    assert!(ck.model.params().is_finite());
}
