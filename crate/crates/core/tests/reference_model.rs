mod common;

use common::{experts_of, max_abs_diff, oracle_forward, oracle_moe, tiny_config, to_mat};
use widegrow::model::{forward, moe_forward, Batch, Expert, Model, ModelConfig};
use widegrow::numerics::{sample_gaussian, Rng};

#[test]
fn forward_matches_reference_loops() {
    let model = Model::init(tiny_config(), 5).unwrap();
    let batch = common::markov_batch(11, 4, 3, 20);
    let out = forward(&model, &batch).unwrap();
    let n = batch.token_count() as f64;
    let mut loss = 0.0;
    let mut sub = vec![(0.0, 0.0); 4];
    let mut res = [0.0; 3];
    for (seq, logits) in batch.sequences().iter().zip(&out.logits) {
        let o = oracle_forward(&model, seq);
        let flat: Vec<f64> = o.logits.concat();
        assert!(max_abs_diff(&flat, logits.data()) < 1e-12);
        loss += o.loss_sum;
        for (acc, s) in sub.iter_mut().zip(&o.sublayer_sums) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        for (acc, r) in res.iter_mut().zip(&o.residual_sums) {
            *acc += r;
        }
    }
    assert!((out.loss - loss / n).abs() < 1e-12);
    for (tr, (s_in, s_out)) in out.trace.sublayers.iter().zip(&sub) {
        assert!((tr.s_in - s_in / n).abs() < 1e-12);
        assert!((tr.s_out - s_out / n).abs() < 1e-12);
    }
    for (r, want) in out.trace.residual.iter().zip(&res) {
        assert!((r - want / n).abs() < 1e-12);
    }
}

#[test]
fn untied_head_and_logit_scale_match_reference() {
    let cfg = ModelConfig {
        tie_embeddings: false,
        ..tiny_config()
    };
    let mut model = Model::init(cfg, 9).unwrap();
    model.set_logit_scale(0.7);
    let batch = common::markov_batch(11, 1, 1, 12);
    let out = forward(&model, &batch).unwrap();
    let o = oracle_forward(&model, &batch.sequences()[0]);
    assert!(max_abs_diff(&o.logits.concat(), out.logits[0].data()) < 1e-12);
}

#[test]
fn moe_matches_brute_force_routing() {
    let (d, f, e_count, k) = (8, 6, 4, 2);
    let mut rng = Rng::new(3);
    let router = sample_gaussian(&mut rng, &[e_count, d], 0.0, 1.0).unwrap();
    let experts: Vec<Expert> = (0..e_count)
        .map(|_| Expert {
            up: sample_gaussian(&mut rng, &[f, d], 0.0, 0.4).unwrap(),
            gate: sample_gaussian(&mut rng, &[f, d], 0.0, 0.4).unwrap(),
            down: sample_gaussian(&mut rng, &[d, f], 0.0, 0.4).unwrap(),
        })
        .collect();
    let x = sample_gaussian(&mut rng, &[10, d], 0.0, 1.0).unwrap();
    let (y, routing) = moe_forward(&x, &router, &experts, k).unwrap();

    let oracle_experts: Vec<common::OracleExpert> = experts
        .iter()
        .map(|e| common::OracleExpert {
            up: to_mat(&e.up),
            gate: to_mat(&e.gate),
            down: to_mat(&e.down),
        })
        .collect();
    let rmat = to_mat(&router);
    for i in 0..10 {
        let xi = x.row(i);
        // Exhaustive search over expert pairs for the largest probability mass.
        let logits: Vec<f64> = rmat.iter().map(|r| r.iter().zip(xi).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        let mut best = (0, 1);
        for a in 0..e_count {
            for b in a + 1..e_count {
                if p[a] + p[b] > p[best.0] + p[best.1] {
                    best = (a, b);
                }
            }
        }
        let chosen: Vec<usize> = routing.selected[i].iter().map(|s| s.0).collect();
        assert_eq!(chosen, vec![best.0, best.1]);
        let mass = p[best.0] + p[best.1];
        let mut want = vec![0.0; d];
        for e in [best.0, best.1] {
            for (w, v) in want.iter_mut().zip(oracle_experts[e].apply(xi)) {
                *w += p[e] / mass * v;
            }
        }
        assert!(max_abs_diff(&want, y.row(i)) < 1e-12);
        let (oracle_y, _) = oracle_moe(xi, &rmat, &oracle_experts, k);
        assert!(max_abs_diff(&oracle_y, y.row(i)) < 1e-12);
    }
}

#[test]
fn moe_layer_of_initialized_model_routes_like_oracle() {
    let model = Model::init(tiny_config(), 2).unwrap();
    let experts = experts_of(&model, 1);
    let lib_experts: Vec<Expert> = (0..4)
        .map(|e| Expert {
            up: model.param(&format!("layers.1.experts.{e}.up")).unwrap().clone(),
            gate: model.param(&format!("layers.1.experts.{e}.gate")).unwrap().clone(),
            down: model.param(&format!("layers.1.experts.{e}.down")).unwrap().clone(),
        })
        .collect();
    let router = model.param("layers.1.router").unwrap();
    let x = sample_gaussian(&mut Rng::new(8), &[6, 16], 0.0, 1.0).unwrap();
    let (y, routing) = moe_forward(&x, router, &lib_experts, 2).unwrap();
    for i in 0..6 {
        let (want, sel) = oracle_moe(x.row(i), &to_mat(router), &experts, 2);
        assert_eq!(routing.selected[i].iter().map(|s| s.0).collect::<Vec<_>>(), sel.iter().map(|s| s.0).collect::<Vec<_>>());
        assert!(max_abs_diff(&want, y.row(i)) < 1e-12);
    }
}

#[test]
fn rejects_out_of_range_tokens() {
    let model = Model::init(tiny_config(), 1).unwrap();
    let batch = Batch::new(vec![vec![0, 11]]).unwrap();
    assert!(forward(&model, &batch).is_err());
}
