mod common;

use vitconv::checkpoint::{inherit_weights, CheckpointMeta};
use vitconv::graph::{build_deit, execute, random_checkpoint, ModelConfig};
use vitconv::harness::random_inputs;
use vitconv::rewrite::{lower, lower_with, Pass};

fn check(cfg: &ModelConfig, seeds: std::ops::Range<u64>, std: f32, tol: f64) {
    let g = build_deit(cfg).unwrap();
    let (l, plan) = lower(&g).unwrap();
    for seed in seeds {
        let ck = random_checkpoint(&g, CheckpointMeta::default(), seed, std).unwrap();
        let inh = inherit_weights(&ck, &l, &plan).unwrap();
        let x = random_inputs(g.input_shape(), 1, 1000 + seed)
            .unwrap()
            .remove(0);
        let want = common::deit_forward(cfg, &ck, &x);
        for (what, out) in [
            ("original", execute(&g, &ck, &x)),
            ("lowered", execute(&l, &inh, &x)),
        ] {
            let out = out.unwrap();
            let diff = out
                .as_f32()
                .unwrap()
                .iter()
                .zip(&want)
                .map(|(a, b)| (*a as f64 - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= tol, "{} seed {seed} {what}: {diff:e}", cfg.label());
        }
    }
}

#[test]
fn toy_matches_token_oracle() {
    check(&ModelConfig::toy(), 0..20, 0.02, 1e-5);
}

#[test]
fn toy_with_large_weights_matches_token_oracle() {
    check(&ModelConfig::toy(), 0..5, 0.2, 1e-4);
}

#[test]
fn distilled_toy_matches_token_oracle() {
    check(&ModelConfig::toy().distilled(), 0..5, 0.02, 1e-5);
}

#[test]
fn tiny_matches_token_oracle() {
    check(&ModelConfig::tiny(), 0..1, 0.02, 1e-4);
}

#[test]
fn attention_relayout_keeps_outputs() {
    let cfg = ModelConfig::toy();
    let g = build_deit(&cfg).unwrap();
    let (std_l, plan) = lower(&g).unwrap();
    let (l, _) = lower_with(
        &g,
        &[
            Pass::LayoutToNchw,
            Pass::LinearToConv,
            Pass::LayernormToConv,
            Pass::AttentionRelayout,
        ],
    )
    .unwrap();
    assert!(l.nodes.len() < std_l.nodes.len());
    let ck = random_checkpoint(&g, CheckpointMeta::default(), 3, 0.02).unwrap();
    let inh = inherit_weights(&ck, &std_l, &plan).unwrap();
    for x in random_inputs(g.input_shape(), 4, 8).unwrap() {
        let want = common::deit_forward(&cfg, &ck, &x);
        let got = execute(&l, &inh, &x).unwrap();
        let diff = got
            .as_f32()
            .unwrap()
            .iter()
            .zip(&want)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-5, "{diff:e}");
    }
}
