mod common;

use proptest::prelude::*;

use vitconv::checkpoint::{inherit_weights, CheckpointMeta};
use vitconv::graph::{build_deit, random_checkpoint, ModelConfig};
use vitconv::harness::{eval_topk, random_inputs, verify_on, Dataset, FloatModel, QuantModel};
use vitconv::quant::{
    build_quantized, calibrate, compute_scale_kl, compute_scale_minmax, dequantize, matmul_int8,
    quantize_tensor, quantize_value, requantize, EdgeStats, QuantOptions,
};
use vitconv::rewrite::lower;
use vitconv::tensor::{conv2d, linear, Tensor};

fn stats_of(values: &[f32]) -> EdgeStats {
    let mut st = EdgeStats::default();
    st.observe_range(values);
    st.observe_hist(values);
    st
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_error_is_half_a_step(x in -1.0f32..1.0, s in 1e-4f32..0.1) {
        let x = x * 127.0 * s;
        let q = quantize_tensor(&Tensor::from_f32(vec![1], vec![x]).unwrap(), s).unwrap();
        let y = dequantize(&q, s).unwrap().as_f32().unwrap()[0];
        let bound = s as f64 / 2.0 + y.abs() as f64 * f32::EPSILON as f64;
        prop_assert!((x as f64 - y as f64).abs() <= bound);
    }

    #[test]
    fn quantization_is_monotone(a in -50.0f32..50.0, b in -50.0f32..50.0, s in 1e-3f32..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize_value(lo, s) <= quantize_value(hi, s));
    }

    #[test]
    fn requantize_stays_in_range(acc in any::<i32>(), m in 0.0f32..10.0) {
        let q = requantize(acc, m);
        prop_assert!((-127..=127).contains(&q));
    }

    #[test]
    fn kl_never_exceeds_min_max(vals in prop::collection::vec(-100.0f32..100.0, 1..2000), spike in 0usize..4) {
        let mut vals = vals;
        for i in 0..spike {
            vals.push(1e3 * (i as f32 + 1.0));
        }
        let st = stats_of(&vals);
        let mm = compute_scale_minmax(&st).unwrap();
        let kl = compute_scale_kl(&st, 128).unwrap();
        prop_assert!(kl.scale <= mm.scale);
    }

    #[test]
    fn kl_agrees_with_sweep_oracle(vals in prop::collection::vec(-5.0f32..5.0, 200..3000)) {
        let st = stats_of(&vals);
        let kl = compute_scale_kl(&st, 128).unwrap().scale;
        let (best, _) = common::kl_sweep(&st.hist, 128);
        let want = (best as f64 * st.absmax as f64 / st.hist.len() as f64 / 127.0) as f32;
        prop_assert!((kl - want).abs() <= 1e-6 * want, "{kl} vs {want}");
    }

    #[test]
    fn pointwise_conv_is_linear(
        n in 1usize..12, cin in 1usize..40, cout in 1usize..40, seed in any::<u64>()
    ) {
        let mk = |len: usize, k: u64| -> Vec<f32> {
            (0..len).map(|i| (((i as u64 * 2654435761 + (seed ^ k)) % 2001) as f32 - 1000.0) / 500.0).collect()
        };
        let x = mk(n * cin, 1);
        let w = mk(cout * cin, 2);
        let b = mk(cout, 3);
        let tok = Tensor::from_f32(vec![1, n, cin], x.clone()).unwrap();
        let wt = Tensor::from_f32(vec![cout, cin], w.clone()).unwrap();
        let bt = Tensor::from_f32(vec![cout], b).unwrap();
        let lin = linear(&tok, &wt, Some(&bt)).unwrap();
        // (1, N, C) -> (1, C, 1, N)
        let xc: Vec<f32> = (0..cin).flat_map(|c| (0..n).map(move |t| (t, c))).map(|(t, c)| x[t * cin + c]).collect();
        let conv = conv2d(
            &Tensor::from_f32(vec![1, cin, 1, n], xc).unwrap(),
            &wt.reshape(&[cout, cin, 1, 1]).unwrap(),
            Some(&bt),
            1,
        )
        .unwrap();
        let (l, c) = (lin.as_f32().unwrap(), conv.as_f32().unwrap());
        for t in 0..n {
            for o in 0..cout {
                prop_assert!((l[t * cout + o] - c[o * n + t]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn int8_matmul_matches_integer_oracle(
        m in 1usize..6, k in 1usize..20, n in 1usize..6, seed in any::<u64>()
    ) {
        let gen = |len: usize, salt: u64| -> Vec<i8> {
            (0..len).map(|i| ((i as u64 * 40503 + (seed ^ salt)) % 255) as i64 as i8).map(|v| v.max(-127)).collect()
        };
        let a = gen(m * k, 7);
        let b = gen(k * n, 9);
        let y = matmul_int8(
            &Tensor::from_i8(vec![1, m, k], a.clone()).unwrap(),
            &Tensor::from_i8(vec![1, k, n], b.clone()).unwrap(),
            0.05, 0.02, 0.5,
        ).unwrap();
        let y = y.as_i8().unwrap();
        let mult = (0.05f32 * 0.02 / 0.5) as f64;
        for i in 0..m {
            for j in 0..n {
                let acc: i64 = (0..k).map(|p| a[i * k + p] as i64 * b[p * n + j] as i64).sum();
                let want = (acc as f64 * mult).round().clamp(-127.0, 127.0) as i8;
                prop_assert_eq!(y[i * n + j], want);
            }
        }
    }
}

fn toy_models() -> (FloatModel, QuantModel, Dataset) {
    let g = build_deit(&ModelConfig::toy()).unwrap();
    let (l, plan) = lower(&g).unwrap();
    let ck = random_checkpoint(&g, CheckpointMeta::default(), 1, 0.02).unwrap();
    let inh = inherit_weights(&ck, &l, &plan).unwrap();
    let data = Dataset::synthetic(g.input_shape(), 6, 42).unwrap();
    let stats = calibrate(&l, &inh, &data.inputs()).unwrap();
    let qg = build_quantized(&l, &inh, &stats, &QuantOptions::default()).unwrap();
    (
        FloatModel {
            name: "lowered".into(),
            graph: l,
            params: inh,
        },
        QuantModel {
            name: "int8".into(),
            qg,
        },
        data,
    )
}

#[test]
fn calibration_ignores_sample_order() {
    let g = build_deit(&ModelConfig::toy()).unwrap();
    let (l, plan) = lower(&g).unwrap();
    let ck = random_checkpoint(&g, CheckpointMeta::default(), 2, 0.02).unwrap();
    let inh = inherit_weights(&ck, &l, &plan).unwrap();
    let mut xs = random_inputs(g.input_shape(), 9, 5).unwrap();
    let a = calibrate(&l, &inh, &xs).unwrap();
    xs.reverse();
    xs.swap(1, 4);
    let b = calibrate(&l, &inh, &xs).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn accuracy_ignores_dataset_order() {
    let (f, q, mut data) = toy_models();
    let a = (
        eval_topk(&f, &data, &[]).unwrap(),
        eval_topk(&q, &data, &[]).unwrap(),
    );
    data.samples.reverse();
    data.samples.rotate_left(7);
    let b = (
        eval_topk(&f, &data, &[]).unwrap(),
        eval_topk(&q, &data, &[]).unwrap(),
    );
    assert_eq!((a.0.top1, a.0.top5), (b.0.top1, b.0.top5));
    assert_eq!((a.1.top1, a.1.top5), (b.1.top1, b.1.top5));
}

#[test]
fn verification_is_symmetric() {
    let (f, q, data) = toy_models();
    let xs = data.inputs();
    let ab = verify_on(&f, &q, &xs, 1e-2, 1e-3).unwrap();
    let ba = verify_on(&q, &f, &xs, 1e-2, 1e-3).unwrap();
    assert_eq!(ab.max_abs_error, ba.max_abs_error);
    assert!((ab.mean_abs_error - ba.mean_abs_error).abs() <= 1e-12);
    assert_eq!(ab.argmax_agreement, ba.argmax_agreement);
    let same = verify_on(&f, &f, &xs, 1e-2, 1e-3).unwrap();
    assert!(same.pass && same.max_abs_error == 0.0 && same.sqnr_db.is_none());
}
