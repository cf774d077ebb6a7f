//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use vitconv::checkpoint::Checkpoint;
use vitconv::graph::{eval_float_node, ExecStats, Graph, ModelConfig, Op};
use vitconv::quant::CalibStats;
use vitconv::tensor::Tensor;

fn p(ck: &Checkpoint, name: &str) -> Vec<f64> {
    ck.get(name)
        .unwrap()
        .as_f32()
        .unwrap()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

pub fn layernorm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * r * g[i] + b[i])
        .collect()
}

/// `W x + b` with `W` stored row-major `out × in`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let inf = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + (0..inf).map(|i| w[o * inf + i] * x[i]).sum::<f64>())
        .collect()
}

/// Token-by-token DeiT forward pass in f64 for a single image, written
/// without the graph IR. Returns the logits.
pub fn deit_forward(cfg: &ModelConfig, ck: &Checkpoint, image: &Tensor) -> Vec<f64> {
    let c = cfg.embed_dim;
    let ps = cfg.patch;
    let grid = cfg.img_size / ps;
    let cin = cfg.in_channels;
    let img: Vec<f64> = image.as_f32().unwrap().iter().map(|&v| v as f64).collect();
    let hw = cfg.img_size;

    let pw = p(ck, "patch.w");
    let pb = p(ck, "patch.b");
    let mut tokens: Vec<Vec<f64>> = Vec::new();
    tokens.push(p(ck, "cls"));
    if cfg.distilled {
        tokens.push(p(ck, "dist"));
    }
    for py in 0..grid {
        for px in 0..grid {
            let mut t = vec![0.0; c];
            for (o, tv) in t.iter_mut().enumerate() {
                let mut acc = pb[o];
                for ci in 0..cin {
                    for ky in 0..ps {
                        for kx in 0..ps {
                            let xv = img[ci * hw * hw + (py * ps + ky) * hw + px * ps + kx];
                            acc += pw[((o * cin + ci) * ps + ky) * ps + kx] * xv;
                        }
                    }
                }
                *tv = acc;
            }
            tokens.push(t);
        }
    }
    let pos = p(ck, "pos");
    for (i, t) in tokens.iter_mut().enumerate() {
        for (j, v) in t.iter_mut().enumerate() {
            *v += pos[i * c + j];
        }
    }

    let n = tokens.len();
    let h = cfg.heads;
    let d = c / h;
    let eps = cfg.eps as f64;
    for blk in 0..cfg.depth {
        let q = |s: &str| format!("blk{blk}.{s}");
        let (g1, b1) = (p(ck, &q("ln1.gamma")), p(ck, &q("ln1.beta")));
        let (wqkv, bqkv) = (p(ck, &q("attn.qkv.w")), p(ck, &q("attn.qkv.b")));
        let qkv: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| dense(&layernorm(t, &g1, &b1, eps), &wqkv, &bqkv))
            .collect();
        let mut merged = vec![vec![0.0; c]; n];
        for head in 0..h {
            let off = head * d;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..d)
                            .map(|e| qkv[i][off + e] * qkv[j][c + off + e])
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..d {
                    merged[i][off + e] = (0..n).map(|j| ex[j] / z * qkv[j][2 * c + off + e]).sum();
                }
            }
        }
        let (wp, bp) = (p(ck, &q("attn.proj.w")), p(ck, &q("attn.proj.b")));
        for (t, m) in tokens.iter_mut().zip(&merged) {
            let y = dense(m, &wp, &bp);
            t.iter_mut().zip(y).for_each(|(a, b)| *a += b);
        }
        let (g2, b2) = (p(ck, &q("ln2.gamma")), p(ck, &q("ln2.beta")));
        let (w1, bb1) = (p(ck, &q("ffn.fc1.w")), p(ck, &q("ffn.fc1.b")));
        let (w2, bb2) = (p(ck, &q("ffn.fc2.w")), p(ck, &q("ffn.fc2.b")));
        for t in tokens.iter_mut() {
            let hid: Vec<f64> = dense(&layernorm(t, &g2, &b2, eps), &w1, &bb1)
                .into_iter()
                .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
                .collect();
            let y = dense(&hid, &w2, &bb2);
            t.iter_mut().zip(y).for_each(|(a, b)| *a += b);
        }
    }
    let (gn, bn) = (p(ck, "norm.gamma"), p(ck, "norm.beta"));
    let cls = layernorm(&tokens[0], &gn, &bn, eps);
    let logits = dense(&cls, &p(ck, "head.w"), &p(ck, "head.b"));
    if !cfg.distilled {
        return logits;
    }
    let dist = layernorm(&tokens[1], &gn, &bn, eps);
    let ld = dense(&dist, &p(ck, "head_dist.w"), &p(ck, "head_dist.b"));
    logits.iter().zip(ld).map(|(a, b)| (a + b) / 2.0).collect()
}

/// Quadruple-loop integer convolution over explicit NCHW indices.
#[allow(clippy::too_many_arguments)]
pub fn int_conv(
    x: &[i8],
    [b, ci, h, w]: [usize; 4],
    k: &[i8],
    [co, _, kh, kw]: [usize; 4],
    bias: &[i32],
    stride: usize,
) -> Vec<i32> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = Vec::with_capacity(b * co * oh * ow);
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc: i64 = bias.get(o).copied().unwrap_or(0) as i64;
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let xi = n * ci * h * w
                                    + c * h * w
                                    + (y * stride + dy) * w
                                    + xx * stride
                                    + dx;
                                let ki = o * ci * kh * kw + c * kh * kw + dy * kw + dx;
                                acc += x[xi] as i64 * k[ki] as i64;
                            }
                        }
                    }
                    out.push(i32::try_from(acc).expect("oracle accumulator overflow"));
                }
            }
        }
    }
    out
}

/// KL(P‖Q) for every candidate bin count, evaluated bin by bin. Chunk
/// membership is computed per bin as `ceil((k+1)·T/i) − 1` rather than from
/// chunk boundaries. Returns `(best i, all divergences)`.
pub fn kl_sweep(hist: &[u64], target: usize) -> (usize, Vec<(usize, f64)>) {
    let mut all = Vec::new();
    for i in target..=hist.len() {
        let outliers: u64 = hist[i..].iter().sum();
        let chunk_of = |k: usize| ((k + 1) * target).div_ceil(i) - 1;
        let mut sums = vec![0u64; target];
        let mut nz = vec![0u64; target];
        for k in 0..i {
            sums[chunk_of(k)] += hist[k];
            nz[chunk_of(k)] += (hist[k] > 0) as u64;
        }
        let ptot: f64 = hist.iter().sum::<u64>() as f64;
        let qtot: f64 = hist[..i].iter().sum::<u64>() as f64;
        let mut kl = 0.0f64;
        for k in 0..i {
            let pk = hist[k] + if k == i - 1 { outliers } else { 0 };
            if pk == 0 {
                continue;
            }
            let qk = if hist[k] > 0 {
                sums[chunk_of(k)] as f64 / nz[chunk_of(k)] as f64
            } else {
                0.0
            };
            if qk == 0.0 {
                kl = f64::INFINITY;
                break;
            }
            let (a, b) = (pk as f64 / ptot, qk / qtot);
            kl += a * (a / b).ln();
        }
        all.push((i, kl));
    }
    let best = all
        .iter()
        .fold((0usize, f64::INFINITY), |acc, &(i, kl)| {
            if kl <= acc.1 {
                (i, kl)
            } else {
                acc
            }
        })
        .0;
    (best, all)
}

fn fake_quant(v: f64, s: f64) -> f64 {
    (v / s).round().clamp(-127.0, 127.0) * s
}

fn edge_scale(stats: &CalibStats, g: &Graph, e: usize) -> f64 {
    let st = &stats.edges[&g.edge_name(e)];
    let r = (st.min.abs().max(st.max.abs())) as f64;
    if r == 0.0 {
        1.0
    } else {
        r / 127.0
    }
}

/// Simulated INT8 inference of a lowered graph in f64: operands of every
/// quantized convolution are rounded onto their int8 grids (per-tensor
/// activations from min/max statistics, per-channel weights), the product
/// is formed in f64, and the result is rounded onto the output grid.
pub fn fake_quant_forward(
    g: &Graph,
    ck: &Checkpoint,
    stats: &CalibStats,
    ln_fp32: bool,
    x: &Tensor,
) -> Tensor {
    let mut vals: Vec<Option<Tensor>> = vec![None; g.edges.len()];
    vals[g.input] = Some(x.clone());
    let mut st = ExecStats::default();
    for node in &g.nodes {
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|&e| vals[e].as_ref().unwrap())
            .collect();
        let quantized = node.op.is_conv()
            && !(ln_fp32 && (node.id.ends_with("/mean1") || node.id.ends_with("/mean2")));
        let out = if quantized {
            let stride = match node.op {
                Op::Conv2d { stride, .. } => stride,
                Op::PatchEmbed { patch, .. } => patch,
                _ => unreachable!(),
            };
            let sx = edge_scale(stats, g, node.inputs[0]);
            let sy = edge_scale(stats, g, node.output);
            let xs = ins[0].shape().to_vec();
            let wt = ck.get(&node.param_names[0]).unwrap();
            let ws = wt.shape().to_vec();
            let xq: Vec<f64> = ins[0]
                .as_f32()
                .unwrap()
                .iter()
                .map(|&v| fake_quant(v as f64, sx))
                .collect();
            let wv = wt.as_f32().unwrap();
            let per = ws[1] * ws[2] * ws[3];
            let mut wq = vec![0.0f64; wv.len()];
            let mut sw = vec![1.0f64; ws[0]];
            for o in 0..ws[0] {
                let row = &wv[o * per..(o + 1) * per];
                let m = row.iter().fold(0.0f64, |a, &v| a.max((v as f64).abs()));
                if m > 0.0 {
                    sw[o] = m / 127.0;
                    for (j, &v) in row.iter().enumerate() {
                        wq[o * per + j] = (v as f64 * 127.0 / m).round() * sw[o];
                    }
                }
            }
            let bias: Vec<f64> = match node.param_names.get(1) {
                Some(b) => ck
                    .get(b)
                    .unwrap()
                    .as_f32()
                    .unwrap()
                    .iter()
                    .enumerate()
                    .map(|(o, &v)| (v as f64 / (sx * sw[o])).round() * sx * sw[o])
                    .collect(),
                None => vec![0.0; ws[0]],
            };
            let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (co, kh, kw) = (ws[0], ws[2], ws[3]);
            let oh = (h - kh) / stride + 1;
            let ow = (w - kw) / stride + 1;
            let mut y = Vec::with_capacity(b * co * oh * ow);
            for n in 0..b {
                for o in 0..co {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = bias[o];
                            for c in 0..ci {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        acc += xq[((n * ci + c) * h + yy * stride + dy) * w
                                            + xx * stride
                                            + dx]
                                            * wq[((o * ci + c) * kh + dy) * kw + dx];
                                    }
                                }
                            }
                            y.push(fake_quant(acc, sy) as f32);
                        }
                    }
                }
            }
            Tensor::from_f32(vec![b, co, oh, ow], y).unwrap()
        } else {
            eval_float_node(node, &ins, ck, &mut st).unwrap()
        };
        vals[node.output] = Some(out);
    }
    vals[g.output].take().unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
