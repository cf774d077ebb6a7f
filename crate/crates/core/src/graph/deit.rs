use super::ir::{Dialect, Graph, GraphBuilder, Layout, Op};
use super::ModelConfig;
use crate::error::Result;

/// Original-dialect DeiT graph for a single image.
pub fn build_deit(config: &ModelConfig) -> Result<Graph> {
    build_deit_batched(config, 1)
}

/// Original-dialect DeiT graph with a static batch size.
///
/// Pre-norm blocks; the class (and distillation) tokens are sliced after the
/// final LayerNorm; distilled logits are the mean of both heads.
pub fn build_deit_batched(config: &ModelConfig, batch: usize) -> Result<Graph> {
    config.check()?;
    let c = config.embed_dim;
    let n = config.tokens();
    let h = config.heads;
    let d = config.head_dim();
    let b = batch;

    let mut g = GraphBuilder::new(vec![
        b,
        config.in_channels,
        config.img_size,
        config.img_size,
    ]);
    let x = g.input();
    let x = g.push(
        "patch",
        Op::PatchEmbed {
            in_channels: config.in_channels,
            embed_dim: c,
            patch: config.patch,
        },
        &[x],
        &["patch.w", "patch.b"],
    )?;
    let x = g.push(
        "patch.flatten",
        Op::Reshape {
            shape: vec![b, c, config.patches()],
        },
        &[x],
        &[],
    )?;
    let x = g.push(
        "patch.tokens",
        Op::Permute {
            perm: vec![0, 2, 1],
        },
        &[x],
        &[],
    )?;
    let token_params: &[&str] = if config.distilled {
        &["cls", "dist"]
    } else {
        &["cls"]
    };
    let x = g.push(
        "tokens",
        Op::TokenInsert {
            count: config.extra_tokens(),
            dim: c,
        },
        &[x],
        token_params,
    )?;
    let mut x = g.push("pos", Op::AddPosEmbed { tokens: n, dim: c }, &[x], &["pos"])?;

    let linear = |inf, outf| Op::Linear {
        in_features: inf,
        out_features: outf,
        layout: Layout::Tokens,
    };
    let ln = Op::LayerNorm {
        dim: c,
        eps: config.eps,
        layout: Layout::Tokens,
    };

    for i in 0..config.depth {
        let p = format!("blk{i}");
        let nm = |s: &str| format!("{p}.{s}");

        // attention
        let y = g.push(
            nm("ln1"),
            ln.clone(),
            &[x],
            &[&nm("ln1.gamma"), &nm("ln1.beta")],
        )?;
        let y = g.push(
            nm("attn.qkv"),
            linear(c, 3 * c),
            &[y],
            &[&nm("attn.qkv.w"), &nm("attn.qkv.b")],
        )?;
        let y = g.push(
            nm("attn.split"),
            Op::Reshape {
                shape: vec![b, n, 3, h, d],
            },
            &[y],
            &[],
        )?;
        let y = g.push(
            nm("attn.heads"),
            Op::Permute {
                perm: vec![2, 0, 3, 1, 4],
            },
            &[y],
            &[],
        )?;
        let qkv = g.push(
            nm("attn.stack"),
            Op::Reshape {
                shape: vec![3 * b, h, n, d],
            },
            &[y],
            &[],
        )?;
        let part = |g: &mut GraphBuilder, name: &str, k: usize| {
            g.push(
                nm(name),
                Op::Slice {
                    axis: 0,
                    start: k * b,
                    len: b,
                },
                &[qkv],
                &[],
            )
        };
        let q = part(&mut g, "attn.q", 0)?;
        let k = part(&mut g, "attn.k", 1)?;
        let v = part(&mut g, "attn.v", 2)?;
        let q = g.push(
            nm("attn.q_scale"),
            Op::MulScalar {
                value: 1.0 / (d as f32).sqrt(),
            },
            &[q],
            &[],
        )?;
        let s = g.push(nm("attn.scores"), Op::MatMulQK, &[q, k], &[])?;
        let s = g.push(nm("attn.softmax"), Op::Softmax, &[s], &[])?;
        let y = g.push(nm("attn.context"), Op::MatMulAV, &[s, v], &[])?;
        let y = g.push(
            nm("attn.merge"),
            Op::Permute {
                perm: vec![0, 2, 1, 3],
            },
            &[y],
            &[],
        )?;
        let y = g.push(
            nm("attn.merged"),
            Op::Reshape {
                shape: vec![b, n, c],
            },
            &[y],
            &[],
        )?;
        let y = g.push(
            nm("attn.proj"),
            linear(c, c),
            &[y],
            &[&nm("attn.proj.w"), &nm("attn.proj.b")],
        )?;
        x = g.push(nm("res1"), Op::Add { param_shape: None }, &[x, y], &[])?;

        // feed-forward
        let hid = config.mlp_hidden();
        let y = g.push(
            nm("ln2"),
            ln.clone(),
            &[x],
            &[&nm("ln2.gamma"), &nm("ln2.beta")],
        )?;
        let y = g.push(
            nm("ffn.fc1"),
            linear(c, hid),
            &[y],
            &[&nm("ffn.fc1.w"), &nm("ffn.fc1.b")],
        )?;
        let y = g.push(nm("ffn.gelu"), Op::Gelu, &[y], &[])?;
        let y = g.push(
            nm("ffn.fc2"),
            linear(hid, c),
            &[y],
            &[&nm("ffn.fc2.w"), &nm("ffn.fc2.b")],
        )?;
        x = g.push(nm("res2"), Op::Add { param_shape: None }, &[x, y], &[])?;
    }

    let x = g.push("norm", ln, &[x], &["norm.gamma", "norm.beta"])?;
    let head = |g: &mut GraphBuilder, name: &str, token: usize| -> Result<usize> {
        let t = g.push(
            format!("{name}.token"),
            Op::Slice {
                axis: 1,
                start: token,
                len: 1,
            },
            &[x],
            &[],
        )?;
        let t = g.push(
            format!("{name}.flatten"),
            Op::Reshape { shape: vec![b, c] },
            &[t],
            &[],
        )?;
        g.push(
            name,
            linear(c, config.num_classes),
            &[t],
            &[&format!("{name}.w"), &format!("{name}.b")],
        )
    };
    let mut out = head(&mut g, "head", 0)?;
    if config.distilled {
        let dist = head(&mut g, "head_dist", 1)?;
        let sum = g.push(
            "heads.sum",
            Op::Add { param_shape: None },
            &[out, dist],
            &[],
        )?;
        out = g.push("heads.mean", Op::MulScalar { value: 0.5 }, &[sum], &[])?;
    }
    Ok(g.finish(Dialect::Original, out))
}

/// Exact scalar parameter count of the built model.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    let g = build_deit(config)?;
    Ok(g.param_specs()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_shapes() {
        let g = build_deit(&ModelConfig::tiny()).unwrap();
        assert_eq!(g.input_shape(), &[1, 3, 224, 224]);
        assert_eq!(g.output_shape(), &[1, 1000]);
        let pos = g.node("pos").unwrap();
        assert_eq!(g.edges[pos.output].shape, vec![1, 197, 192]);
        assert_eq!(g.count_kind("Linear"), 49);
        assert_eq!(g.count_kind("LayerNorm"), 25);
    }

    #[test]
    fn distilled_has_two_heads() {
        let g = build_deit(&ModelConfig::tiny().distilled()).unwrap();
        let pos = g.node("pos").unwrap();
        assert_eq!(g.edges[pos.output].shape, vec![1, 198, 192]);
        assert!(g.node("head").is_some() && g.node("head_dist").is_some());
        let mean = g.node("heads.mean").unwrap();
        assert_eq!(mean.output, g.output);
    }

    #[test]
    fn toy_shapes() {
        let g = build_deit(&ModelConfig::toy()).unwrap();
        assert_eq!(g.input_shape(), &[1, 3, 8, 8]);
        assert_eq!(g.output_shape(), &[1, 10]);
        let pos = g.node("pos").unwrap();
        assert_eq!(g.edges[pos.output].shape, vec![1, 5, 64]);
    }

    #[test]
    fn rebuild_is_identical() {
        let a = build_deit(&ModelConfig::toy()).unwrap();
        let b = build_deit(&ModelConfig::toy()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batched_graph() {
        let g = build_deit_batched(&ModelConfig::toy(), 3).unwrap();
        assert_eq!(g.input_shape(), &[3, 3, 8, 8]);
        assert_eq!(g.output_shape(), &[3, 10]);
    }
}
