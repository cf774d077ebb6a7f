use super::{PassRecord, Rebuild, Substitution};
use crate::checkpoint::{ParamDirective, ParamSource};
use crate::error::{Error, Result};
use crate::graph::{Graph, Layout, Op};

/// Expand every channel-layout LayerNorm over `H` channels into
///
/// ```text
/// μ = conv1x1(x; 1/H)      d = x − μ      v = conv1x1(d²; 1/H)
/// y = d · rsqrt(v + eps) · γ + β
/// ```
///
/// Both mean convolutions map `H → H` channels with every weight `1/H`, so
/// each output channel carries the same mean and all edges stay 4-D. `γ`
/// and `β` become `1×H×1×1` parameters. The final node keeps the id of the
/// replaced LayerNorm.
pub fn layernorm_to_conv(graph: &Graph) -> Result<Graph> {
    layernorm_to_conv_recorded(graph).map(|(g, _)| g)
}

pub fn layernorm_to_conv_recorded(graph: &Graph) -> Result<(Graph, PassRecord)> {
    let mut rb = Rebuild::new(graph);
    let mut rec = PassRecord::default();
    for node in &graph.nodes {
        let Op::LayerNorm { dim, eps, layout } = node.op else {
            rb.copy(node)?;
            continue;
        };
        let xs = &graph.edges[node.inputs[0]].shape;
        if layout != Layout::Channels {
            return Err(Error::PassOrder {
                pass: "layernorm_to_conv".into(),
                msg: format!(
                    "LayerNorm `{}` reads {xs:?} activations; run layout_to_nchw first",
                    node.id
                ),
            });
        }
        if xs.len() != 4 || xs[1] != dim {
            return Err(Error::Dimension {
                node: Some(node.id.clone()),
                msg: format!("channel axis of {xs:?} does not match hidden size {dim}"),
            });
        }
        let id = &node.id;
        let x = rb.mapped(node.inputs[0])?;
        let mean_conv = Op::Conv2d {
            in_channels: dim,
            out_channels: dim,
            kernel: [1, 1],
            stride: 1,
        };
        let affine = Some(vec![1, dim, 1, 1]);
        let w1 = format!("{id}.mean1.w");
        let w2 = format!("{id}.mean2.w");
        let (gamma, beta) = (node.param_names[0].as_str(), node.param_names[1].as_str());

        let mut new_ids = Vec::new();
        let mut push = |rb: &mut Rebuild, nid: String, op: Op, ins: &[usize], params: &[&str]| {
            new_ids.push(nid.clone());
            rb.b.push(nid, op, ins, params)
        };
        let mu = push(
            &mut rb,
            format!("{id}/mean1"),
            mean_conv.clone(),
            &[x],
            &[&w1],
        )?;
        let d = push(
            &mut rb,
            format!("{id}/center"),
            Op::Sub { param_shape: None },
            &[x, mu],
            &[],
        )?;
        let sq = push(&mut rb, format!("{id}/square"), Op::Square, &[d], &[])?;
        let var = push(&mut rb, format!("{id}/mean2"), mean_conv, &[sq], &[&w2])?;
        let r = push(
            &mut rb,
            format!("{id}/rsqrt"),
            Op::RsqrtEps { eps },
            &[var],
            &[],
        )?;
        let n = push(
            &mut rb,
            format!("{id}/normalize"),
            Op::Mul { param_shape: None },
            &[d, r],
            &[],
        )?;
        let s = push(
            &mut rb,
            format!("{id}/scale"),
            Op::Mul {
                param_shape: affine.clone(),
            },
            &[n],
            &[gamma],
        )?;
        let y = push(
            &mut rb,
            id.clone(),
            Op::Add {
                param_shape: affine,
            },
            &[s],
            &[beta],
        )?;
        rb.bind(node.output, y);

        rec.substitutions.push(Substitution {
            old: id.clone(),
            new: new_ids,
        });
        let inv = 1.0 / dim as f32;
        for w in [w1, w2] {
            rec.params.push(ParamDirective {
                name: w,
                source: ParamSource::Constant {
                    value: inv,
                    shape: vec![dim, dim, 1, 1],
                },
            });
        }
        for p in [gamma, beta] {
            rec.params.push(ParamDirective {
                name: p.to_string(),
                source: ParamSource::Reshape {
                    from: p.to_string(),
                    shape: vec![1, dim, 1, 1],
                },
            });
        }
    }
    Ok((rb.finish()?, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_deit, ModelConfig};
    use crate::rewrite::layout_to_nchw;

    #[test]
    fn mean_conv_weights_are_one_over_h() {
        let g = build_deit(&ModelConfig::toy()).unwrap();
        let (_, rec) = layernorm_to_conv_recorded(&layout_to_nchw(&g).unwrap()).unwrap();
        let d = rec
            .params
            .iter()
            .find(|d| d.name == "blk0.ln1.mean1.w")
            .unwrap();
        assert_eq!(
            d.source,
            ParamSource::Constant {
                value: 1.0 / 64.0,
                shape: vec![64, 64, 1, 1]
            }
        );
    }

    #[test]
    fn needs_channel_layout() {
        let g = build_deit(&ModelConfig::toy()).unwrap();
        assert!(matches!(
            layernorm_to_conv(&g),
            Err(Error::PassOrder { .. })
        ));
    }

    #[test]
    fn subgraph_shape() {
        let g = build_deit(&ModelConfig::toy()).unwrap();
        let l = layernorm_to_conv(&layout_to_nchw(&g).unwrap()).unwrap();
        assert_eq!(l.count_kind("LayerNorm"), 0);
        assert_eq!(l.count_kind("RsqrtEps"), 5);
        let out = l.node("norm").unwrap();
        assert!(matches!(out.op, Op::Add { param_shape: Some(ref s) } if s == &vec![1, 64, 1, 1]));
    }
}
