use super::{PassRecord, Rebuild, Substitution};
use crate::checkpoint::{ParamDirective, ParamSource};
use crate::error::{Error, Result};
use crate::graph::{Graph, Layout, Op};

/// Replace every channel-layout Linear with a 1×1 stride-1 Conv2d.
///
/// The weight `O×I` is inherited as `O×I×1×1` with unchanged values; the
/// bias is kept. Node ids and parameter names are preserved.
pub fn linear_to_conv(graph: &Graph) -> Result<Graph> {
    linear_to_conv_recorded(graph).map(|(g, _)| g)
}

pub fn linear_to_conv_recorded(graph: &Graph) -> Result<(Graph, PassRecord)> {
    let mut rb = Rebuild::new(graph);
    let mut rec = PassRecord::default();
    for node in &graph.nodes {
        let Op::Linear {
            in_features,
            out_features,
            layout,
        } = node.op
        else {
            rb.copy(node)?;
            continue;
        };
        let x = node.inputs[0];
        if layout != Layout::Channels || graph.edges[x].shape.len() != 4 {
            return Err(Error::PassOrder {
                pass: "linear_to_conv".into(),
                msg: format!(
                    "Linear `{}` reads {:?} activations; run layout_to_nchw first",
                    node.id, graph.edges[x].shape
                ),
            });
        }
        let xin = rb.mapped(x)?;
        let params: Vec<&str> = node.param_names.iter().map(String::as_str).collect();
        let out = rb.b.push(
            node.id.clone(),
            Op::Conv2d {
                in_channels: in_features,
                out_channels: out_features,
                kernel: [1, 1],
                stride: 1,
            },
            &[xin],
            &params,
        )?;
        rb.bind(node.output, out);
        rec.substitutions.push(Substitution {
            old: node.id.clone(),
            new: vec![node.id.clone()],
        });
        rec.params.push(ParamDirective {
            name: node.param_names[0].clone(),
            source: ParamSource::Reshape {
                from: node.param_names[0].clone(),
                shape: vec![out_features, in_features, 1, 1],
            },
        });
    }
    Ok((rb.finish()?, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{inherit_weights, Checkpoint, CheckpointMeta};
    use crate::graph::{execute, Dialect, GraphBuilder};
    use crate::rewrite::{layout_to_nchw, RewritePlan};
    use crate::tensor::Tensor;

    #[test]
    fn weight_becomes_pointwise_kernel() {
        let mut b = GraphBuilder::new(vec![1, 2, 3]);
        let x = b.input();
        let y = b
            .push(
                "fc",
                Op::Linear {
                    in_features: 3,
                    out_features: 4,
                    layout: Layout::Tokens,
                },
                &[x],
                &["fc.w", "fc.b"],
            )
            .unwrap();
        let g = b.finish(Dialect::Original, y);
        let (g1, r1) = super::super::layout_to_nchw_recorded(&g).unwrap();
        let (g2, r2) = linear_to_conv_recorded(&g1).unwrap();
        let conv = g2.node("fc").unwrap();
        assert!(matches!(
            conv.op,
            Op::Conv2d {
                kernel: [1, 1],
                stride: 1,
                ..
            }
        ));
        assert_eq!(g2.count_kind("Linear"), 0);

        let mut ck = Checkpoint::new(CheckpointMeta::default());
        let w: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 3.0).collect();
        ck.insert("fc.w", Tensor::from_f32(vec![4, 3], w.clone()).unwrap())
            .unwrap();
        ck.insert(
            "fc.b",
            Tensor::from_f32(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        )
        .unwrap();
        let mut plan = RewritePlan::default();
        plan.absorb(r1);
        plan.absorb(r2);
        let mut g2 = g2;
        g2.dialect = Dialect::Lowered;
        let inh = inherit_weights(&ck, &g2, &plan).unwrap();
        let cw = inh.get("fc.w").unwrap();
        assert_eq!(cw.shape(), &[4, 3, 1, 1]);
        assert_eq!(cw.as_f32().unwrap(), w.as_slice());

        let x = Tensor::from_f32(vec![1, 2, 3], vec![1., -2., 0.5, 3., 0.25, -1.]).unwrap();
        let a = execute(&g, &ck, &x).unwrap();
        let b = execute(&g2, &inh, &x).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn no_linear_is_fixpoint() {
        let mut b = GraphBuilder::new(vec![1, 4]);
        let x = b.input();
        let y = b.push("g", Op::Gelu, &[x], &[]).unwrap();
        let g = b.finish(Dialect::Original, y);
        assert_eq!(linear_to_conv(&g).unwrap(), g);
        let l = layout_to_nchw(&g).unwrap();
        assert_eq!(linear_to_conv(&l).unwrap(), l);
    }
}
