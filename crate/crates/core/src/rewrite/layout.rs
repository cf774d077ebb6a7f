use std::collections::HashMap;

use super::{PassRecord, Rebuild};
use crate::error::{Error, Result};
use crate::graph::{Graph, Layout, Op, OpNode};

/// Move the token stream into `(B, C, 1, N)` layout.
///
/// Every token-layout Linear and LayerNorm is switched to channel layout.
/// Elementwise nodes follow the layout of their inputs. All other nodes see
/// their operands in the original layout, so the inverse transform is only
/// materialised in front of the attention head split, the class-token slice,
/// and the graph output. Transforms are created once per edge and reused.
pub fn layout_to_nchw(graph: &Graph) -> Result<Graph> {
    layout_to_nchw_recorded(graph).map(|(g, _)| g)
}

#[derive(Clone, Copy, Default)]
struct Versions {
    orig: Option<usize>,
    nchw: Option<usize>,
}

struct Relayout<'g> {
    rb: Rebuild<'g>,
    versions: HashMap<usize, Versions>,
    inserted: Vec<String>,
}

fn is_layout_agnostic(op: &Op) -> bool {
    match op {
        Op::Add { param_shape } | Op::Sub { param_shape } | Op::Mul { param_shape } => {
            param_shape.is_none()
        }
        Op::Gelu | Op::MulScalar { .. } | Op::Square | Op::RsqrtEps { .. } => true,
        _ => false,
    }
}

/// Token-layout node that the pass converts.
fn converts(node: &OpNode, rank: usize) -> bool {
    matches!(
        node.op,
        Op::Linear {
            layout: Layout::Tokens,
            ..
        } | Op::LayerNorm {
            layout: Layout::Tokens,
            ..
        }
    ) && (rank == 2 || rank == 3)
}

impl<'g> Relayout<'g> {
    fn orig_rank(&self, old: usize) -> usize {
        self.rb.src.edges[old].shape.len()
    }

    fn need_orig(&mut self, old: usize) -> Result<usize> {
        let v = self.versions.get(&old).copied().unwrap_or_default();
        if let Some(e) = v.orig {
            return Ok(e);
        }
        let src = v
            .nchw
            .ok_or_else(|| Error::Invalid(format!("edge {old} read before it was produced")))?;
        let name = self.rb.src.edge_name(old);
        let shape = self.rb.src.edges[old].shape.clone();
        let e = match *shape.as_slice() {
            [b, n, c] => {
                let id = format!("{name}/from_nchw.reshape");
                let r = self.rb.b.push(
                    id.clone(),
                    Op::Reshape {
                        shape: vec![b, c, n],
                    },
                    &[src],
                    &[],
                )?;
                self.inserted.push(id);
                let id = format!("{name}/from_nchw");
                let p = self.rb.b.push(
                    id.clone(),
                    Op::Permute {
                        perm: vec![0, 2, 1],
                    },
                    &[r],
                    &[],
                )?;
                self.inserted.push(id);
                p
            }
            _ => {
                let id = format!("{name}/from_nchw");
                let r = self
                    .rb
                    .b
                    .push(id.clone(), Op::Reshape { shape }, &[src], &[])?;
                self.inserted.push(id);
                r
            }
        };
        self.versions.entry(old).or_default().orig = Some(e);
        Ok(e)
    }

    fn need_nchw(&mut self, old: usize) -> Result<usize> {
        let v = self.versions.get(&old).copied().unwrap_or_default();
        if let Some(e) = v.nchw {
            return Ok(e);
        }
        let src = v
            .orig
            .ok_or_else(|| Error::Invalid(format!("edge {old} read before it was produced")))?;
        let name = self.rb.src.edge_name(old);
        let e = match *self.rb.src.edges[old].shape.as_slice() {
            [b, n, c] => {
                let id = format!("{name}/to_nchw");
                let p = self.rb.b.push(
                    id.clone(),
                    Op::Permute {
                        perm: vec![0, 2, 1],
                    },
                    &[src],
                    &[],
                )?;
                self.inserted.push(id);
                let id = format!("{name}/to_nchw.reshape");
                let r = self.rb.b.push(
                    id.clone(),
                    Op::Reshape {
                        shape: vec![b, c, 1, n],
                    },
                    &[p],
                    &[],
                )?;
                self.inserted.push(id);
                r
            }
            [b, c] => {
                let id = format!("{name}/to_nchw");
                let r = self.rb.b.push(
                    id.clone(),
                    Op::Reshape {
                        shape: vec![b, c, 1, 1],
                    },
                    &[src],
                    &[],
                )?;
                self.inserted.push(id);
                r
            }
            ref s => unreachable!("to-nchw requested for rank-{} edge", s.len()),
        };
        self.versions.entry(old).or_default().nchw = Some(e);
        Ok(e)
    }

    fn has_nchw(&self, old: usize) -> bool {
        self.versions.get(&old).is_some_and(|v| v.nchw.is_some())
    }

    fn push(&mut self, node: &OpNode, op: Op, ins: &[usize]) -> Result<usize> {
        let params: Vec<&str> = node.param_names.iter().map(String::as_str).collect();
        self.rb.b.push(node.id.clone(), op, ins, &params)
    }
}

pub fn layout_to_nchw_recorded(graph: &Graph) -> Result<(Graph, PassRecord)> {
    let mut st = Relayout {
        rb: Rebuild::new(graph),
        versions: HashMap::new(),
        inserted: Vec::new(),
    };
    st.versions.insert(
        graph.input,
        Versions {
            orig: Some(st.rb.b.input()),
            nchw: None,
        },
    );

    for node in &graph.nodes {
        let x = node.inputs[0];
        if converts(node, st.orig_rank(x)) {
            let xin = st.need_nchw(x)?;
            let op = match node.op.clone() {
                Op::Linear {
                    in_features,
                    out_features,
                    ..
                } => Op::Linear {
                    in_features,
                    out_features,
                    layout: Layout::Channels,
                },
                Op::LayerNorm { dim, eps, .. } => Op::LayerNorm {
                    dim,
                    eps,
                    layout: Layout::Channels,
                },
                _ => unreachable!(),
            };
            let out = st.push(node, op, &[xin])?;
            st.versions.insert(
                node.output,
                Versions {
                    orig: None,
                    nchw: Some(out),
                },
            );
        } else if is_layout_agnostic(&node.op) && node.inputs.iter().any(|&e| st.has_nchw(e)) {
            let ins: Vec<usize> = node
                .inputs
                .iter()
                .map(|&e| st.need_nchw(e))
                .collect::<Result<_>>()?;
            let out = st.push(node, node.op.clone(), &ins)?;
            st.versions.insert(
                node.output,
                Versions {
                    orig: None,
                    nchw: Some(out),
                },
            );
        } else {
            let ins: Vec<usize> = node
                .inputs
                .iter()
                .map(|&e| st.need_orig(e))
                .collect::<Result<_>>()?;
            let out = st.push(node, node.op.clone(), &ins)?;
            st.versions.insert(
                node.output,
                Versions {
                    orig: Some(out),
                    nchw: None,
                },
            );
        }
    }
    let out = st.need_orig(graph.output)?;
    st.rb.bind(graph.output, out);
    let g = st.rb.finish()?;
    Ok((
        g,
        PassRecord {
            inserted: st.inserted,
            ..Default::default()
        },
    ))
}
