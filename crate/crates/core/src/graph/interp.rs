use super::ir::{Graph, Layout, Op, OpNode};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{self as t, ConvGeometry, Tensor};

/// Work counters gathered during one execution.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// f32 convolution multiply-accumulates (Conv2d and PatchEmbed).
    pub conv_macs: u64,
    /// Integer convolution multiply-accumulates.
    pub int8_conv_macs: u64,
    pub linear_macs: u64,
    pub matmul_macs: u64,
    pub int8_matmul_macs: u64,
    pub nodes: usize,
}

impl ExecStats {
    /// Convolution work regardless of precision.
    pub fn total_conv_macs(&self) -> u64 {
        self.conv_macs + self.int8_conv_macs
    }
}

fn param<'a>(params: &'a Checkpoint, node: &OpNode, i: usize) -> Result<&'a Tensor> {
    let name = node
        .param_names
        .get(i)
        .ok_or_else(|| Error::Invalid(format!("node `{}` lacks parameter #{i}", node.id)))?;
    params.get(name)
}

fn optional_param<'a>(
    params: &'a Checkpoint,
    node: &OpNode,
    i: usize,
) -> Result<Option<&'a Tensor>> {
    if node.param_names.len() > i {
        param(params, node, i).map(Some)
    } else {
        Ok(None)
    }
}

/// Evaluate one node in f32.
pub fn eval_float_node(
    node: &OpNode,
    inputs: &[&Tensor],
    params: &Checkpoint,
    stats: &mut ExecStats,
) -> Result<Tensor> {
    let x = inputs[0];
    let out = match &node.op {
        Op::Linear {
            in_features,
            out_features,
            layout,
        } => {
            let w = param(params, node, 0)?;
            let b = optional_param(params, node, 1)?;
            stats.linear_macs += (x.numel() / in_features * out_features * in_features) as u64;
            match layout {
                Layout::Tokens => t::linear(x, w, b)?,
                Layout::Channels => {
                    let w4 = w.reshape(&[*out_features, *in_features, 1, 1])?;
                    t::conv2d(x, &w4, b, 1)?
                }
            }
        }
        Op::LayerNorm { eps, layout, .. } => {
            let g = param(params, node, 0)?;
            let b = param(params, node, 1)?;
            match layout {
                Layout::Tokens => t::layernorm_ref(x, g, b, *eps)?,
                Layout::Channels => {
                    let last = t::permute(x, &[0, 2, 3, 1])?;
                    let y = t::layernorm_ref(&last, g, b, *eps)?;
                    t::permute(&y, &[0, 3, 1, 2])?
                }
            }
        }
        Op::Conv2d { stride, .. } => {
            let w = param(params, node, 0)?;
            let b = optional_param(params, node, 1)?;
            stats.conv_macs += ConvGeometry::infer(x.shape(), w.shape(), *stride)?.macs();
            t::conv2d(x, w, b, *stride)?
        }
        Op::PatchEmbed { patch, .. } => {
            let w = param(params, node, 0)?;
            let b = param(params, node, 1)?;
            stats.conv_macs += ConvGeometry::infer(x.shape(), w.shape(), *patch)?.macs();
            t::conv2d(x, w, Some(b), *patch)?
        }
        Op::MatMulQK => {
            let kt = t::transpose_last2(inputs[1])?;
            stats.matmul_macs += matmul_macs(x.shape(), kt.shape());
            t::matmul_batched(x, &kt)?
        }
        Op::MatMulAV => {
            stats.matmul_macs += matmul_macs(x.shape(), inputs[1].shape());
            t::matmul_batched(x, inputs[1])?
        }
        Op::Softmax => t::softmax_lastdim(x)?,
        Op::Gelu => t::gelu(x)?,
        Op::Add { param_shape } | Op::Sub { param_shape } | Op::Mul { param_shape } => {
            let rhs = match param_shape {
                Some(_) => param(params, node, 0)?,
                None => inputs[1],
            };
            match node.op {
                Op::Add { .. } => t::add(x, rhs)?,
                Op::Sub { .. } => t::sub(x, rhs)?,
                _ => t::mul(x, rhs)?,
            }
        }
        Op::MulScalar { value } => t::mul_scalar(x, *value)?,
        Op::Square => t::square(x)?,
        Op::RsqrtEps { eps } => t::rsqrt_eps(x, *eps)?,
        Op::Permute { perm } => t::permute(x, perm)?,
        Op::Reshape { shape } => t::reshape(x, shape)?,
        Op::Concat { axis } => t::concat(inputs, *axis)?,
        Op::AddPosEmbed { .. } => t::add(x, param(params, node, 0)?)?,
        Op::TokenInsert { count, dim } => {
            let batch = x.shape()[0];
            let mut parts = Vec::with_capacity(count + 1);
            for i in 0..*count {
                let tok = param(params, node, i)?;
                if tok.numel() != *dim {
                    return Err(Error::dim(format!(
                        "token `{}` has {} elements, expected {dim}",
                        node.param_names[i],
                        tok.numel()
                    )));
                }
                let rep: Vec<f32> = tok.as_f32()?.repeat(batch);
                parts.push(Tensor::from_f32(vec![batch, 1, *dim], rep)?);
            }
            let mut refs: Vec<&Tensor> = parts.iter().collect();
            refs.push(x);
            t::concat(&refs, 1)?
        }
        Op::Slice { axis, start, len } => t::slice(x, *axis, *start, *len)?,
        Op::Quantize { .. } | Op::Dequantize { .. } => {
            return Err(Error::Invalid(format!(
                "node `{}`: quantization boundaries need the quantized executor",
                node.id
            )))
        }
    };
    Ok(out)
}

fn matmul_macs(a: &[usize], b: &[usize]) -> u64 {
    let r = a.len();
    let batch: usize = a[..r - 2].iter().product();
    (batch * a[r - 2] * a[r - 1] * b[r - 1]) as u64
}

/// Index of the last node reading each edge; the graph output is kept.
pub(crate) fn last_uses(graph: &Graph) -> Vec<usize> {
    let mut last = vec![0usize; graph.edges.len()];
    for (i, n) in graph.nodes.iter().enumerate() {
        for &e in &n.inputs {
            if e < last.len() {
                last[e] = i;
            }
        }
    }
    if graph.output < last.len() {
        last[graph.output] = usize::MAX;
    }
    last
}

/// Shared topological loop. `eval` computes one node from its inputs.
pub(crate) fn run_graph(
    graph: &Graph,
    input: &Tensor,
    mut eval: impl FnMut(&OpNode, &[&Tensor]) -> Result<Tensor>,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let expect = graph.input_shape();
    if input.shape() != expect {
        return Err(Error::dim(format!(
            "graph input is {expect:?}, got {:?}",
            input.shape()
        )));
    }
    let last = last_uses(graph);
    let mut values: Vec<Option<Tensor>> = vec![None; graph.edges.len()];
    observe(graph.input, input);
    values[graph.input] = Some(input.clone());
    for (i, node) in graph.nodes.iter().enumerate() {
        let out = {
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|&e| {
                    values.get(e).and_then(Option::as_ref).ok_or_else(|| {
                        Error::Invalid(format!("node `{}` reads unset edge {e}", node.id))
                    })
                })
                .collect::<Result<_>>()?;
            eval(node, &ins).map_err(|e| e.at_node(&node.id))?
        };
        let edge = &graph.edges[node.output];
        if out.shape() != edge.shape.as_slice() {
            return Err(Error::Dimension {
                node: Some(node.id.clone()),
                msg: format!("produced {:?}, edge expects {:?}", out.shape(), edge.shape),
            });
        }
        observe(node.output, &out);
        values[node.output] = Some(out);
        for &e in &node.inputs {
            if last[e] == i {
                values[e] = None;
            }
        }
    }
    values[graph.output]
        .take()
        .ok_or_else(|| Error::Invalid("graph output was never produced".into()))
}

pub fn execute(graph: &Graph, params: &Checkpoint, input: &Tensor) -> Result<Tensor> {
    execute_with_stats(graph, params, input).map(|(y, _)| y)
}

pub fn execute_with_stats(
    graph: &Graph,
    params: &Checkpoint,
    input: &Tensor,
) -> Result<(Tensor, ExecStats)> {
    let mut stats = ExecStats::default();
    let y = run_graph(
        graph,
        input,
        |node, ins| {
            stats.nodes += 1;
            eval_float_node(node, ins, params, &mut stats)
        },
        |_, _| {},
    )?;
    Ok((y, stats))
}

/// Execute and hand every produced edge value (including the input) to
/// `observer` as `(edge id, value)`.
pub fn execute_observed(
    graph: &Graph,
    params: &Checkpoint,
    input: &Tensor,
    observer: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let mut stats = ExecStats::default();
    run_graph(
        graph,
        input,
        |node, ins| eval_float_node(node, ins, params, &mut stats),
        observer,
    )
}
